use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng as _;

use super::{annealed_lr, is_checkpoint, pca_init, prepare_input, sq_dist, step_all, Method, Projection, ReducerConfig};
use crate::embed::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::knn::FlatIndex;
use crate::seed::{rng, Rng};

const MID_NEAR_RATIO: f64 = 0.5;
const FAR_RATIO: f64 = 2.0;
const MID_NEAR_CANDIDATES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct PairWeights {
    pub neighbor: f64,
    pub mid_near: f64,
    pub far: f64,
}

/// Three phases over 100/450, 100/450 and 250/450 of the run. The mid-near
/// weight falls linearly from 1000 to 3, holds at 3, then drops to 0. Neighbour
/// and far weights stay at 1.
pub(crate) fn phase_weights(epoch: usize, epochs: usize) -> PairWeights {
    let p1 = (epochs as f64 * 100.0 / 450.0).round() as usize;
    let p2 = (epochs as f64 * 200.0 / 450.0).round() as usize;
    let mid_near = if epoch < p1 {
        let t = epoch as f64 / p1.max(1) as f64;
        1000.0 * (1.0 - t) + 3.0 * t
    } else if epoch < p2 {
        3.0
    } else {
        0.0
    };
    PairWeights {
        neighbor: 1.0,
        mid_near,
        far: 1.0,
    }
}

struct PairSets {
    neighbor: Vec<(usize, usize)>,
    mid_near: Vec<(usize, usize)>,
    far: Vec<(usize, usize)>,
}

fn sample_pairs(x: &EmbeddingMatrix, graph: &[Vec<(usize, f64)>], n_neighbors: usize, rng: &mut Rng) -> Result<PairSets> {
    let n = x.len();
    let n_mid = ((n_neighbors as f64 * MID_NEAR_RATIO).round() as usize).max(1);
    let n_far = ((n_neighbors as f64 * FAR_RATIO).round() as usize).max(1);
    if n < MID_NEAR_CANDIDATES + 1 {
        return Err(Error::InvalidInput(format!(
            "need more than {MID_NEAR_CANDIDATES} points for mid-near sampling"
        )));
    }
    let mut sets = PairSets {
        neighbor: Vec::new(),
        mid_near: Vec::new(),
        far: Vec::new(),
    };
    for (i, nbrs) in graph.iter().enumerate() {
        sets.neighbor.extend(nbrs.iter().map(|(j, _)| (i, *j)));
        for _ in 0..n_mid {
            let mut cands: Vec<(f64, usize)> = sample(rng, n - 1, MID_NEAR_CANDIDATES)
                .into_iter()
                .map(|k| if k >= i { k + 1 } else { k })
                .map(|k| ((1.0 - dot(x.row(i), x.row(k))).clamp(0.0, 2.0), k))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            sets.mid_near.push((i, cands[1].1));
        }
        let excluded: HashSet<usize> = nbrs.iter().map(|(j, _)| *j).chain([i]).collect();
        if excluded.len() >= n {
            return Err(Error::InvalidInput("no far points to sample".into()));
        }
        for _ in 0..n_far {
            let k = loop {
                let k = rng.random_range(0..n);
                if !excluded.contains(&k) {
                    break k;
                }
            };
            sets.far.push((i, k));
        }
    }
    Ok(sets)
}

/// Rational pair losses in `d̃ = 1 + ‖y_i − y_j‖²`:
/// neighbours `d̃ / (10 + d̃)`, mid-near `d̃ / (10⁴ + d̃)`, far `1 / (1 + d̃)`.
fn loss_and_grad(coords: &[f64], dim: usize, pairs: &PairSets, w: PairWeights, grads: &mut [f64]) -> f64 {
    grads.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    let add = |i: usize, j: usize, coef: f64, grads: &mut [f64]| {
        for c in 0..dim {
            let g = 2.0 * coef * (coords[i * dim + c] - coords[j * dim + c]);
            grads[i * dim + c] += g;
            grads[j * dim + c] -= g;
        }
    };
    for &(i, j) in &pairs.neighbor {
        let d = 1.0 + sq_dist(coords, dim, i, j);
        total += w.neighbor * d / (10.0 + d);
        add(i, j, w.neighbor * 10.0 / ((10.0 + d) * (10.0 + d)), grads);
    }
    if w.mid_near > 0.0 {
        for &(i, j) in &pairs.mid_near {
            let d = 1.0 + sq_dist(coords, dim, i, j);
            total += w.mid_near * d / (10000.0 + d);
            add(i, j, w.mid_near * 10000.0 / ((10000.0 + d) * (10000.0 + d)), grads);
        }
    }
    for &(i, j) in &pairs.far {
        let d = 1.0 + sq_dist(coords, dim, i, j);
        total += w.far / (1.0 + d);
        add(i, j, -w.far / ((1.0 + d) * (1.0 + d)), grads);
    }
    total
}

pub fn fit_pacmap_like(x: &EmbeddingMatrix, cfg: &ReducerConfig) -> Result<Projection> {
    let x = prepare_input(x, cfg)?;
    let n = x.len();
    let dim = cfg.out_dim;
    let index = FlatIndex::build(&x)?;
    let graph = index.knn_graph(cfg.n_neighbors)?;
    let mut r = rng(cfg.seed);
    let mut coords = pca_init(&x, dim, &mut r);
    let pairs = sample_pairs(&x, &graph, cfg.n_neighbors, &mut r)?;

    let mut grads = vec![0.0; n * dim];
    let mut objective = Vec::new();
    for epoch in 0..cfg.epochs {
        let w = phase_weights(epoch, cfg.epochs);
        loss_and_grad(&coords, dim, &pairs, w, &mut grads);
        step_all(&mut coords, dim, &mut grads, annealed_lr(cfg.learning_rate, epoch, cfg.epochs));
        if is_checkpoint(epoch + 1, cfg.epochs) {
            let loss = loss_and_grad(&coords, dim, &pairs, w, &mut grads);
            objective.push((epoch + 1, loss));
        }
    }

    Ok(Projection {
        ids: x.ids().to_vec(),
        coords,
        out_dim: dim,
        method: Method::PacmapLike,
        config: *cfg,
        seed: cfg.seed,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_phases() {
        assert_eq!(phase_weights(0, 450).mid_near, 1000.0);
        assert!((phase_weights(50, 450).mid_near - 501.5).abs() < 1e-9);
        assert_eq!(phase_weights(150, 450).mid_near, 3.0);
        assert_eq!(phase_weights(300, 450).mid_near, 0.0);
        for e in [0, 120, 449] {
            let w = phase_weights(e, 450);
            assert_eq!((w.neighbor, w.far), (1.0, 1.0));
        }
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let coords = vec![0.3, -0.2, 1.1, 0.4, -0.7, 0.9, 0.05, 0.6];
        let pairs = PairSets {
            neighbor: vec![(0, 1), (2, 3)],
            mid_near: vec![(1, 2)],
            far: vec![(0, 3), (3, 1)],
        };
        let w = PairWeights { neighbor: 2.0, mid_near: 40.0, far: 1.0 };
        let mut g = vec![0.0; coords.len()];
        loss_and_grad(&coords, 2, &pairs, w, &mut g);
        let h = 1e-6;
        let mut scratch = vec![0.0; coords.len()];
        for p in 0..coords.len() {
            let mut up = coords.clone();
            up[p] += h;
            let mut dn = coords.clone();
            dn[p] -= h;
            let fd = (loss_and_grad(&up, 2, &pairs, w, &mut scratch) - loss_and_grad(&dn, 2, &pairs, w, &mut scratch))
                / (2.0 * h);
            assert!((fd - g[p]).abs() < 1e-7, "param {p}: fd {fd} vs {}", g[p]);
        }
    }
}
