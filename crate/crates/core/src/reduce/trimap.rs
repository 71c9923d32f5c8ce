use std::collections::HashSet;

use rand::Rng as _;

use super::{annealed_lr, is_checkpoint, pca_init, prepare_input, sq_dist, step_all, Method, Projection, ReducerConfig};
use crate::embed::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::knn::FlatIndex;
use crate::seed::rng;

const OUTLIERS_PER_NEIGHBOR: usize = 2;
const WEIGHT_ADJ: f64 = 500.0;

#[derive(Debug, Clone, Copy)]
struct Triplet {
    anchor: usize,
    near: usize,
    far: usize,
    weight: f64,
}

/// Local scale: mean distance to the 4th-6th neighbours (or whatever exists).
fn local_scale(nbrs: &[(usize, f64)]) -> f64 {
    let band: Vec<f64> = nbrs.iter().skip(3).take(3).map(|(_, d)| *d).collect();
    let band = if band.is_empty() {
        nbrs.iter().map(|(_, d)| *d).collect()
    } else {
        band
    };
    (band.iter().sum::<f64>() / band.len() as f64).max(1e-10)
}

fn sample_triplets(x: &EmbeddingMatrix, graph: &[Vec<(usize, f64)>], rng: &mut crate::seed::Rng) -> Result<Vec<Triplet>> {
    let n = x.len();
    let scales: Vec<f64> = graph.iter().map(|nb| local_scale(nb)).collect();
    let mut raw = Vec::new();
    for (i, nbrs) in graph.iter().enumerate() {
        let excluded: HashSet<usize> = nbrs.iter().map(|(j, _)| *j).chain([i]).collect();
        if excluded.len() >= n {
            return Err(Error::InvalidInput(
                "every point is a neighbour; no far points to sample".into(),
            ));
        }
        for &(j, dij) in nbrs {
            for _ in 0..OUTLIERS_PER_NEIGHBOR {
                let k = loop {
                    let k = rng.random_range(0..n);
                    if !excluded.contains(&k) {
                        break k;
                    }
                };
                let dik = (1.0 - dot(x.row(i), x.row(k))).clamp(0.0, 2.0);
                let log_w = -dij * dij / (scales[i] * scales[j]) + dik * dik / (scales[i] * scales[k]);
                raw.push((i, j, k, log_w));
            }
        }
    }
    let max_log = raw.iter().map(|t| t.3).fold(f64::NEG_INFINITY, f64::max);
    let adjusted: Vec<f64> = raw
        .iter()
        .map(|t| (1.0 + WEIGHT_ADJ * ((t.3 - max_log).exp() + 1e-4)).ln())
        .collect();
    let max_w = adjusted.iter().copied().fold(0.0, f64::max);
    Ok(raw
        .iter()
        .zip(adjusted)
        .map(|(&(anchor, near, far, _), w)| Triplet {
            anchor,
            near,
            far,
            weight: w / max_w,
        })
        .collect())
}

/// Triplet loss `w · s_ik / (s_ij + s_ik)` with `s = 1 / (1 + d²)`, which is
/// `w · (1 + d_ij) / (2 + d_ij + d_ik)` in squared distances.
fn loss_and_grad(coords: &[f64], dim: usize, triplets: &[Triplet], grads: &mut [f64]) -> f64 {
    grads.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    for t in triplets {
        let dij = sq_dist(coords, dim, t.anchor, t.near);
        let dik = sq_dist(coords, dim, t.anchor, t.far);
        let s = 2.0 + dij + dik;
        total += t.weight * (1.0 + dij) / s;
        let c_ij = t.weight * (1.0 + dik) / (s * s);
        let c_ik = -t.weight * (1.0 + dij) / (s * s);
        for c in 0..dim {
            let yi = coords[t.anchor * dim + c];
            let gij = 2.0 * c_ij * (yi - coords[t.near * dim + c]);
            let gik = 2.0 * c_ik * (yi - coords[t.far * dim + c]);
            grads[t.anchor * dim + c] += gij + gik;
            grads[t.near * dim + c] -= gij;
            grads[t.far * dim + c] -= gik;
        }
    }
    total
}

pub fn fit_trimap_like(x: &EmbeddingMatrix, cfg: &ReducerConfig) -> Result<Projection> {
    let x = prepare_input(x, cfg)?;
    let n = x.len();
    let dim = cfg.out_dim;
    let index = FlatIndex::build(&x)?;
    let graph = index.knn_graph(cfg.n_neighbors)?;
    let mut r = rng(cfg.seed);
    let mut coords = pca_init(&x, dim, &mut r);
    let triplets = sample_triplets(&x, &graph, &mut r)?;

    let mut grads = vec![0.0; n * dim];
    let mut objective = Vec::new();
    for epoch in 0..cfg.epochs {
        loss_and_grad(&coords, dim, &triplets, &mut grads);
        step_all(&mut coords, dim, &mut grads, annealed_lr(cfg.learning_rate, epoch, cfg.epochs));
        if is_checkpoint(epoch + 1, cfg.epochs) {
            let loss = loss_and_grad(&coords, dim, &triplets, &mut grads);
            objective.push((epoch + 1, loss));
        }
    }

    Ok(Projection {
        ids: x.ids().to_vec(),
        coords,
        out_dim: dim,
        method: Method::TrimapLike,
        config: *cfg,
        seed: cfg.seed,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let coords = vec![0.3, -0.2, 1.1, 0.4, -0.7, 0.9, 0.05, 0.6];
        let triplets = vec![
            Triplet { anchor: 0, near: 1, far: 2, weight: 0.7 },
            Triplet { anchor: 3, near: 0, far: 1, weight: 1.0 },
            Triplet { anchor: 1, near: 3, far: 2, weight: 0.2 },
        ];
        let mut g = vec![0.0; coords.len()];
        loss_and_grad(&coords, 2, &triplets, &mut g);
        let h = 1e-6;
        let mut scratch = vec![0.0; coords.len()];
        for p in 0..coords.len() {
            let mut up = coords.clone();
            up[p] += h;
            let mut dn = coords.clone();
            dn[p] -= h;
            let fd = (loss_and_grad(&up, 2, &triplets, &mut scratch)
                - loss_and_grad(&dn, 2, &triplets, &mut scratch))
                / (2.0 * h);
            assert!((fd - g[p]).abs() < 1e-7, "param {p}: fd {fd} vs {}", g[p]);
        }
    }
}
