use std::collections::BTreeMap;

use rand::Rng as _;

use super::{annealed_lr, is_checkpoint, pca_init, prepare_input, sq_dist, step_point, Method, Projection, ReducerConfig};
use crate::embed::EmbeddingMatrix;
use crate::error::Result;
use crate::knn::FlatIndex;
use crate::seed::rng;

const NEGATIVE_SAMPLES: usize = 5;
const BISECTION_STEPS: usize = 64;
const REPULSION_EPS: f64 = 1e-3;
/// Full-objective evaluation is quadratic in N; skip it beyond this size.
const OBJECTIVE_MAX_POINTS: usize = 3000;

/// Least-squares fit of `1 / (1 + a·x^(2b))` to the offset-exponential target
/// curve (1 below `min_dist`, `exp(-(x - min_dist) / spread)` above) on 300
/// points of `[0, 3·spread]`, by damped Gauss-Newton.
pub fn fit_ab(min_dist: f64, spread: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let f = 1.0 / (1.0 + a * x.powf(2.0 * b));
                (f - y) * (f - y)
            })
            .sum()
    };
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut lambda = 1e-3;
    let mut cur = sse(a, b);
    for _ in 0..500 {
        // normal equations J^T J δ = -J^T r
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let denom = 1.0 + a * p;
            let f = 1.0 / denom;
            let r = f - y;
            let da = -p / (denom * denom);
            let db = -a * p * 2.0 * x.ln() / (denom * denom);
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let mut improved = false;
        for _ in 0..30 {
            let (m11, m22) = (jaa * (1.0 + lambda), jbb * (1.0 + lambda));
            let det = m11 * m22 - jab * jab;
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let da = -(m22 * ga - jab * gb) / det;
            let db = -(m11 * gb - jab * ga) / det;
            let (na, nb) = (a + da, b + db);
            if na > 0.0 && nb > 0.0 {
                let next = sse(na, nb);
                if next < cur {
                    let done = (cur - next) < 1e-15 * cur.max(1e-300);
                    a = na;
                    b = nb;
                    cur = next;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = true;
                    if done {
                        return (a, b);
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (a, b)
}

/// Membership strengths `exp(-max(0, d - ρ) / σ)` for one point's neighbours, with
/// σ bisected so they sum to `log2(k)`.
pub(crate) fn smooth_memberships(dists: &[f64]) -> Vec<f64> {
    let k = dists.len();
    let target = (k as f64).log2();
    let rho = dists.iter().copied().filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
    let rho = if rho.is_finite() { rho } else { 0.0 };
    let total = |sigma: f64| -> f64 {
        dists
            .iter()
            .map(|d| (-(d - rho).max(0.0) / sigma).exp())
            .sum()
    };
    let (mut lo, mut hi, mut sigma) = (0.0f64, f64::INFINITY, 1.0f64);
    for _ in 0..BISECTION_STEPS {
        let s = total(sigma);
        if (s - target).abs() < 1e-5 {
            break;
        }
        if s > target {
            hi = sigma;
            sigma = 0.5 * (lo + hi);
        } else {
            lo = sigma;
            sigma = if hi.is_finite() { 0.5 * (lo + hi) } else { sigma * 2.0 };
        }
    }
    let mean = dists.iter().sum::<f64>() / k as f64;
    let sigma = sigma.max(1e-3 * mean).max(1e-12);
    dists.iter().map(|d| (-(d - rho).max(0.0) / sigma).exp()).collect()
}

/// Symmetrized fuzzy graph as a canonical (sorted) directed edge list holding
/// both orientations of every undirected edge.
pub(crate) fn fuzzy_graph(graph: &[Vec<(usize, f64)>]) -> Vec<(usize, usize, f64)> {
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, nbrs) in graph.iter().enumerate() {
        let dists: Vec<f64> = nbrs.iter().map(|(_, d)| *d).collect();
        for ((j, _), w) in nbrs.iter().zip(smooth_memberships(&dists)) {
            directed.insert((i, *j), w);
        }
    }
    let mut sym: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&(i, j), &w) in &directed {
        let wt = directed.get(&(j, i)).copied().unwrap_or(0.0);
        let v = w + wt - w * wt;
        sym.insert((i, j), v);
        sym.insert((j, i), v);
    }
    sym.into_iter().map(|((i, j), w)| (i, j, w)).collect()
}

fn cross_entropy(coords: &[f64], dim: usize, n: usize, weights: &BTreeMap<(usize, usize), f64>, a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d2 = sq_dist(coords, dim, i, j);
            let q = (1.0 / (1.0 + a * d2.powf(b))).clamp(1e-12, 1.0 - 1e-12);
            let w = weights.get(&(i, j)).copied().unwrap_or(0.0);
            total -= w * q.ln() + (1.0 - w) * (1.0 - q).ln();
        }
    }
    total
}

pub fn fit_umap_like(x: &EmbeddingMatrix, cfg: &ReducerConfig) -> Result<Projection> {
    let x = prepare_input(x, cfg)?;
    let n = x.len();
    let dim = cfg.out_dim;
    let index = FlatIndex::build(&x)?;
    let graph = index.knn_graph(cfg.n_neighbors)?;
    let edges = fuzzy_graph(&graph);
    let (a, b) = fit_ab(cfg.min_dist, 1.0);

    let mut r = rng(cfg.seed);
    let mut coords = pca_init(&x, dim, &mut r);

    let max_w = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    let epochs = cfg.epochs;
    // edges too weak to be sampled even once over the run are dropped
    let active: Vec<(usize, usize, f64)> = edges
        .iter()
        .copied()
        .filter(|e| e.2 >= max_w / epochs as f64)
        .collect();
    let per_sample: Vec<f64> = active.iter().map(|e| max_w / e.2).collect();
    let per_negative: Vec<f64> = per_sample.iter().map(|p| p / NEGATIVE_SAMPLES as f64).collect();
    let mut next_sample = per_sample.clone();
    let mut next_negative = per_negative.clone();

    let weights: BTreeMap<(usize, usize), f64> = edges.iter().map(|&(i, j, w)| ((i, j), w)).collect();
    let track = n <= OBJECTIVE_MAX_POINTS;
    let mut objective = Vec::new();
    let mut grad = vec![0.0; dim];

    for epoch in 0..epochs {
        let lr = annealed_lr(cfg.learning_rate, epoch, epochs);
        for (e, &(i, j, _)) in active.iter().enumerate() {
            if next_sample[e] > (epoch + 1) as f64 {
                continue;
            }
            let d2 = sq_dist(&coords, dim, i, j);
            if d2 > 0.0 {
                let coeff = 2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b));
                for c in 0..dim {
                    grad[c] = coeff * (coords[i * dim + c] - coords[j * dim + c]);
                }
                let mut other: Vec<f64> = grad.iter().map(|g| -g).collect();
                step_point(&mut coords, dim, i, &mut grad, lr);
                step_point(&mut coords, dim, j, &mut other, lr);
            }
            next_sample[e] += per_sample[e];

            let n_neg = (((epoch + 1) as f64 - next_negative[e]) / per_negative[e]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let k = r.random_range(0..n);
                if k == i {
                    continue;
                }
                let d2 = sq_dist(&coords, dim, i, k);
                if d2 <= 0.0 {
                    continue;
                }
                let coeff = 2.0 * b / ((REPULSION_EPS + d2) * (1.0 + a * d2.powf(b)));
                for c in 0..dim {
                    grad[c] = -coeff * (coords[i * dim + c] - coords[k * dim + c]);
                }
                step_point(&mut coords, dim, i, &mut grad, lr);
            }
            next_negative[e] += n_neg as f64 * per_negative[e];
        }
        if track && is_checkpoint(epoch + 1, epochs) {
            objective.push((epoch + 1, cross_entropy(&coords, dim, n, &weights, a, b)));
        }
    }

    Ok(Projection {
        ids: x.ids().to_vec(),
        coords,
        out_dim: dim,
        method: Method::UmapLike,
        config: *cfg,
        seed: cfg.seed,
        objective,
    })
}
