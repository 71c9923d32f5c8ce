//! Nonlinear dimension reduction to 2 or 3 dimensions.
//!
//! Three neighbour-graph methods are provided: a fuzzy-simplicial-set method
//! with negative sampling ([`fit_umap_like`]), a triplet-ranking method
//! ([`fit_trimap_like`]) and a three-pair-type method with a phased weight
//! schedule ([`fit_pacmap_like`]). They share the cosine kNN graph, PCA
//! initialisation and the clipped, linearly annealed gradient step in this module.

mod pacmap;
mod quality;
mod trimap;
mod umap;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::seed::Rng;

pub use pacmap::fit_pacmap_like;
pub use quality::trustworthiness;
pub use trimap::fit_trimap_like;
pub use umap::{fit_ab, fit_umap_like};

/// Per-point gradient norm cap applied at every step.
pub const GRAD_CLIP: f64 = 4.0;
/// Standard deviation of the first PCA coordinate after initial scaling.
pub const INIT_SPREAD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    UmapLike,
    TrimapLike,
    PacmapLike,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::UmapLike, Method::TrimapLike, Method::PacmapLike];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::UmapLike => "umap_like",
            Method::TrimapLike => "trimap_like",
            Method::PacmapLike => "pacmap_like",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown reducer {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducerConfig {
    pub method: Method,
    pub out_dim: usize,
    pub n_neighbors: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub min_dist: f64,
}

impl Default for ReducerConfig {
    fn default() -> Self {
        Self {
            method: Method::UmapLike,
            out_dim: 2,
            n_neighbors: 15,
            epochs: 450,
            learning_rate: 1.0,
            seed: 0,
            min_dist: 0.1,
        }
    }
}

impl ReducerConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self, n_points: usize) -> Result<()> {
        if !(2..=3).contains(&self.out_dim) {
            return Err(Error::InvalidConfig(format!("out_dim must be 2 or 3, got {}", self.out_dim)));
        }
        if self.n_neighbors == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("n_neighbors and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.min_dist >= 0.0 && self.min_dist.is_finite()) {
            return Err(Error::InvalidConfig("min_dist must be nonnegative".into()));
        }
        if n_points < self.n_neighbors + 1 {
            return Err(Error::InvalidInput(format!(
                "{n_points} points are too few for n_neighbors={}",
                self.n_neighbors
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub ids: Vec<String>,
    /// Row-major, `ids.len() × out_dim`.
    pub coords: Vec<f64>,
    pub out_dim: usize,
    pub method: Method,
    pub config: ReducerConfig,
    pub seed: u64,
    /// `(epoch, objective)` samples; epoch 1 and the final epoch are always present.
    pub objective: Vec<(usize, f64)>,
}

impl Projection {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.out_dim..(i + 1) * self.out_dim]
    }

    /// Coordinates as an embedding matrix (not normalized), for code that
    /// consumes embeddings generically.
    pub fn to_matrix(&self) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(
            self.ids.clone(),
            self.out_dim,
            self.coords.clone(),
            format!("projection:{}", self.method),
        )
    }
}

pub fn fit(x: &EmbeddingMatrix, cfg: &ReducerConfig) -> Result<Projection> {
    match cfg.method {
        Method::UmapLike => fit_umap_like(x, cfg),
        Method::TrimapLike => fit_trimap_like(x, cfg),
        Method::PacmapLike => fit_pacmap_like(x, cfg),
    }
}

pub(crate) fn prepare_input(x: &EmbeddingMatrix, cfg: &ReducerConfig) -> Result<EmbeddingMatrix> {
    cfg.validate(x.len())?;
    if x.is_normalized() {
        Ok(x.clone())
    } else {
        log::warn!("reducer input is not unit-normalized; normalizing rows");
        let m = x.clone().normalized();
        if !m.empty_rows.is_empty() {
            return Err(Error::InvalidInput(format!(
                "reducer input has {} zero rows",
                m.empty_rows.len()
            )));
        }
        Ok(m)
    }
}

/// Top-`out_dim` principal-component scores, sign-fixed, scaled so the first
/// component has standard deviation [`INIT_SPREAD`], plus seeded jitter at 1%
/// of that spread.
pub(crate) fn pca_init(x: &EmbeddingMatrix, out_dim: usize, rng: &mut Rng) -> Vec<f64> {
    let n = x.len();
    let d = x.dim();
    let mut mean = vec![0.0; d];
    for r in x.rows() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - mean[j]);

    let mut scores = DMatrix::<f64>::zeros(n, out_dim);
    if n <= d {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = descending(eig.eigenvalues.as_slice());
        for (c, &k) in order.iter().take(out_dim).enumerate() {
            let lambda = eig.eigenvalues[k].max(0.0).sqrt();
            for i in 0..n {
                scores[(i, c)] = eig.eigenvectors[(i, k)] * lambda;
            }
        }
    } else {
        let cov = centered.transpose() * &centered;
        let eig = SymmetricEigen::new(cov);
        let order = descending(eig.eigenvalues.as_slice());
        for (c, &k) in order.iter().take(out_dim).enumerate() {
            let axis = eig.eigenvectors.column(k);
            for i in 0..n {
                scores[(i, c)] = centered.row(i).dot(&axis.transpose());
            }
        }
    }

    for c in 0..out_dim {
        let col = scores.column(c);
        let pivot = col
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            scores.column_mut(c).neg_mut();
        }
    }
    let sd0 = {
        let col = scores.column(0);
        let m = col.mean();
        (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    let scale = if sd0 > 1e-300 { INIT_SPREAD / sd0 } else { 0.0 };
    let mut out = Vec::with_capacity(n * out_dim);
    for i in 0..n {
        for c in 0..out_dim {
            let jitter: f64 = StandardNormal.sample(rng);
            out.push(scores[(i, c)] * scale + 0.01 * INIT_SPREAD * jitter);
        }
    }
    out
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// `lr · (1 − epoch / epochs)`.
pub(crate) fn annealed_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    base * (1.0 - epoch as f64 / epochs as f64)
}

/// Rescale `g` in place so its Euclidean norm is at most [`GRAD_CLIP`].
pub(crate) fn clip(g: &mut [f64]) {
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > GRAD_CLIP {
        let s = GRAD_CLIP / n;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

/// One descent step on point `i`: `y_i -= lr · clip(g)`.
pub(crate) fn step_point(coords: &mut [f64], dim: usize, i: usize, g: &mut [f64], lr: f64) {
    clip(g);
    for (y, gv) in coords[i * dim..(i + 1) * dim].iter_mut().zip(g.iter()) {
        *y -= lr * *gv;
    }
}

/// Full-batch step: clip every point's accumulated gradient and move it.
pub(crate) fn step_all(coords: &mut [f64], dim: usize, grads: &mut [f64], lr: f64) {
    let n = coords.len() / dim;
    for i in 0..n {
        let g = &mut grads[i * dim..(i + 1) * dim];
        clip(g);
        for (y, gv) in coords[i * dim..(i + 1) * dim].iter_mut().zip(g.iter()) {
            *y -= lr * *gv;
        }
    }
}

pub(crate) fn sq_dist(coords: &[f64], dim: usize, i: usize, j: usize) -> f64 {
    let a = &coords[i * dim..(i + 1) * dim];
    let b = &coords[j * dim..(j + 1) * dim];
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Epochs at which the objective is recorded: 1, every tenth of the run, and the last.
pub(crate) fn is_checkpoint(epoch: usize, epochs: usize) -> bool {
    epoch == 1 || epoch == epochs || epoch.is_multiple_of((epochs / 10).max(1))
}
