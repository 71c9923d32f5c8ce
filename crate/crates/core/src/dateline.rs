//! Year-of-writing regression: a dense GELU network over chunk embeddings,
//! trained on an L_p loss, with documents dated by the mean chunk prediction.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attribution::DocChunkMap;
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::seed::rng;

const DIVERGENCE_LIMIT: f64 = 1e6;

/// `x·Φ(x)` with the exact error-function CDF.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Mean `|e|^p` with `e = prediction − target`, and its gradient
/// `p·|e|^(p−1)·sign(e) / n`, taken as 0 where `e = 0`.
pub fn lp_loss(predictions: &[f64], targets: &[f64], p: f64) -> Result<(f64, Vec<f64>)> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: predictions.len(),
            got: targets.len(),
        });
    }
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidConfig(format!("L_p exponent must be >= 1, got {p}")));
    }
    if predictions.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = predictions.len() as f64;
    let mut loss = 0.0;
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(y, t)| {
            let e = y - t;
            let a = e.abs();
            loss += a.powf(p);
            if e == 0.0 {
                0.0
            } else {
                p * a.powf(p - 1.0) * e.signum() / n
            }
        })
        .collect();
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatelineConfig {
    pub hidden_dims: Vec<usize>,
    pub p: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Normalisation range; taken from the training labels when absent.
    pub year_range: Option<(i32, i32)>,
}

impl Default for DatelineConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![256, 64],
            p: 3.0,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            year_range: None,
        }
    }
}

impl DatelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("hidden_dims must be a nonempty list of positive sizes".into()));
        }
        if !(1.0..=5.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!("p must lie in [1, 5], got {}", self.p)));
        }
        if self.batch_size == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("batch_size and learning_rate must be positive".into()));
        }
        if let Some((lo, hi)) = self.year_range {
            if lo >= hi {
                return Err(Error::InvalidConfig(format!("empty year range {lo}..{hi}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatelineModel {
    /// Hidden layers (GELU after each) followed by the scalar output layer.
    pub layers: Vec<Dense>,
    pub config: DatelineConfig,
    pub year_min: f64,
    pub year_max: f64,
    pub loss_history: Vec<f64>,
}

struct Trace {
    /// Inputs to every layer; `activations[0]` is the embedding.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl DatelineModel {
    pub fn new(input_dim: usize, config: DatelineConfig, year_min: f64, year_max: f64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(config.seed);
        let mut sizes = vec![input_dim];
        sizes.extend(&config.hidden_dims);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let sd = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    inputs: w[0],
                    outputs: w[1],
                    weights: (0..w[0] * w[1])
                        .map(|_| { let z: f64 = StandardNormal.sample(&mut r); sd * z })
                        .collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(Self {
            layers,
            config,
            year_min,
            year_max,
            loss_history: Vec::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut activations = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(activations.last().expect("nonempty"));
            if l < last {
                activations.push(z.iter().map(|v| gelu(*v)).collect());
            }
            pre.push(z);
        }
        Trace { activations, pre }
    }

    /// Network output on the normalised year scale.
    pub fn forward(&self, x: &[f64]) -> f64 {
        self.trace(x).pre.last().expect("output layer")[0]
    }

    pub fn normalize_year(&self, year: f64) -> f64 {
        (year - self.year_min) / (self.year_max - self.year_min)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.year_min + v * (self.year_max - self.year_min)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(&l.weights);
            out.extend(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
    }

    /// L_p loss over `rows` of `x` against normalised `targets` (one per row of
    /// `x`), with the gradient in [`DatelineModel::params`] order.
    pub fn loss_and_gradient(&self, x: &EmbeddingMatrix, targets: &[f64], rows: &[usize]) -> Result<(f64, Vec<f64>)> {
        let traces: Vec<Trace> = rows.iter().map(|&r| self.trace(x.row(r))).collect();
        let preds: Vec<f64> = traces.iter().map(|t| t.pre.last().expect("output")[0]).collect();
        let tg: Vec<f64> = rows.iter().map(|&r| targets[r]).collect();
        let (loss, dpred) = lp_loss(&preds, &tg, self.config.p)?;

        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
            .collect();
        let last = self.layers.len() - 1;
        for (trace, dp) in traces.iter().zip(dpred) {
            let mut delta = vec![dp];
            for l in (0..=last).rev() {
                let layer = &self.layers[l];
                if l < last {
                    delta
                        .iter_mut()
                        .zip(&trace.pre[l])
                        .for_each(|(d, z)| *d *= gelu_derivative(*z));
                }
                let input = &trace.activations[l];
                let (gw, gb) = &mut grads[l];
                for (o, d) in delta.iter().enumerate() {
                    gb[o] += d;
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter_mut().zip(input).for_each(|(g, v)| *g += d * v);
                }
                if l > 0 {
                    let mut back = vec![0.0; layer.inputs];
                    for (o, d) in delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        back.iter_mut().zip(row).for_each(|(b, w)| *b += d * w);
                    }
                    delta = back;
                }
            }
        }
        let flat = grads.into_iter().flat_map(|(w, b)| w.into_iter().chain(b)).collect();
        Ok((loss, flat))
    }

    /// Layers as `EMB1` files (`<stem>.layer<k>.emb`, one row per output unit)
    /// plus a JSON sidecar with biases, year range and config.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        for (k, layer) in self.layers.iter().enumerate() {
            let rows: Vec<Vec<f64>> = layer.weights.chunks(layer.inputs).map(<[f64]>::to_vec).collect();
            let ids = (0..layer.outputs).map(|o| format!("layer{k}.unit{o}")).collect();
            EmbeddingMatrix::from_rows(ids, &rows, "dateline-weights")?
                .save_binary(&dir.join(format!("{stem}.layer{k}.emb")))?;
        }
        let side = DatelineSidecar {
            config: self.config.clone(),
            layer_shapes: self.layers.iter().map(|l| (l.inputs, l.outputs)).collect(),
            biases: self.layers.iter().map(|l| l.bias.clone()).collect(),
            year_min: self.year_min,
            year_max: self.year_max,
            loss_history: self.loss_history.clone(),
        };
        let path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: DatelineSidecar = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut layers = Vec::new();
        for (k, ((inputs, outputs), bias)) in side.layer_shapes.iter().zip(side.biases).enumerate() {
            let p = dir.join(format!("{stem}.layer{k}.emb"));
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let m = EmbeddingMatrix::from_binary(&bytes, "dateline-weights")?;
            if m.dim() != *inputs || m.len() != *outputs || bias.len() != *outputs {
                return Err(Error::Format(format!("layer {k} shape disagrees with sidecar")));
            }
            layers.push(Dense {
                inputs: *inputs,
                outputs: *outputs,
                weights: m.data().to_vec(),
                bias,
            });
        }
        Ok(Self {
            layers,
            config: side.config,
            year_min: side.year_min,
            year_max: side.year_max,
            loss_history: side.loss_history,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatelineSidecar {
    config: DatelineConfig,
    layer_shapes: Vec<(usize, usize)>,
    biases: Vec<Vec<f64>>,
    year_min: f64,
    year_max: f64,
    loss_history: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

pub fn train_dateline(chunks: &EmbeddingMatrix, years: &[i32], cfg: &DatelineConfig) -> Result<DatelineModel> {
    cfg.validate()?;
    if years.len() != chunks.len() {
        return Err(Error::DimensionMismatch {
            expected: chunks.len(),
            got: years.len(),
        });
    }
    let lo = years.iter().copied().min().ok_or_else(|| Error::InvalidInput("no training chunks".into()))?;
    let hi = years.iter().copied().max().expect("nonempty");
    if lo == hi {
        return Err(Error::InvalidInput("training years are constant".into()));
    }
    let (ymin, ymax) = cfg.year_range.unwrap_or((lo, hi));
    let mut model = DatelineModel::new(chunks.dim(), cfg.clone(), ymin as f64, ymax as f64)?;
    let targets: Vec<f64> = years.iter().map(|&y| model.normalize_year(y as f64)).collect();

    let all: Vec<usize> = (0..chunks.len()).collect();
    model.loss_history.push(model.loss_and_gradient(chunks, &targets, &all)?.0);
    let mut adam = Adam::new(model.param_count());
    let mut params = model.params();
    let mut r = rng(cfg.seed ^ 0x5eed);
    let mut order = all.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        for batch in order.chunks(cfg.batch_size) {
            let (_, grad) = model.loss_and_gradient(chunks, &targets, batch)?;
            adam.step(&mut params, &grad, cfg.learning_rate);
            model.set_params(&params);
        }
        let loss = model.loss_and_gradient(chunks, &targets, &all)?.0;
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::Diverged(format!(
                "L_{} loss {loss} after epoch {epoch} (lr={})",
                cfg.p, cfg.learning_rate
            )));
        }
        model.loss_history.push(loss);
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearPrediction {
    pub doc_year: f64,
    pub chunk_years: Vec<f64>,
    /// The document estimate lies outside the training year range.
    pub out_of_range: bool,
}

pub fn predict_year(model: &DatelineModel, chunks: &EmbeddingMatrix) -> Result<YearPrediction> {
    if chunks.is_empty() {
        return Err(Error::InvalidInput("cannot date a document with no chunks".into()));
    }
    if chunks.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: chunks.dim(),
        });
    }
    let chunk_years: Vec<f64> = chunks.rows().map(|x| model.denormalize(model.forward(x))).collect();
    let doc_year = chunk_years.iter().sum::<f64>() / chunk_years.len() as f64;
    Ok(YearPrediction {
        doc_year,
        out_of_range: doc_year < model.year_min || doc_year > model.year_max,
        chunk_years,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocResidual {
    pub doc_id: String,
    pub year: i32,
    pub predicted: f64,
    pub residual: f64,
    pub out_of_range: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatelineReport {
    pub chunk_rmse: f64,
    pub doc_rmse: f64,
    pub n_chunks: usize,
    pub n_docs: usize,
    pub p: f64,
    pub residuals: Vec<DocResidual>,
}

impl DatelineReport {
    pub fn residuals_csv(&self) -> String {
        let mut out = String::from("doc_id,year,predicted,residual,out_of_range\n");
        for r in &self.residuals {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.doc_id, r.year, r.predicted, r.residual, r.out_of_range
            ));
        }
        out
    }
}

fn rmse(residuals: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = residuals.fold((0.0, 0usize), |(s, n), r| (s + r * r, n + 1));
    (sum / n as f64).sqrt()
}

pub fn evaluate_dateline(model: &DatelineModel, chunks: &EmbeddingMatrix, years: &[i32]) -> Result<DatelineReport> {
    if chunks.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    if years.len() != chunks.len() {
        return Err(Error::DimensionMismatch {
            expected: chunks.len(),
            got: years.len(),
        });
    }
    let map = DocChunkMap::from_chunk_ids(chunks.ids())?;
    let mut chunk_res = Vec::with_capacity(chunks.len());
    let mut residuals = Vec::with_capacity(map.docs.len());
    for (doc, rows) in map.docs.iter().zip(&map.rows) {
        let year = years[rows[0]];
        if rows.iter().any(|&r| years[r] != year) {
            return Err(Error::InvalidInput(format!("document {doc} mixes year labels")));
        }
        let pred = predict_year(model, &chunks.select(rows))?;
        chunk_res.extend(pred.chunk_years.iter().map(|y| y - year as f64));
        residuals.push(DocResidual {
            doc_id: doc.clone(),
            year,
            predicted: pred.doc_year,
            residual: pred.doc_year - year as f64,
            out_of_range: pred.out_of_range,
        });
    }
    Ok(DatelineReport {
        chunk_rmse: rmse(chunk_res.into_iter()),
        doc_rmse: rmse(residuals.iter().map(|r| r.residual)),
        n_chunks: chunks.len(),
        n_docs: map.docs.len(),
        p: model.config.p,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub chunk_rmse: f64,
    pub doc_rmse: f64,
    pub final_train_loss: f64,
}

/// Train and evaluate once per exponent, everything else held fixed.
pub fn p_sweep(
    train: &EmbeddingMatrix,
    train_years: &[i32],
    test: &EmbeddingMatrix,
    test_years: &[i32],
    base: &DatelineConfig,
    ps: &[f64],
) -> Result<Vec<SweepRow>> {
    ps.iter()
        .map(|&p| {
            let cfg = DatelineConfig { p, ..base.clone() };
            let model = train_dateline(train, train_years, &cfg)?;
            let rep = evaluate_dateline(&model, test, test_years)?;
            Ok(SweepRow {
                p,
                chunk_rmse: rep.chunk_rmse,
                doc_rmse: rep.doc_rmse,
                final_train_loss: *model.loss_history.last().expect("history"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gaussian_vector;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        assert!((gelu(1.0) - 0.841345).abs() < 1e-5);
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn lp_examples() {
        let (l, g) = lp_loss(&[2.0], &[0.0], 3.0).unwrap();
        assert_eq!((l, g), (8.0, vec![12.0]));
        let (l, g) = lp_loss(&[1.0, -2.0], &[1.0, -2.0], 1.0).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
        assert!(lp_loss(&[1.0], &[1.0, 2.0], 2.0).is_err());
        assert!(lp_loss(&[1.0], &[1.0], 0.5).is_err());
    }

    #[test]
    fn outlier_growth_is_exact_power() {
        for (p, factor) in [(3.0, 1000.0), (1.0, 10.0)] {
            let small = lp_loss(&[1.0], &[0.0], p).unwrap().0;
            let big = lp_loss(&[10.0], &[0.0], p).unwrap().0;
            assert!((big / small - factor).abs() < 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        let ok = DatelineConfig::default();
        assert!(ok.validate().is_ok());
        assert!(DatelineConfig { p: 6.0, ..ok.clone() }.validate().is_err());
        assert!(DatelineConfig { hidden_dims: vec![], ..ok.clone() }.validate().is_err());
        assert!(DatelineConfig { year_range: Some((1900, 1900)), ..ok }.validate().is_err());
    }

    #[test]
    fn constant_years_rejected() {
        let x = EmbeddingMatrix::from_rows(vec!["a#0".into(), "b#0".into()], &[vec![1.0], vec![0.5]], "t").unwrap();
        assert!(train_dateline(&x, &[1900, 1900], &DatelineConfig::default()).is_err());
    }

    fn tiny_model(dim: usize) -> DatelineModel {
        let cfg = DatelineConfig {
            hidden_dims: vec![5, 3],
            seed: 4,
            ..Default::default()
        };
        DatelineModel::new(dim, cfg, 1900.0, 2000.0).unwrap()
    }

    #[test]
    fn prediction_is_chunk_mean_and_order_free() {
        let m = tiny_model(3);
        let mut r = rng(8);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| gaussian_vector(3, &mut r)).collect();
        let ids: Vec<String> = (0..4).map(|i| format!("d#{i}")).collect();
        let x = EmbeddingMatrix::from_rows(ids.clone(), &rows, "t").unwrap();
        let p = predict_year(&m, &x).unwrap();
        let mean = p.chunk_years.iter().sum::<f64>() / 4.0;
        assert!((p.doc_year - mean).abs() < 1e-12);

        let single = x.select(&[2]);
        let ps = predict_year(&m, &single).unwrap();
        assert_eq!(ps.doc_year, ps.chunk_years[0]);

        let shuffled = x.select(&[3, 1, 0, 2]);
        let q = predict_year(&m, &shuffled).unwrap();
        assert!((q.doc_year - p.doc_year).abs() < 1e-9);

        let empty = EmbeddingMatrix::new(vec![], 3, vec![], "t").unwrap();
        assert!(predict_year(&m, &empty).is_err());
    }

    #[test]
    fn save_load_round_trip_preserves_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_model(4);
        m.save(dir.path(), "dl").unwrap();
        let back = DatelineModel::load(dir.path(), "dl").unwrap();
        assert_eq!(back.layers.len(), m.layers.len());
        for (a, b) in back.layers.iter().zip(&m.layers) {
            assert_eq!((a.inputs, a.outputs), (b.inputs, b.outputs));
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() <= 1e-7 * y.abs().max(1.0));
            }
        }
    }
}
