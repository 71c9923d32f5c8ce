//! Authorship attribution with a softmax head over frozen chunk embeddings.
//! Documents are classified by summing their chunks' logits and taking the argmax.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::split_chunk_id;
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::seed::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.5,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionModel {
    pub dim: usize,
    /// Row-major `dim × n_classes`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub class_names: Vec<String>,
    pub config: AttributionConfig,
    /// Mean training cross-entropy before the first epoch and after each one.
    pub loss_history: Vec<f64>,
}

impl AttributionModel {
    pub fn zeros(dim: usize, class_names: Vec<String>, config: AttributionConfig) -> Self {
        let c = class_names.len();
        Self {
            dim,
            weights: vec![0.0; dim * c],
            bias: vec![0.0; c],
            class_names,
            config,
            loss_history: Vec::new(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        affine(&self.weights, &self.bias, self.n_classes(), x)
    }

    fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Weights as an `EMB1` file (one row per class, holding that class's weight
    /// column) plus a JSON sidecar with bias, class names and training config.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let c = self.n_classes();
        let rows: Vec<Vec<f64>> = (0..c)
            .map(|k| (0..self.dim).map(|d| self.weights[d * c + k]).collect())
            .collect();
        EmbeddingMatrix::from_rows(self.class_names.clone(), &rows, "attribution-weights")?
            .save_binary(&dir.join(format!("{stem}.emb")))?;
        let sidecar = ModelSidecar {
            dim: self.dim,
            class_names: self.class_names.clone(),
            bias: self.bias.clone(),
            config: self.config,
            loss_history: self.loss_history.clone(),
        };
        let path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: ModelSidecar = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let emb_path = dir.join(format!("{stem}.emb"));
        let bytes = fs::read(&emb_path).map_err(|e| Error::io(&emb_path, e))?;
        let m = EmbeddingMatrix::from_binary(&bytes, "attribution-weights")?;
        if m.dim() != side.dim || m.ids() != side.class_names.as_slice() {
            return Err(Error::Format("weight file disagrees with its sidecar".into()));
        }
        let c = side.class_names.len();
        let mut weights = vec![0.0; side.dim * c];
        for k in 0..c {
            for d in 0..side.dim {
                weights[d * c + k] = m.row(k)[d];
            }
        }
        Ok(Self {
            dim: side.dim,
            weights,
            bias: side.bias,
            class_names: side.class_names,
            config: side.config,
            loss_history: side.loss_history,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    dim: usize,
    class_names: Vec<String>,
    bias: Vec<f64>,
    config: AttributionConfig,
    loss_history: Vec<f64>,
}

fn affine(weights: &[f64], bias: &[f64], classes: usize, x: &[f64]) -> Vec<f64> {
    let mut out = bias.to_vec();
    for (d, xv) in x.iter().enumerate() {
        if *xv == 0.0 {
            continue;
        }
        let row = &weights[d * classes..(d + 1) * classes];
        out.iter_mut().zip(row).for_each(|(o, w)| *o += xv * w);
    }
    out
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Mean cross-entropy of `softmax(Wᵀx + b)` over `rows` and its gradient with
/// respect to the weights (`dim × classes`) and bias.
pub fn cross_entropy_grad(
    weights: &[f64],
    bias: &[f64],
    dim: usize,
    x: &EmbeddingMatrix,
    labels: &[usize],
    rows: &[usize],
) -> (f64, Vec<f64>, Vec<f64>) {
    let classes = bias.len();
    let mut gw = vec![0.0; dim * classes];
    let mut gb = vec![0.0; classes];
    let mut loss = 0.0;
    let scale = 1.0 / rows.len() as f64;
    for &r in rows {
        let xv = x.row(r);
        let lp = log_softmax(&affine(weights, bias, classes, xv));
        loss -= lp[labels[r]];
        let mut delta: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        delta[labels[r]] -= 1.0;
        for (c, dv) in delta.iter().enumerate() {
            gb[c] += dv * scale;
        }
        for (d, xd) in xv.iter().enumerate() {
            if *xd == 0.0 {
                continue;
            }
            let row = &mut gw[d * classes..(d + 1) * classes];
            row.iter_mut().zip(&delta).for_each(|(g, dv)| *g += xd * dv * scale);
        }
    }
    (loss * scale, gw, gb)
}

/// Classes in first-seen order and each row's class index.
pub fn index_labels(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut names: Vec<String> = Vec::new();
    let mut lookup: HashMap<&str, usize> = HashMap::new();
    let mut idx = Vec::with_capacity(labels.len());
    for l in labels {
        let k = *lookup.entry(l.as_str()).or_insert_with(|| {
            names.push(l.clone());
            names.len() - 1
        });
        idx.push(k);
    }
    (names, idx)
}

pub fn train_attribution(chunks: &EmbeddingMatrix, labels: &[String], cfg: &AttributionConfig) -> Result<AttributionModel> {
    if labels.len() != chunks.len() {
        return Err(Error::DimensionMismatch {
            expected: chunks.len(),
            got: labels.len(),
        });
    }
    if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::InvalidConfig("batch_size and learning_rate must be positive".into()));
    }
    let (names, idx) = index_labels(labels);
    if names.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "attribution needs at least two classes, got {}",
            names.len()
        )));
    }
    let mut model = AttributionModel::zeros(chunks.dim(), names, *cfg);
    let all: Vec<usize> = (0..chunks.len()).collect();
    let full_loss = |m: &AttributionModel| cross_entropy_grad(&m.weights, &m.bias, m.dim, chunks, &idx, &all).0;
    model.loss_history.push(full_loss(&model));

    let mut r = rng(cfg.seed);
    let mut order = all.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, gw, gb) = cross_entropy_grad(&model.weights, &model.bias, model.dim, chunks, &idx, batch);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite batch loss in epoch {epoch}")));
            }
            model.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= cfg.learning_rate * g);
            model.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= cfg.learning_rate * g);
        }
        let loss = full_loss(&model);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "training loss became {loss} after epoch {epoch}; lr={}",
                cfg.learning_rate
            )));
        }
        model.loss_history.push(loss);
    }
    Ok(model)
}

/// Raw affine scores, one row per chunk.
pub fn predict_chunk_logits(model: &AttributionModel, chunks: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>> {
    if chunks.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            got: chunks.dim(),
        });
    }
    Ok(chunks.rows().map(|x| model.logits(x)).collect())
}

/// Which chunk rows belong to which document, in first-seen document order.
#[derive(Debug, Clone, PartialEq)]
pub struct DocChunkMap {
    pub docs: Vec<String>,
    pub rows: Vec<Vec<usize>>,
}

impl DocChunkMap {
    /// Group `<doc_id>#<index>` chunk ids by document. An id without a chunk
    /// suffix cannot be mapped and is an error.
    pub fn from_chunk_ids(ids: &[String]) -> Result<Self> {
        let mut docs = Vec::new();
        let mut rows: Vec<Vec<usize>> = Vec::new();
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        for (r, id) in ids.iter().enumerate() {
            let (doc, _) = split_chunk_id(id)
                .ok_or_else(|| Error::InvalidInput(format!("chunk id {id:?} names no document")))?;
            let k = *lookup.entry(doc).or_insert_with(|| {
                docs.push(doc.to_string());
                rows.push(Vec::new());
                docs.len() - 1
            });
            rows[k].push(r);
        }
        Ok(Self { docs, rows })
    }

    fn check(&self, n_rows: usize) -> Result<()> {
        let mut seen = vec![false; n_rows];
        for (doc, rows) in self.docs.iter().zip(&self.rows) {
            if rows.is_empty() {
                return Err(Error::InvalidInput(format!("document {doc} has no chunks")));
            }
            for &r in rows {
                if r >= n_rows {
                    return Err(Error::InvalidInput(format!("document {doc} refers to missing row {r}")));
                }
                seen[r] = true;
            }
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!("chunk row {r} belongs to no document")));
        }
        Ok(())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn aggregate_with(logits: &[Vec<f64>], map: &DocChunkMap, mean: bool) -> Result<Vec<usize>> {
    map.check(logits.len())?;
    let classes = logits.first().map_or(0, Vec::len);
    Ok(map
        .rows
        .iter()
        .map(|rows| {
            let mut sum = vec![0.0; classes];
            for &r in rows {
                sum.iter_mut().zip(&logits[r]).for_each(|(s, z)| *s += z);
            }
            if mean {
                let k = rows.len() as f64;
                sum.iter_mut().for_each(|s| *s /= k);
            }
            argmax(&sum)
        })
        .collect())
}

/// Per document: sum the chunk logits, then argmax (ties to the lowest class).
pub fn aggregate_document(logits: &[Vec<f64>], map: &DocChunkMap) -> Result<Vec<usize>> {
    aggregate_with(logits, map, false)
}

/// Mean-of-logits variant; always agrees with [`aggregate_document`].
pub fn aggregate_document_mean(logits: &[Vec<f64>], map: &DocChunkMap) -> Result<Vec<usize>> {
    aggregate_with(logits, map, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentPrediction {
    pub doc_id: String,
    pub truth: String,
    pub predicted: String,
    pub n_chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_chunk_accuracy: f64,
    pub per_document_accuracy: f64,
    /// `confusion[truth][predicted]` over the model's classes, counting documents.
    pub confusion: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
    pub n_docs: usize,
    pub n_chunks: usize,
    /// Test labels the model never saw; their documents count as errors.
    pub unknown_labels: Vec<String>,
    pub unknown_docs: usize,
    pub documents: Vec<DocumentPrediction>,
}

impl EvalReport {
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("truth");
        for c in &self.class_names {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            out.push_str(name);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// `labels` gives each chunk's true author; all chunks of a document must agree.
pub fn evaluate_attribution(model: &AttributionModel, chunks: &EmbeddingMatrix, labels: &[String]) -> Result<EvalReport> {
    if labels.len() != chunks.len() {
        return Err(Error::DimensionMismatch {
            expected: chunks.len(),
            got: labels.len(),
        });
    }
    if chunks.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let logits = predict_chunk_logits(model, chunks)?;
    let map = DocChunkMap::from_chunk_ids(chunks.ids())?;
    let doc_pred = aggregate_document(&logits, &map)?;

    let truth: Vec<Option<usize>> = labels.iter().map(|l| model.class_index(l)).collect();
    let chunk_correct = logits
        .iter()
        .zip(&truth)
        .filter(|(z, t)| Some(argmax(z)) == **t)
        .count();

    let c = model.n_classes();
    let mut confusion = vec![vec![0usize; c]; c];
    let mut unknown_labels: Vec<String> = Vec::new();
    let mut unknown_docs = 0;
    let mut doc_correct = 0;
    let mut documents = Vec::with_capacity(map.docs.len());
    for ((doc, rows), &pred) in map.docs.iter().zip(&map.rows).zip(&doc_pred) {
        let label = &labels[rows[0]];
        if let Some(r) = rows.iter().find(|&&r| &labels[r] != label) {
            return Err(Error::InvalidInput(format!(
                "document {doc} mixes labels {label:?} and {:?}",
                labels[*r]
            )));
        }
        match truth[rows[0]] {
            Some(t) => {
                confusion[t][pred] += 1;
                if t == pred {
                    doc_correct += 1;
                }
            }
            None => {
                unknown_docs += 1;
                if !unknown_labels.contains(label) {
                    unknown_labels.push(label.clone());
                }
            }
        }
        documents.push(DocumentPrediction {
            doc_id: doc.clone(),
            truth: label.clone(),
            predicted: model.class_names[pred].clone(),
            n_chunks: rows.len(),
        });
    }
    Ok(EvalReport {
        per_chunk_accuracy: chunk_correct as f64 / chunks.len() as f64,
        per_document_accuracy: doc_correct as f64 / map.docs.len() as f64,
        confusion,
        class_names: model.class_names.clone(),
        n_docs: map.docs.len(),
        n_chunks: chunks.len(),
        unknown_labels,
        unknown_docs,
        documents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use crate::synth::gaussian_vector;

    fn rows_matrix(ids: &[&str], rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(ids.iter().map(|s| s.to_string()).collect(), rows, "t").unwrap()
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = AttributionModel::zeros(3, vec!["a".into(), "b".into()], AttributionConfig::default());
        let x = rows_matrix(&["d#0", "d#1"], &[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]]);
        let z = predict_chunk_logits(&m, &x).unwrap();
        assert_eq!(z, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn identity_weights() {
        let mut m = AttributionModel::zeros(2, vec!["a".into(), "b".into()], AttributionConfig::default());
        m.weights = vec![1.0, 0.0, 0.0, 1.0];
        let x = rows_matrix(&["d#0"], &[vec![1.0, 0.0]]);
        assert_eq!(predict_chunk_logits(&m, &x).unwrap(), vec![vec![1.0, 0.0]]);
        let wrong = rows_matrix(&["d#0"], &[vec![1.0, 0.0, 0.0]]);
        assert!(predict_chunk_logits(&m, &wrong).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let map = DocChunkMap {
            docs: vec!["d".into()],
            rows: vec![vec![0, 1]],
        };
        assert_eq!(aggregate_document(&[vec![1.0, 2.0], vec![3.0, 1.0]], &map).unwrap(), vec![0]);

        let single = DocChunkMap {
            docs: vec!["d".into()],
            rows: vec![vec![0]],
        };
        assert_eq!(aggregate_document(&[vec![0.2, 0.9, 0.1]], &single).unwrap(), vec![1]);

        // two of three chunks vote class 0, but the summed logits favour class 1
        let logits = vec![vec![0.6, 0.5], vec![0.6, 0.5], vec![0.0, 1.9]];
        let votes = logits.iter().filter(|z| argmax(z) == 0).count();
        assert_eq!(votes, 2);
        let map3 = DocChunkMap {
            docs: vec!["d".into()],
            rows: vec![vec![0, 1, 2]],
        };
        assert_eq!(aggregate_document(&logits, &map3).unwrap(), vec![1]);
    }

    #[test]
    fn unmapped_chunks_are_errors() {
        let map = DocChunkMap {
            docs: vec!["d".into()],
            rows: vec![vec![0]],
        };
        assert!(aggregate_document(&[vec![1.0], vec![2.0]], &map).is_err());
        assert!(DocChunkMap::from_chunk_ids(&["nodoc".to_string()]).is_err());
    }

    #[test]
    fn ties_go_to_lowest_class() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = rows_matrix(&["d#0", "d#1"], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let labels = vec!["a".to_string(), "a".to_string()];
        assert!(train_attribution(&x, &labels, &AttributionConfig::default()).is_err());
    }

    #[test]
    fn initial_loss_is_log_classes() {
        let mut r = rng(2);
        let ids: Vec<String> = (0..42).map(|i| format!("d{i}#0")).collect();
        let rows: Vec<Vec<f64>> = (0..42).map(|_| gaussian_vector(16, &mut r)).collect();
        let x = EmbeddingMatrix::from_rows(ids, &rows, "t").unwrap();
        let labels: Vec<String> = (0..42).map(|i| format!("a{i}")).collect();
        let cfg = AttributionConfig {
            epochs: 1,
            learning_rate: 0.1,
            ..Default::default()
        };
        let m = train_attribution(&x, &labels, &cfg).unwrap();
        assert!((m.loss_history[0] - 42f64.ln()).abs() < 1e-12);
        assert!((42f64.ln() - 3.738).abs() < 1e-3);
        assert!(m.loss_history[1] < m.loss_history[0]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut r = rng(17);
        let dim = 5;
        let classes = 3;
        let rows: Vec<Vec<f64>> = (0..6).map(|_| gaussian_vector(dim, &mut r)).collect();
        let x = EmbeddingMatrix::from_rows((0..6).map(|i| format!("d#{i}")).collect(), &rows, "t").unwrap();
        let labels = vec![0, 1, 2, 1, 0, 2];
        let all: Vec<usize> = (0..6).collect();
        let w = gaussian_vector(dim * classes, &mut r);
        let b = gaussian_vector(classes, &mut r);
        let (_, gw, gb) = cross_entropy_grad(&w, &b, dim, &x, &labels, &all);
        let h = 1e-5;
        let loss = |w: &[f64], b: &[f64]| cross_entropy_grad(w, b, dim, &x, &labels, &all).0;
        let rel = |fd: f64, g: f64| (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
        for p in 0..w.len() {
            let (mut up, mut dn) = (w.clone(), w.clone());
            up[p] += h;
            dn[p] -= h;
            let fd = (loss(&up, &b) - loss(&dn, &b)) / (2.0 * h);
            assert!(rel(fd, gw[p]) < 1e-4, "w[{p}]: {fd} vs {}", gw[p]);
        }
        for p in 0..b.len() {
            let (mut up, mut dn) = (b.clone(), b.clone());
            up[p] += h;
            dn[p] -= h;
            let fd = (loss(&w, &up) - loss(&w, &dn)) / (2.0 * h);
            assert!(rel(fd, gb[p]) < 1e-4, "b[{p}]: {fd} vs {}", gb[p]);
        }
    }

    #[test]
    fn unknown_test_class_is_reported() {
        let x = rows_matrix(&["a#0", "b#0", "c#0"], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        let m = AttributionModel::zeros(2, vec!["A".into(), "B".into()], AttributionConfig::default());
        let labels = vec!["A".to_string(), "B".to_string(), "Z".to_string()];
        let rep = evaluate_attribution(&m, &x, &labels).unwrap();
        assert_eq!(rep.unknown_docs, 1);
        assert_eq!(rep.unknown_labels, vec!["Z".to_string()]);
        // zero model predicts class 0 everywhere
        assert!((rep.per_document_accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rep.confusion, vec![vec![1, 0], vec![1, 0]]);
    }

    #[test]
    fn model_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = AttributionModel::zeros(3, vec!["a".into(), "b".into()], AttributionConfig::default());
        m.weights = vec![0.5, -1.0, 0.25, 2.0, -0.125, 1.5];
        m.bias = vec![0.1, -0.2];
        m.save(dir.path(), "model").unwrap();
        let back = AttributionModel::load(dir.path(), "model").unwrap();
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.bias, m.bias);
        assert_eq!(back.class_names, m.class_names);
    }
}
