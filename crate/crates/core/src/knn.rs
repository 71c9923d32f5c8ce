//! Exact flat nearest-neighbour search under cosine distance.

use crate::embed::{dot, norm, EmbeddingMatrix};
use crate::error::{Error, Result};

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((1.0 - dot(a, b) / (na * nb)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub id: String,
    pub distance: f64,
}

/// Stores unit-normalized rows; every query is a full scan.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    vectors: EmbeddingMatrix,
}

impl FlatIndex {
    pub fn build(vectors: &EmbeddingMatrix) -> Result<Self> {
        if let Some(row) = vectors.rows().position(|r| norm(r) == 0.0) {
            return Err(Error::InvalidInput(format!(
                "row {row} ({}) is a zero vector",
                vectors.ids()[row]
            )));
        }
        let vectors = if vectors.is_normalized() {
            vectors.clone()
        } else {
            vectors.clone().normalized()
        };
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &EmbeddingMatrix {
        &self.vectors
    }

    /// The `k` closest stored rows, ascending by distance, ties by id.
    pub fn query(&self, q: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        self.query_filtered(q, k, |_| true)
    }

    /// Like [`FlatIndex::query`] but the stored row `skip` is never returned.
    pub fn query_excluding(&self, q: &[f64], k: usize, skip: usize) -> Result<Vec<Neighbor>> {
        if self.len() < 2 {
            return Err(Error::InvalidInput("need at least two rows".into()));
        }
        if k > self.len() - 1 {
            return Err(Error::InvalidInput(format!("k={k} exceeds {} candidates", self.len() - 1)));
        }
        self.query_filtered(q, k, |row| row != skip)
    }

    fn query_filtered(&self, q: &[f64], k: usize, keep: impl Fn(usize) -> bool) -> Result<Vec<Neighbor>> {
        if self.is_empty() {
            return Err(Error::InvalidInput("empty index".into()));
        }
        if k == 0 || k > self.len() {
            return Err(Error::InvalidInput(format!(
                "k={k} must lie in [1, {}]",
                self.len()
            )));
        }
        if q.len() != self.vectors.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.vectors.dim(),
                got: q.len(),
            });
        }
        let qn = norm(q);
        if qn == 0.0 {
            return Err(Error::ZeroVector);
        }
        let ids = self.vectors.ids();
        let mut scored: Vec<(f64, usize)> = self
            .vectors
            .rows()
            .enumerate()
            .filter(|(row, _)| keep(*row))
            .map(|(row, v)| ((1.0 - dot(q, v) / qn).clamp(0.0, 2.0), row))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0).then_with(|| ids[a.1].cmp(&ids[b.1]))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(distance, row)| Neighbor {
                row,
                id: ids[row].clone(),
                distance,
            })
            .collect())
    }

    /// Neighbour lists for every stored row (self excluded), as (row, distance).
    pub fn knn_graph(&self, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
        (0..self.len())
            .map(|i| {
                Ok(self
                    .query_excluding(self.vectors.row(i), k, i)?
                    .into_iter()
                    .map(|n| (n.row, n.distance))
                    .collect())
            })
            .collect()
    }

    /// Full pairwise cosine distance matrix, row-major.
    pub fn distance_matrix(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (1.0 - dot(self.vectors.row(i), self.vectors.row(j))).clamp(0.0, 2.0);
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(ids: &[&str], rows: &[Vec<f64>]) -> FlatIndex {
        let m = EmbeddingMatrix::from_rows(ids.iter().map(|s| s.to_string()).collect(), rows, "t").unwrap();
        FlatIndex::build(&m).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn self_match() {
        let idx = index(&["e1", "e2"], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = idx.query(&[1.0, 0.0], 1).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].id, "e1");
        assert!(r[0].distance.abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lower_id() {
        let idx = index(&["b", "a", "c"], &[vec![0.0, 1.0], vec![0.0, -1.0], vec![1.0, 0.0]]);
        let r = idx.query(&[1.0, 0.0], 3).unwrap();
        assert_eq!(r[0].id, "c");
        assert_eq!(r[1].id, "a");
        assert_eq!(r[2].id, "b");
    }

    #[test]
    fn k_bounds_and_empty_errors() {
        let idx = index(&["a"], &[vec![1.0, 0.0]]);
        assert!(idx.query(&[1.0, 0.0], 2).is_err());
        assert!(idx.query(&[0.0, 0.0], 1).is_err());
        assert!(idx.query(&[1.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn rejects_zero_rows() {
        let m = EmbeddingMatrix::from_rows(vec!["z".into()], &[vec![0.0, 0.0]], "t").unwrap();
        assert!(FlatIndex::build(&m).is_err());
    }

    #[test]
    fn graph_excludes_self() {
        let idx = index(&["a", "b", "c"], &[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]);
        let g = idx.knn_graph(2).unwrap();
        for (i, nbrs) in g.iter().enumerate() {
            assert!(nbrs.iter().all(|(j, _)| *j != i));
        }
        assert_eq!(g[0][0].0, 1);
    }
}
