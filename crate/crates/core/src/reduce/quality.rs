use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::knn::FlatIndex;

use super::{sq_dist, Projection};

/// Trustworthiness of a projection at neighbourhood size `k`: penalises points
/// that are embedded among a point's `k` nearest neighbours but are far from it
/// in the original (cosine) space. 1 means no intruders.
pub fn trustworthiness(original: &EmbeddingMatrix, projection: &Projection, k: usize) -> Result<f64> {
    let n = original.len();
    if projection.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: projection.len(),
        });
    }
    if k == 0 || 2 * n < 3 * k + 2 {
        return Err(Error::InvalidInput(format!("k={k} too large for {n} points")));
    }
    let dist = FlatIndex::build(original)?.distance_matrix();
    let dim = projection.out_dim;
    let mut rank = vec![0usize; n];
    let mut penalty = 0.0;
    for i in 0..n {
        let mut by_original: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        by_original.sort_by(|&a, &b| dist[i * n + a].total_cmp(&dist[i * n + b]).then(a.cmp(&b)));
        for (r, &j) in by_original.iter().enumerate() {
            rank[j] = r + 1;
        }
        let mut by_embedded: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        by_embedded.sort_by(|&a, &b| {
            sq_dist(&projection.coords, dim, i, a)
                .total_cmp(&sq_dist(&projection.coords, dim, i, b))
                .then(a.cmp(&b))
        });
        for &j in by_embedded.iter().take(k) {
            if rank[j] > k {
                penalty += (rank[j] - k) as f64;
            }
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    Ok(1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduce::{Method, ReducerConfig};

    fn projection(coords: Vec<f64>, dim: usize) -> Projection {
        let n = coords.len() / dim;
        Projection {
            ids: (0..n).map(|i| format!("p{i}")).collect(),
            coords,
            out_dim: dim,
            method: Method::UmapLike,
            config: ReducerConfig::default(),
            seed: 0,
            objective: Vec::new(),
        }
    }

    #[test]
    fn order_preserving_layout_is_fully_trustworthy() {
        // unevenly spaced arc, laid out on a line at the same angles
        let angles: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 + 0.007 * (i * i) as f64).collect();
        let rows: Vec<Vec<f64>> = angles.iter().map(|t| vec![t.cos(), t.sin()]).collect();
        let x = EmbeddingMatrix::from_rows((0..12).map(|i| format!("p{i}")).collect(), &rows, "t").unwrap();
        let p = projection(angles.iter().flat_map(|&t| [t, 0.0]).collect(), 2);
        assert!((trustworthiness(&x, &p, 3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_swap() {
        // Original angles 0, .1, .25, .45, .7, 1.0; the layout puts p0..p5 at
        // x = 5, 1, 2, 3, 4, 0. Embedded ties resolve to the lower index.
        // k=1 intruders and their original ranks:
        // p0 -> p4 (rank 4, +3), p1 -> p2 (rank 2, +1), p2 -> p1 (rank 1),
        // p3 -> p2 (rank 1), p4 -> p0 (rank 5, +4), p5 -> p1 (rank 4, +3).
        let angles = [0.0f64, 0.1, 0.25, 0.45, 0.7, 1.0];
        let rows: Vec<Vec<f64>> = angles.iter().map(|t| vec![t.cos(), t.sin()]).collect();
        let x = EmbeddingMatrix::from_rows((0..6).map(|i| format!("p{i}")).collect(), &rows, "t").unwrap();
        let layout = [5.0, 1.0, 2.0, 3.0, 4.0, 0.0];
        let p = projection(layout.iter().flat_map(|&v| [v, 0.0]).collect(), 2);
        let t = trustworthiness(&x, &p, 1).unwrap();
        let expected = 1.0 - 2.0 / (6.0 * 1.0 * (12.0 - 3.0 - 1.0)) * 11.0;
        assert!((t - expected).abs() < 1e-12, "{t} vs {expected}");
    }
}
