//! Clustering of document embeddings and detection of the year at which the
//! corpus separates into "before" and "after" groups.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embed::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::knn::FlatIndex;
use crate::seed::rng;

pub const MAX_KMEANS_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub k: usize,
    /// Σ (1 − x·c) over points and their centroids.
    pub inertia: f64,
    pub seed: u64,
    pub iterations: usize,
    pub inertia_history: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
}

fn argmax_dot(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = dot(x, centroid);
        if d > best_dot {
            best_dot = d;
            best = c;
        }
    }
    best
}

fn normalized_mean(x: &EmbeddingMatrix, members: impl Iterator<Item = usize>, fallback: usize) -> Vec<f64> {
    let mut mean = vec![0.0; x.dim()];
    for i in members {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
    }
    let n = crate::embed::norm(&mean);
    if n > 1e-12 {
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    } else {
        x.row(fallback).to_vec()
    }
}

/// Seeded k-means++ on the unit sphere.
fn plus_plus_init(x: &EmbeddingMatrix, k: usize, r: &mut crate::seed::Rng) -> Vec<usize> {
    let n = x.len();
    let mut chosen = vec![r.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| 1.0 - dot(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let weights: Vec<f64> = nearest.iter().map(|d| d.max(0.0).powi(2)).collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // guard against accumulated rounding landing on a zero-weight point
            if weights[pick] == 0.0 {
                pick = weights.iter().rposition(|w| *w > 0.0).expect("total > 0");
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(1.0 - dot(x.row(i), x.row(next)));
        }
    }
    chosen
}

pub fn spherical_kmeans(x: &EmbeddingMatrix, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = x.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("k={k} must lie in [1, {n}]")));
    }
    let x = FlatIndex::build(x)?.vectors().clone();
    let mut r = rng(seed);
    let seeds = plus_plus_init(&x, k, &mut r);
    let mut centroids: Vec<Vec<f64>> = seeds.iter().map(|&i| x.row(i).to_vec()).collect();
    let mut labels: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..MAX_KMEANS_ITERATIONS {
        iterations += 1;
        let mut next: Vec<usize> = (0..n).map(|i| argmax_dot(x.row(i), &centroids)).collect();

        // Empty clusters take the point farthest from its own centroid, drawn from
        // clusters that can spare one. Ties go to the lowest index.
        for c in 0..k {
            if next.contains(&c) {
                continue;
            }
            let mut sizes = vec![0usize; k];
            next.iter().for_each(|&l| sizes[l] += 1);
            let donor = (0..n)
                .filter(|&i| sizes[next[i]] > 1)
                .map(|i| (1.0 - dot(x.row(i), &centroids[next[i]]), i))
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
                .map(|(_, i)| i)
                .expect("k <= n leaves a cluster with a spare point");
            next[donor] = c;
            centroids[c] = x.row(donor).to_vec();
        }

        let changed = next != labels;
        labels = next;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            *centroid = normalized_mean(&x, members.iter().copied(), members[0]);
        }
        history.push(inertia(&x, &labels, &centroids));
        if !changed {
            break;
        }
    }

    Ok(ClusterAssignment {
        ids: x.ids().to_vec(),
        inertia: *history.last().expect("at least one iteration"),
        labels,
        k,
        seed,
        iterations,
        inertia_history: history,
        centroids,
    })
}

fn inertia(x: &EmbeddingMatrix, labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| (1.0 - dot(x.row(i), &centroids[c])).max(0.0))
        .sum()
}

/// Mean silhouette over a precomputed row-major `n × n` distance matrix.
/// Points alone in their cluster score 0, as do points with `a = b = 0`.
pub fn silhouette_from_distances(dist: &[f64], labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if dist.len() != n * n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            got: dist.len(),
        });
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::InvalidInput("silhouette needs at least two clusters".into()));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[i * n + j];
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Silhouette under cosine distance.
pub fn silhouette(x: &EmbeddingMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: labels.len(),
        });
    }
    let index = FlatIndex::build(x)?;
    silhouette_from_distances(&index.distance_matrix(), labels)
}

/// Silhouette under Euclidean distance on row-major `coords` with `dim` columns.
pub fn silhouette_euclidean(coords: &[f64], dim: usize, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if coords.len() != n * dim {
        return Err(Error::DimensionMismatch {
            expected: n * dim,
            got: coords.len(),
        });
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (0..dim)
                .map(|c| (coords[i * dim + c] - coords[j * dim + c]).powi(2))
                .sum::<f64>()
                .sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    silhouette_from_distances(&dist, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangepointConfig {
    pub min_group: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ChangepointConfig {
    fn default() -> Self {
        Self {
            min_group: 10,
            permutations: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangepointReport {
    pub candidate_years: Vec<i32>,
    pub scores: Vec<f64>,
    /// `(y, y + 1)`: the break falls after year `y`.
    pub best_break: (i32, i32),
    pub best_score: f64,
    pub significant: bool,
    pub threshold: f64,
    pub null_mean: f64,
    pub null_sd: f64,
    pub permutations: usize,
    pub min_group: usize,
    pub seed: u64,
}

/// Separation statistics for every split of a year-sorted ordering, from 2-D
/// prefix sums of the distance matrix.
struct SplitScorer {
    n: usize,
    prefix: Vec<f64>,
}

impl SplitScorer {
    fn new(dist: &[f64], n: usize, order: &[usize]) -> Self {
        let w = n + 1;
        let mut prefix = vec![0.0; w * w];
        for a in 0..n {
            let mut row = 0.0;
            for b in 0..n {
                row += dist[order[a] * n + order[b]];
                prefix[(a + 1) * w + (b + 1)] = prefix[a * w + (b + 1)] + row;
            }
        }
        Self { n, prefix }
    }

    fn block(&self, rows: usize, cols: usize) -> f64 {
        self.prefix[rows * (self.n + 1) + cols]
    }

    /// Score with the first `s` documents of the ordering on the "before" side.
    fn score(&self, s: usize) -> f64 {
        let n = self.n;
        let total = self.block(n, n);
        let before2 = self.block(s, s);
        let cross = self.block(s, n) - before2;
        let after2 = total - 2.0 * cross - before2;
        let (sb, sa) = (s as f64, (n - s) as f64);
        let mean_pairs = |twice_sum: f64, m: f64| if m > 1.0 { twice_sum / (m * (m - 1.0)) } else { 0.0 };
        cross / (sb * sa) - 0.5 * (mean_pairs(before2, sb) + mean_pairs(after2, sa))
    }
}

fn sorted_order(years: &[i32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..years.len()).collect();
    order.sort_by_key(|&i| (years[i], i));
    order
}

/// Candidate split years (with at least `min_group` documents on each side)
/// and the matching split positions in year-sorted order.
fn candidates(sorted_years: &[i32], min_group: usize) -> Vec<(i32, usize)> {
    let n = sorted_years.len();
    let mut out = Vec::new();
    for s in 1..n {
        if sorted_years[s - 1] != sorted_years[s] && s >= min_group && n - s >= min_group {
            out.push((sorted_years[s - 1], s));
        }
    }
    out
}

pub fn detect_changepoint(x: &EmbeddingMatrix, years: &[i32], cfg: &ChangepointConfig) -> Result<ChangepointReport> {
    let n = x.len();
    if years.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: years.len(),
        });
    }
    if cfg.min_group == 0 {
        return Err(Error::InvalidConfig("min_group must be positive".into()));
    }
    if n < 2 * cfg.min_group {
        return Err(Error::InvalidInput(format!(
            "{n} documents are too few for min_group={}",
            cfg.min_group
        )));
    }
    if years.iter().all(|y| *y == years[0]) {
        return Err(Error::InvalidInput("all documents share one year".into()));
    }
    let dist = FlatIndex::build(x)?.distance_matrix();

    let order = sorted_order(years);
    let sorted_years: Vec<i32> = order.iter().map(|&i| years[i]).collect();
    let cands = candidates(&sorted_years, cfg.min_group);
    if cands.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no year split leaves {} documents on each side",
            cfg.min_group
        )));
    }
    let scorer = SplitScorer::new(&dist, n, &order);
    let scores: Vec<f64> = cands.iter().map(|&(_, s)| scorer.score(s)).collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }

    let mut r = rng(cfg.seed);
    let mut shuffled = years.to_vec();
    let mut null = Vec::with_capacity(cfg.permutations);
    for _ in 0..cfg.permutations {
        shuffled.shuffle(&mut r);
        let order = sorted_order(&shuffled);
        let scorer = SplitScorer::new(&dist, n, &order);
        let max = cands
            .iter()
            .map(|&(_, s)| scorer.score(s))
            .fold(f64::NEG_INFINITY, f64::max);
        null.push(max);
    }
    let (null_mean, null_sd) = mean_sd(&null);
    let threshold = null_mean + 3.0 * null_sd;
    let best_score = scores[best];
    let year = cands[best].0;

    Ok(ChangepointReport {
        candidate_years: cands.iter().map(|c| c.0).collect(),
        scores,
        best_break: (year, year + 1),
        best_score,
        significant: cfg.permutations > 0 && best_score > threshold,
        threshold,
        null_mean,
        null_sd,
        permutations: cfg.permutations,
        min_group: cfg.min_group,
        seed: cfg.seed,
    })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{basis, perturb_on_sphere, year_shift_series};

    fn matrix(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows((0..rows.len()).map(|i| format!("r{i:02}")).collect(), rows, "t").unwrap()
    }

    #[test]
    fn single_cluster_centroid_is_normalized_mean() {
        let m = matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = spherical_kmeans(&m, 1, 3).unwrap();
        assert_eq!(a.labels, vec![0, 0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((a.centroids[0][0] - h).abs() < 1e-12 && (a.centroids[0][1] - h).abs() < 1e-12);
        assert!((a.inertia - 2.0 * (1.0 - h)).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let m = matrix(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]]);
        let a = spherical_kmeans(&m, 4, 11).unwrap();
        assert!(a.inertia.abs() < 1e-12);
        let mut l = a.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let m = matrix(&[vec![1.0, 0.0]]);
        assert!(spherical_kmeans(&m, 0, 0).is_err());
        assert!(spherical_kmeans(&m, 2, 0).is_err());
    }

    #[test]
    fn inertia_never_increases() {
        let mut r = rng(5);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| perturb_on_sphere(&basis(6, i % 3), 0.6, &mut r))
            .collect();
        let a = spherical_kmeans(&matrix(&rows), 4, 2).unwrap();
        for w in a.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", a.inertia_history);
        }
    }

    #[test]
    fn silhouette_examples() {
        let m = matrix(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert!((silhouette(&m, &[0, 0, 1, 1]).unwrap() - 1.0).abs() < 1e-12);

        let same = matrix(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(silhouette(&same, &[0, 1, 0, 1]).unwrap(), 0.0);

        assert!(silhouette(&m, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn silhouette_by_hand() {
        // distances: d01=1, d02=4, d03=5, d12=3, d13=4, d23=2; clusters {0,1}, {2,3}
        let d = [
            0.0, 1.0, 4.0, 5.0, //
            1.0, 0.0, 3.0, 4.0, //
            4.0, 3.0, 0.0, 2.0, //
            5.0, 4.0, 2.0, 0.0,
        ];
        // s0: a=1, b=4.5 -> 3.5/4.5; s1: a=1, b=3.5 -> 2.5/3.5
        // s2: a=2, b=3.5 -> 1.5/3.5; s3: a=2, b=4.5 -> 2.5/4.5
        let expected = (3.5 / 4.5 + 2.5 / 3.5 + 1.5 / 3.5 + 2.5 / 4.5) / 4.0;
        let s = silhouette_from_distances(&d, &[0, 0, 1, 1]).unwrap();
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn singleton_points_score_zero() {
        let d = [0.0, 1.0, 1.0, 1.0, 0.0, 0.5, 1.0, 0.5, 0.0];
        // point 0 is alone; points 1, 2: a=0.5, b=1 -> 0.5 each
        let s = silhouette_from_distances(&d, &[0, 1, 1]).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn split_scores_match_direct_means() {
        let data = year_shift_series(1900, 1929, 1915, 40.0, 10.0, 5, 8);
        let idx = FlatIndex::build(&data.matrix).unwrap();
        let dist = idx.distance_matrix();
        let n = data.matrix.len();
        let order = sorted_order(&data.labels);
        let scorer = SplitScorer::new(&dist, n, &order);
        for s in [3usize, 10, 15, 22] {
            let (before, after) = order.split_at(s);
            let mean = |pairs: Vec<f64>| pairs.iter().sum::<f64>() / pairs.len() as f64;
            let cross = mean(before.iter().flat_map(|&i| after.iter().map(move |&j| (i, j))).map(|(i, j)| dist[i * n + j]).collect());
            let within = |g: &[usize]| {
                mean(
                    g.iter()
                        .enumerate()
                        .flat_map(|(a, &i)| g[a + 1..].iter().map(move |&j| (i, j)))
                        .map(|(i, j)| dist[i * n + j])
                        .collect(),
                )
            };
            let direct = cross - 0.5 * (within(before) + within(after));
            assert!((scorer.score(s) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn changepoint_input_errors() {
        let data = year_shift_series(1900, 1915, 1908, 60.0, 5.0, 4, 1);
        let cfg = ChangepointConfig::default();
        assert!(detect_changepoint(&data.matrix, &data.labels, &cfg).is_err());
        let flat = vec![1900; data.matrix.len()];
        let small = ChangepointConfig { min_group: 2, ..cfg };
        assert!(detect_changepoint(&data.matrix, &flat, &small).is_err());
        assert!(detect_changepoint(&data.matrix, &data.labels[1..], &small).is_err());
    }

    #[test]
    fn ties_pick_earliest_year() {
        // four identical vectors: every split scores 0
        let m = matrix(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let cfg = ChangepointConfig {
            min_group: 1,
            permutations: 10,
            seed: 0,
        };
        let rep = detect_changepoint(&m, &[1900, 1901, 1902, 1903], &cfg).unwrap();
        assert_eq!(rep.best_break, (1900, 1901));
        assert!(!rep.significant);
    }
}
