//! Seeded synthetic data: clustered unit vectors, year series with a planted
//! break, labelled chunk sets, and a small text corpus on disk.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::corpus::{chunk_id, Split};
use crate::embed::{dot, norm, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::seed::{rng, Rng};

pub fn basis(dim: usize, axis: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[axis] = 1.0;
    v
}

pub fn gaussian_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut v = gaussian_vector(dim, rng);
        let n = norm(&v);
        if n > 1e-12 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Rotate the unit vector `center` by a normally distributed angle (sd
/// `angle_sd` radians) toward a uniformly random tangent direction.
pub fn perturb_on_sphere(center: &[f64], angle_sd: f64, rng: &mut Rng) -> Vec<f64> {
    let mut u = gaussian_vector(center.len(), rng);
    let along = dot(&u, center);
    u.iter_mut().zip(center).for_each(|(x, c)| *x -= along * c);
    let n = norm(&u);
    u.iter_mut().for_each(|x| *x /= n);
    let theta: f64 = Normal::new(0.0, angle_sd).expect("sd is finite").sample(rng);
    center
        .iter()
        .zip(&u)
        .map(|(c, t)| theta.cos() * c + theta.sin() * t)
        .collect()
}

#[derive(Debug, Clone)]
pub struct Labeled<L> {
    pub matrix: EmbeddingMatrix,
    pub labels: Vec<L>,
}

/// `n_per` points about each of two orthogonal axes.
pub fn two_clusters(n_per: usize, dim: usize, angle_sd: f64, seed: u64) -> Labeled<usize> {
    let mut r = rng(seed);
    let centers = [basis(dim, 0), basis(dim, 1)];
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for i in 0..n_per {
            ids.push(format!("c{c}_{i:03}"));
            rows.push(perturb_on_sphere(center, angle_sd, &mut r));
            labels.push(c);
        }
    }
    Labeled {
        matrix: EmbeddingMatrix::from_rows(ids, &rows, "synthetic").expect("rows are finite"),
        labels,
    }
}

/// One document per year in `first..=last`. Years before `break_year` sit about
/// one axis, later years about a second axis `angle_deg` away.
pub fn year_shift_series(
    first: i32,
    last: i32,
    break_year: i32,
    angle_deg: f64,
    noise_deg: f64,
    dim: usize,
    seed: u64,
) -> Labeled<i32> {
    let mut r = rng(seed);
    let before = basis(dim, 0);
    let a = angle_deg.to_radians();
    let mut after = vec![0.0; dim];
    after[0] = a.cos();
    after[1] = a.sin();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut years = Vec::new();
    for year in first..=last {
        let center = if year < break_year { &before } else { &after };
        ids.push(format!("doc_{year}"));
        rows.push(perturb_on_sphere(center, noise_deg.to_radians(), &mut r));
        years.push(year);
    }
    Labeled {
        matrix: EmbeddingMatrix::from_rows(ids, &rows, "synthetic").expect("rows are finite"),
        labels: years,
    }
}

/// Chunk rows for `classes` authors. Class `c` is centred on axis `c`; each chunk
/// adds isotropic Gaussian noise of per-coordinate sd `noise` before renormalizing.
/// Chunk ids are `<split>/cls{c}_doc{d}#<i>`.
pub fn class_chunks(
    classes: usize,
    docs_per_class: usize,
    chunks_per_doc: usize,
    dim: usize,
    noise: f64,
    split: Split,
    seed: u64,
) -> Labeled<String> {
    assert!(classes <= dim, "need one axis per class");
    let mut r = rng(seed);
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for d in 0..docs_per_class {
            let doc = format!("{split}/cls{c:02}_doc{d:02}");
            for i in 0..chunks_per_doc {
                let mut v = gaussian_vector(dim, &mut r);
                v.iter_mut().for_each(|x| *x *= noise);
                v[c] += 1.0;
                let n = norm(&v);
                v.iter_mut().for_each(|x| *x /= n);
                ids.push(chunk_id(&doc, i));
                rows.push(v);
                labels.push(format!("cls{c:02}"));
            }
        }
    }
    Labeled {
        matrix: EmbeddingMatrix::from_rows(ids, &rows, "synthetic").expect("rows are finite"),
        labels,
    }
}

/// Chunk rows whose first coordinate is the document year normalized to `[0, 1]`
/// over `first..=last`, second coordinate constant 1, plus Gaussian noise of sd
/// `noise` on every coordinate. One document per entry of `years`.
pub fn year_chunks(
    years: &[i32],
    (first, last): (i32, i32),
    chunks_per_doc: usize,
    dim: usize,
    noise: f64,
    split: Split,
    seed: u64,
) -> Labeled<i32> {
    assert!(dim >= 2 && last > first);
    let mut r = rng(seed);
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (d, &year) in years.iter().enumerate() {
        let doc = format!("{split}/doc{d:03}_{year}");
        let t = (year - first) as f64 / (last - first) as f64;
        for i in 0..chunks_per_doc {
            let mut v = gaussian_vector(dim, &mut r);
            v.iter_mut().for_each(|x| *x *= noise);
            v[0] += t;
            v[1] += 1.0;
            ids.push(chunk_id(&doc, i));
            rows.push(v);
            labels.push(year);
        }
    }
    Labeled {
        matrix: EmbeddingMatrix::from_rows(ids, &rows, "synthetic").expect("rows are finite"),
        labels,
    }
}

#[derive(Debug, Clone)]
pub struct TextCorpusSpec {
    pub authors: usize,
    pub docs_per_author: usize,
    pub first_year: i32,
    /// First year written in the "late" register.
    pub break_year: i32,
    pub words_per_doc: usize,
    pub seed: u64,
}

impl Default for TextCorpusSpec {
    fn default() -> Self {
        Self {
            authors: 6,
            docs_per_author: 4,
            first_year: 1900,
            break_year: 1912,
            words_per_doc: 600,
            seed: 7,
        }
    }
}

fn pseudo_word(index: usize, tag: &str) -> String {
    const SYL: [&str; 16] = [
        "ka", "lo", "mi", "ne", "ru", "sa", "te", "vo", "di", "ga", "ho", "ju", "pe", "qui", "ba", "zo",
    ];
    let mut w = String::from(tag);
    let mut i = index;
    for _ in 0..3 {
        w.push_str(SYL[i % SYL.len()]);
        i /= SYL.len();
    }
    w
}

/// Write a `train/` and `test/` corpus of pseudo-word documents. Each author holds a
/// run of consecutive years; the last document of every author goes to `test/`.
pub fn write_text_corpus(root: &Path, spec: &TextCorpusSpec) -> Result<()> {
    if spec.docs_per_author < 2 {
        return Err(Error::InvalidConfig("need at least two documents per author".into()));
    }
    let mut r = rng(spec.seed);
    let common: Vec<String> = (0..200).map(|i| pseudo_word(i, "")).collect();
    let early: Vec<String> = (0..60).map(|i| pseudo_word(i, "e")).collect();
    let late: Vec<String> = (0..60).map(|i| pseudo_word(i, "l")).collect();
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut year = spec.first_year;
    for a in 0..spec.authors {
        let name = format!("Author{:02}", a);
        let own: Vec<String> = (0..40).map(|i| pseudo_word(i + 97 * a, "a")).collect();
        for d in 0..spec.docs_per_author {
            let era = if year < spec.break_year { &early } else { &late };
            let mut words = Vec::with_capacity(spec.words_per_doc);
            for w in 0..spec.words_per_doc {
                let roll: f64 = r.random();
                let pool = if roll < 0.55 {
                    &common
                } else if roll < 0.8 {
                    era
                } else {
                    &own
                };
                let mut word = pool.choose(&mut r).expect("pools are nonempty").clone();
                if w % 17 == 16 {
                    word.push('.');
                } else if w % 11 == 10 {
                    word.push(',');
                }
                words.push(word);
            }
            let split = if d + 1 == spec.docs_per_author { Split::Test } else { Split::Train };
            let path = root.join(split.as_str()).join(format!("{name}_{year}.txt"));
            fs::write(&path, words.join(" ")).map_err(|e| Error::io(&path, e))?;
            year += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturbation_stays_on_sphere_near_center() {
        let mut r = rng(1);
        let c = basis(8, 2);
        for _ in 0..50 {
            let v = perturb_on_sphere(&c, 0.1, &mut r);
            assert!((norm(&v) - 1.0).abs() < 1e-12);
            assert!(dot(&v, &c) > 0.9);
        }
    }

    #[test]
    fn text_corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_text_corpus(dir.path(), &TextCorpusSpec::default()).unwrap();
        let train = fs::read_dir(dir.path().join("train")).unwrap().count();
        let test = fs::read_dir(dir.path().join("test")).unwrap().count();
        assert_eq!((train, test), (18, 6));
    }
}
