use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use tempora::attribution::*;
use tempora::corpus::{chunk_spans, split_chunk_id, ChunkerConfig, Split};
use tempora::dateline::*;
use tempora::embed::{load_external_embeddings, EmbeddingMatrix};
use tempora::knn::FlatIndex;
use tempora::pipeline::{run_pipeline, PipelineConfig};
use tempora::reduce::{fit, Method, Projection, ReducerConfig};
use tempora::seed::{rng, stage_seed};
use tempora::synth::*;
use tempora::temporal::{detect_changepoint, silhouette_euclidean, ChangepointConfig};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn chunker_arithmetic() -> Outcome {
    let cfg = ChunkerConfig::default();
    if (cfg.window, cfg.overlap) != (512, 128) {
        return Outcome::Fail(format!("default window/overlap {}/{}", cfg.window, cfg.overlap));
    }
    let (w, o) = (512usize, 128usize);
    let stride = w - o;
    for n in 1..=5000usize {
        let expected = if n <= w { 1 } else { (n - w).div_ceil(stride) + 1 };
        let spans = chunk_spans(n, &cfg);
        if spans.len() != expected || cfg.chunk_count(n) != expected {
            return Outcome::Fail(format!("n={n}: {} spans, expected {expected}", spans.len()));
        }
        if spans[0].0 != 0 || spans.last().unwrap().1 != n {
            return Outcome::Fail(format!("n={n}: spans do not cover [0, n)"));
        }
        for (i, &(s, e)) in spans.iter().enumerate() {
            if s != i * stride || e != (s + w).min(n) {
                return Outcome::Fail(format!("n={n}: span {i} is [{s}, {e})"));
            }
        }
        if spans.windows(2).any(|p| p[0].1 - p[1].0 != o) {
            return Outcome::Fail(format!("n={n}: overlap differs from {o}"));
        }
    }
    Outcome::Pass("n in 1..=5000, W=512, O=128".into())
}

fn knn_exactness() -> Outcome {
    let mut r = rng(stage_seed(1, "knn-acceptance"));
    let rows: Vec<Vec<f64>> = (0..1000).map(|_| random_unit(32, &mut r)).collect();
    let ids: Vec<String> = (0..1000).map(|i| format!("v{i:04}")).collect();
    let m = EmbeddingMatrix::from_rows(ids.clone(), &rows, "t").unwrap();
    let index = FlatIndex::build(&m).unwrap();
    for q in 0..20 {
        let query = random_unit(32, &mut r);
        let mut brute: Vec<(f64, &String)> = rows
            .iter()
            .zip(&ids)
            .map(|(v, id)| {
                let c: f64 = v.iter().zip(&query).map(|(a, b)| a * b).sum();
                ((1.0 - c).clamp(0.0, 2.0), id)
            })
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        let got = index.query(&query, 15).unwrap();
        for (g, (d, id)) in got.iter().zip(&brute[..15]) {
            if &g.id != *id || (g.distance - d).abs() > 1e-12 {
                return Outcome::Fail(format!("query {q}: got {} at {}, expected {id} at {d}", g.id, g.distance));
            }
        }
    }
    Outcome::Pass("1000 vectors, 20 queries, k=15".into())
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn gradient_checks() -> Outcome {
    let mut r = rng(stage_seed(2, "gradcheck"));
    let h = 1e-5;
    let mut worst_lp: f64 = 0.0;
    for p in [1.5, 2.0, 3.0, 5.0] {
        let pred = gaussian_vector(12, &mut r);
        let targ = gaussian_vector(12, &mut r);
        let (_, grad) = lp_loss(&pred, &targ, p).unwrap();
        for i in 0..pred.len() {
            let (mut up, mut dn) = (pred.clone(), pred.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (lp_loss(&up, &targ, p).unwrap().0 - lp_loss(&dn, &targ, p).unwrap().0) / (2.0 * h);
            worst_lp = worst_lp.max(rel_err(grad[i], fd, 1e-8));
        }
    }

    let rows: Vec<Vec<f64>> = (0..4).map(|_| gaussian_vector(6, &mut r)).collect();
    let x = EmbeddingMatrix::from_rows((0..4).map(|i| format!("s#{i}")).collect(), &rows, "t").unwrap();
    let targets: Vec<f64> = (0..4).map(|_| gaussian_vector(1, &mut r)[0]).collect();
    let cfg = DatelineConfig {
        hidden_dims: vec![5, 3],
        p: 3.0,
        seed: 4,
        ..Default::default()
    };
    let mut model = DatelineModel::new(6, cfg, 1900.0, 2000.0).unwrap();
    let all = [0, 1, 2, 3];
    let (_, grad) = model.loss_and_gradient(&x, &targets, &all).unwrap();
    let base = model.params();
    let mut worst_net: f64 = 0.0;
    for i in 0..base.len() {
        let mut q = base.clone();
        q[i] = base[i] + h;
        model.set_params(&q);
        let up = model.loss_and_gradient(&x, &targets, &all).unwrap().0;
        q[i] = base[i] - h;
        model.set_params(&q);
        let dn = model.loss_and_gradient(&x, &targets, &all).unwrap().0;
        worst_net = worst_net.max(rel_err(grad[i], (up - dn) / (2.0 * h), 1e-6));
    }
    model.set_params(&base);

    let g1 = gelu(1.0);
    verdict(
        worst_lp < 1e-4 && worst_net < 1e-3 && (g1 - 0.841345).abs() < 1e-5,
        format!(
            "lp_loss max rel err {worst_lp:.2e}, network ({} params) {worst_net:.2e}, gelu(1) = {g1:.6}",
            base.len()
        ),
    )
}

/// Trustworthiness from scratch: cosine ranks in the input, Euclidean neighbours in the output.
fn trustworthiness_oracle(x: &EmbeddingMatrix, p: &Projection, k: usize) -> f64 {
    let n = x.len();
    let mut penalty = 0.0;
    for i in 0..n {
        let mut high: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let c: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
                (1.0 - c, j)
            })
            .collect();
        high.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut rank = vec![0usize; n];
        for (r, &(_, j)) in high.iter().enumerate() {
            rank[j] = r + 1;
        }
        let mut low: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = p.point(i).iter().zip(p.point(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, j)
            })
            .collect();
        low.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &low[..k] {
            if rank[j] > k {
                penalty += (rank[j] - k) as f64;
            }
        }
    }
    let (n, k) = (n as f64, k as f64);
    1.0 - 2.0 / (n * k * (2.0 * n - 3.0 * k - 1.0)) * penalty
}

fn reducer_quality() -> Outcome {
    let data = two_clusters(50, 16, 0.1, 21);
    let mut lines = Vec::new();
    let mut ok = true;
    for m in Method::ALL {
        let cfg = ReducerConfig {
            seed: 5,
            ..ReducerConfig::with_method(m)
        };
        let a = fit(&data.matrix, &cfg).unwrap();
        let b = fit(&data.matrix, &cfg).unwrap();
        let identical = a.coords.iter().zip(&b.coords).all(|(x, y)| x.to_bits() == y.to_bits());
        let s = silhouette_euclidean(&a.coords, a.out_dim, &data.labels).unwrap();
        let t = trustworthiness_oracle(&data.matrix, &a, 10);
        ok &= identical && s > 0.5 && t >= 0.8;
        lines.push(format!("{m}: silhouette {s:.3} trust {t:.3} identical {identical}"));
    }
    verdict(ok, lines.join("; "))
}

fn changepoint_recovery() -> Outcome {
    let s = year_shift_series(1900, 1950, 1925, 60.0, 5.0, 16, 3);
    let rep = detect_changepoint(&s.matrix, &s.labels, &ChangepointConfig::default()).unwrap();
    let mut rejected = 0;
    for t in 0..100u64 {
        let mut years = s.labels.clone();
        years.shuffle(&mut rng(stage_seed(t, "permuted-years")));
        let cfg = ChangepointConfig {
            seed: t,
            ..Default::default()
        };
        if !detect_changepoint(&s.matrix, &years, &cfg).unwrap().significant {
            rejected += 1;
        }
    }
    verdict(
        rep.best_break == (1924, 1925) && rep.significant && rejected >= 95,
        format!(
            "best_break {:?} significant {}; permuted controls not significant in {rejected}/100",
            rep.best_break, rep.significant
        ),
    )
}

fn sum_mean_agree(model: &AttributionModel, x: &EmbeddingMatrix) -> bool {
    let logits = predict_chunk_logits(model, x).unwrap();
    let map = DocChunkMap::from_chunk_ids(x.ids()).unwrap();
    aggregate_document(&logits, &map).unwrap() == aggregate_document_mean(&logits, &map).unwrap()
}

fn attribution_protocol() -> Outcome {
    let cfg = AttributionConfig {
        seed: 1,
        ..Default::default()
    };
    let tr = class_chunks(42, 3, 8, 64, 0.1, Split::Train, 42);
    let te = class_chunks(42, 1, 8, 64, 0.1, Split::Test, 43);
    let sep = train_attribution(&tr.matrix, &tr.labels, &cfg).unwrap();
    let sep_rep = evaluate_attribution(&sep, &te.matrix, &te.labels).unwrap();

    let tr = class_chunks(42, 3, 20, 64, 0.4, Split::Train, 44);
    let te_noisy = class_chunks(42, 1, 20, 64, 0.4, Split::Test, 45);
    let noisy = train_attribution(&tr.matrix, &tr.labels, &cfg).unwrap();
    let noisy_rep = evaluate_attribution(&noisy, &te_noisy.matrix, &te_noisy.labels).unwrap();

    let agree = sum_mean_agree(&sep, &te.matrix) && sum_mean_agree(&noisy, &te_noisy.matrix);
    verdict(
        sep_rep.per_document_accuracy == 1.0 && noisy_rep.per_document_accuracy > noisy_rep.per_chunk_accuracy && agree,
        format!(
            "separable doc acc {:.3}; noisy chunk {:.3} < doc {:.3}; sum/mean agree {agree}",
            sep_rep.per_document_accuracy, noisy_rep.per_chunk_accuracy, noisy_rep.per_document_accuracy
        ),
    )
}

fn dateline_protocol() -> Outcome {
    let years: Vec<i32> = (0..60).map(|i| 1900 + (i * 50) / 59).collect();
    let lin = year_chunks(&years, (1900, 1950), 4, 16, 0.0, Split::Train, 1);
    let cfg = DatelineConfig {
        hidden_dims: vec![32, 16],
        p: 2.0,
        epochs: 300,
        learning_rate: 3e-3,
        seed: 2,
        ..Default::default()
    };
    let model = train_dateline(&lin.matrix, &lin.labels, &cfg).unwrap();
    let train_rmse = evaluate_dateline(&model, &lin.matrix, &lin.labels).unwrap().chunk_rmse;

    let train_years: Vec<i32> = (0..120).map(|i| 1900 + (i * 37) % 51).collect();
    let test_years: Vec<i32> = (0..40).map(|i| 1900 + (i * 13) % 51).collect();
    let tr = year_chunks(&train_years, (1900, 1950), 20, 16, 0.3, Split::Train, 3);
    let te = year_chunks(&test_years, (1900, 1950), 20, 16, 0.3, Split::Test, 4);
    let cfg = DatelineConfig {
        hidden_dims: vec![64, 32],
        p: 3.0,
        epochs: 60,
        learning_rate: 1e-3,
        seed: 5,
        ..Default::default()
    };
    let noisy = train_dateline(&tr.matrix, &tr.labels, &cfg).unwrap();
    let rep = evaluate_dateline(&noisy, &te.matrix, &te.labels).unwrap();
    verdict(
        train_rmse < 0.5 && rep.doc_rmse < rep.chunk_rmse,
        format!(
            "linear training rmse {train_rmse:.3} years; noisy chunk rmse {:.2} > doc rmse {:.2}",
            rep.chunk_rmse, rep.doc_rmse
        ),
    )
}

fn year_of(id: &str) -> Option<i32> {
    let doc = split_chunk_id(id).map_or(id, |(d, _)| d);
    let stem = doc.rsplit('/').next()?;
    let stem = stem.strip_suffix(".txt").unwrap_or(stem);
    stem.rsplit('_').next()?.parse().ok()
}

fn external_fixture() -> Outcome {
    let Ok(path) = std::env::var("TEMPORA_SOTU_GPT2_EMBEDDINGS") else {
        return Outcome::Skip("TEMPORA_SOTU_GPT2_EMBEDDINGS not set".into());
    };
    let m = match load_external_embeddings(Path::new(&path)) {
        Ok(m) => m,
        Err(e) => return Outcome::Fail(format!("cannot load {path}: {e}")),
    };
    let Some(years) = m.ids().iter().map(|id| year_of(id)).collect::<Option<Vec<i32>>>() else {
        return Outcome::Fail("fixture ids must end in _<year>".into());
    };
    let proj = fit(&m, &ReducerConfig::with_method(Method::UmapLike)).unwrap();
    let rep = detect_changepoint(&proj.to_matrix().unwrap(), &years, &ChangepointConfig::default()).unwrap();
    verdict(
        rep.significant && (1920..=1941).contains(&rep.best_break.0),
        format!("{} documents, best_break {:?} significant {}", m.len(), rep.best_break, rep.significant),
    )
}

fn stamped_outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    write_text_corpus(&corpus, &TextCorpusSpec::default()).unwrap();
    let run = |name: &str| {
        let mut cfg = PipelineConfig {
            seed: 3,
            out_dir: dir.path().join(name),
            ..Default::default()
        };
        cfg.corpus.root = corpus.clone();
        cfg.reduce.n_neighbors = 8;
        cfg.changepoint.min_group = 5;
        cfg.dateline.hidden_dims = vec![32, 16];
        cfg.dateline.epochs = 30;
        run_pipeline(&cfg).unwrap();
        stamped_outputs(&cfg.out_dir)
    };
    let (a, b) = (run("a"), run("b"));
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let names: HashSet<&String> = a.keys().chain(b.keys()).collect();
    verdict(
        differing.is_empty() && names.len() == a.len() && a.len() > 10,
        format!("{} CSV/JSON artifacts compared, differing: {differing:?}", a.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Check, Duration); 9] = [
        ("chunker arithmetic", chunker_arithmetic, Duration::from_secs(1)),
        ("knn exactness", knn_exactness, Duration::from_secs(1)),
        ("gradient checks", gradient_checks, Duration::from_secs(5)),
        ("reducer quality", reducer_quality, Duration::from_secs(60)),
        ("changepoint recovery", changepoint_recovery, Duration::from_secs(30)),
        ("attribution protocol", attribution_protocol, Duration::from_secs(60)),
        ("dateline protocol", dateline_protocol, Duration::from_secs(60)),
        ("external embedding changepoint", external_fixture, Duration::from_secs(120)),
        ("determinism", determinism, Duration::from_secs(120)),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) if elapsed <= budget => ("PASS", d),
            Outcome::Pass(d) => ("FAIL", format!("{d}; took {elapsed:.2?}, budget {budget:?}")),
            Outcome::Fail(d) => ("FAIL", d),
            Outcome::Skip(d) => ("SKIP", d),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} {name} [{elapsed:.2?}] {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
