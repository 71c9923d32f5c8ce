//! Staged, seeded pipeline over a corpus directory. Each stage reads the
//! artifacts of earlier stages from the output directory and writes its own,
//! so any stage can be re-run alone.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{evaluate_attribution, train_attribution, AttributionConfig, AttributionModel, EvalReport};
use crate::corpus::{chunk_id, chunk_spans, load_corpus, split_chunk_id, tokenize, ChunkSet, ChunkerConfig, DocumentRecord, Split, SplitLayout};
use crate::dateline::{evaluate_dateline, p_sweep, train_dateline, DatelineConfig, DatelineModel, DatelineReport};
use crate::embed::{hashed_ngram_embed, load_external_embeddings, pool_all, EmbeddingMatrix, HashedNgramConfig};
use crate::error::{Error, Result};
use crate::reduce::{fit, Method, Projection, ReducerConfig};
use crate::report::{emit_scatter, projection_csv, read_json, write_json, write_text, ColorBy, PointMeta, Stamp};
use crate::seed::stage_seed;
use crate::temporal::{detect_changepoint, silhouette, spherical_kmeans, ChangepointConfig, ChangepointReport, ClusterAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Chunk,
    Embed,
    Reduce,
    Cluster,
    Changepoint,
    Attribute,
    Dateline,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Chunk,
        Stage::Embed,
        Stage::Reduce,
        Stage::Cluster,
        Stage::Changepoint,
        Stage::Attribute,
        Stage::Dateline,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Chunk => "chunk",
            Stage::Embed => "embed",
            Stage::Reduce => "reduce",
            Stage::Cluster => "cluster",
            Stage::Changepoint => "changepoint",
            Stage::Attribute => "attribute",
            Stage::Dateline => "dateline",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub root: PathBuf,
    pub layout: SplitLayout,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("corpus"),
            layout: SplitLayout::Subdirs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSwitches {
    pub ingest: bool,
    pub chunk: bool,
    pub embed: bool,
    pub reduce: bool,
    pub cluster: bool,
    pub changepoint: bool,
    pub attribute: bool,
    pub dateline: bool,
    pub report: bool,
}

impl Default for StageSwitches {
    fn default() -> Self {
        Self {
            ingest: true,
            chunk: true,
            embed: true,
            reduce: true,
            cluster: true,
            changepoint: true,
            attribute: true,
            dateline: true,
            report: true,
        }
    }
}

impl StageSwitches {
    pub fn enabled(&self, stage: Stage) -> bool {
        match stage {
            Stage::Ingest => self.ingest,
            Stage::Chunk => self.chunk,
            Stage::Embed => self.embed,
            Stage::Reduce => self.reduce,
            Stage::Cluster => self.cluster,
            Stage::Changepoint => self.changepoint,
            Stage::Attribute => self.attribute,
            Stage::Dateline => self.dateline,
            Stage::Report => self.report,
        }
    }

    pub fn only(stage: Stage) -> Self {
        let mut s = Self {
            ingest: false,
            chunk: false,
            embed: false,
            reduce: false,
            cluster: false,
            changepoint: false,
            attribute: false,
            dateline: false,
            report: false,
        };
        match stage {
            Stage::Ingest => s.ingest = true,
            Stage::Chunk => s.chunk = true,
            Stage::Embed => s.embed = true,
            Stage::Reduce => s.reduce = true,
            Stage::Cluster => s.cluster = true,
            Stage::Changepoint => s.changepoint = true,
            Stage::Attribute => s.attribute = true,
            Stage::Dateline => s.dateline = true,
            Stage::Report => s.report = true,
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    /// `hashed-ngram`, or `external:<path>` for a precomputed `EMB1`/JSONL file.
    pub provider: String,
    pub dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
}

impl Default for EmbedSection {
    fn default() -> Self {
        let h = HashedNgramConfig::default();
        Self {
            provider: "hashed-ngram".into(),
            dim: h.dim,
            ngram_min: h.ngram_min,
            ngram_max: h.ngram_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceSection {
    pub methods: Vec<Method>,
    pub out_dim: usize,
    pub n_neighbors: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_dist: f64,
}

impl Default for ReduceSection {
    fn default() -> Self {
        let r = ReducerConfig::default();
        Self {
            methods: Method::ALL.to_vec(),
            out_dim: r.out_dim,
            n_neighbors: r.n_neighbors,
            epochs: r.epochs,
            learning_rate: r.learning_rate,
            min_dist: r.min_dist,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub k: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self { k: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChangepointSection {
    pub min_group: usize,
    pub permutations: usize,
}

impl Default for ChangepointSection {
    fn default() -> Self {
        let c = ChangepointConfig::default();
        Self {
            min_group: c.min_group,
            permutations: c.permutations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for AttributionSection {
    fn default() -> Self {
        let a = AttributionConfig::default();
        Self {
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            batch_size: a.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatelineSection {
    pub hidden_dims: Vec<usize>,
    pub p: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub year_range: Option<(i32, i32)>,
    /// Extra exponents to train and compare; empty skips the sweep.
    pub p_sweep: Vec<f64>,
}

impl Default for DatelineSection {
    fn default() -> Self {
        let d = DatelineConfig::default();
        Self {
            hidden_dims: d.hidden_dims,
            p: d.p,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            year_range: d.year_range,
            p_sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub color_by: Vec<ColorBy>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            color_by: vec![ColorBy::Year, ColorBy::Author, ColorBy::Cluster],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub stages: StageSwitches,
    pub chunker: ChunkerConfig,
    pub embed: EmbedSection,
    pub reduce: ReduceSection,
    pub cluster: ClusterSection,
    pub changepoint: ChangepointSection,
    pub attribution: AttributionSection,
    pub dateline: DatelineSection,
    pub report: ReportSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            corpus: CorpusSection::default(),
            stages: StageSwitches::default(),
            chunker: ChunkerConfig::default(),
            embed: EmbedSection::default(),
            reduce: ReduceSection::default(),
            cluster: ClusterSection::default(),
            changepoint: ChangepointSection::default(),
            attribution: AttributionSection::default(),
            dateline: DatelineSection::default(),
            report: ReportSection::default(),
        }
    }
}

enum Provider {
    HashedNgram,
    External(PathBuf),
}

impl PipelineConfig {
    /// Parse a TOML file; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.corpus.root = resolve(base, &cfg.corpus.root);
        cfg.out_dir = resolve(base, &cfg.out_dir);
        if let Some(rest) = cfg.embed.provider.strip_prefix("external:") {
            cfg.embed.provider = format!("external:{}", resolve(base, Path::new(rest)).display());
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Checks that apply before any stage runs.
    pub fn validate(&self) -> Result<()> {
        self.chunker.validate()?;
        if self.stages.ingest && !self.corpus.root.is_dir() {
            return Err(Error::MissingPath(self.corpus.root.clone()));
        }
        match self.provider()? {
            Provider::External(p) if self.stages.embed && !p.is_file() => return Err(Error::MissingPath(p)),
            Provider::HashedNgram => self.hashed_config().validate()?,
            _ => {}
        }
        if self.reduce.methods.is_empty() && self.stages.reduce {
            return Err(Error::InvalidConfig("reduce.methods is empty".into()));
        }
        if self.cluster.k == 0 {
            return Err(Error::InvalidConfig("cluster.k must be positive".into()));
        }
        self.dateline_config().validate()?;
        for &p in &self.dateline.p_sweep {
            DatelineConfig { p, ..self.dateline_config() }.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, excluding the output directory and
    /// stage switches.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.stages = StageSwitches::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn stamp(&self) -> Stamp {
        Stamp {
            config_hash: self.config_hash(),
            seed: self.seed,
        }
    }

    fn provider(&self) -> Result<Provider> {
        if self.embed.provider == "hashed-ngram" {
            Ok(Provider::HashedNgram)
        } else if let Some(p) = self.embed.provider.strip_prefix("external:") {
            Ok(Provider::External(PathBuf::from(p)))
        } else {
            Err(Error::InvalidConfig(format!(
                "embed.provider must be \"hashed-ngram\" or \"external:<path>\", got {:?}",
                self.embed.provider
            )))
        }
    }

    pub fn hashed_config(&self) -> HashedNgramConfig {
        HashedNgramConfig {
            dim: self.embed.dim,
            ngram_min: self.embed.ngram_min,
            ngram_max: self.embed.ngram_max,
            seed: stage_seed(self.seed, "embed"),
        }
    }

    pub fn reducer_config(&self, method: Method) -> ReducerConfig {
        ReducerConfig {
            method,
            out_dim: self.reduce.out_dim,
            n_neighbors: self.reduce.n_neighbors,
            epochs: self.reduce.epochs,
            learning_rate: self.reduce.learning_rate,
            min_dist: self.reduce.min_dist,
            seed: stage_seed(self.seed, &format!("reduce/{}", method.as_str())),
        }
    }

    pub fn changepoint_config(&self) -> ChangepointConfig {
        ChangepointConfig {
            min_group: self.changepoint.min_group,
            permutations: self.changepoint.permutations,
            seed: stage_seed(self.seed, "changepoint"),
        }
    }

    pub fn attribution_config(&self) -> AttributionConfig {
        AttributionConfig {
            epochs: self.attribution.epochs,
            learning_rate: self.attribution.learning_rate,
            batch_size: self.attribution.batch_size,
            seed: stage_seed(self.seed, "attribute"),
        }
    }

    pub fn dateline_config(&self) -> DatelineConfig {
        DatelineConfig {
            hidden_dims: self.dateline.hidden_dims.clone(),
            p: self.dateline.p,
            epochs: self.dateline.epochs,
            learning_rate: self.dateline.learning_rate,
            batch_size: self.dateline.batch_size,
            seed: stage_seed(self.seed, "dateline"),
            year_range: self.dateline.year_range,
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// A failure attributed to the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: Option<Stage>,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Some(s) => write!(f, "stage {s} failed: {}", self.source),
            None => write!(f, "{}", self.source),
        }
    }
}

impl std::error::Error for StageError {}

impl StageError {
    /// 2 for bad input, 1 for a failing stage.
    pub fn exit_code(&self) -> i32 {
        if self.source.is_bad_input() {
            2
        } else {
            1
        }
    }
}

pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<Vec<Stage>, StageError> {
    cfg.validate().map_err(|source| StageError { stage: None, source })?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| StageError {
        stage: None,
        source: Error::io(&cfg.out_dir, e),
    })?;
    let mut ran = Vec::new();
    for stage in Stage::ALL {
        if cfg.stages.enabled(stage) {
            log::info!("running stage {stage}");
            run_stage(cfg, stage).map_err(|source| StageError {
                stage: Some(stage),
                source,
            })?;
            ran.push(stage);
        }
    }
    Ok(ran)
}

pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    match stage {
        Stage::Ingest => ingest(cfg),
        Stage::Chunk => chunk_stage(cfg),
        Stage::Embed => embed_stage(cfg),
        Stage::Reduce => reduce_stage(cfg),
        Stage::Cluster => cluster_stage(cfg),
        Stage::Changepoint => changepoint_stage(cfg),
        Stage::Attribute => attribute_stage(cfg),
        Stage::Dateline => dateline_stage(cfg),
        Stage::Report => report_stage(cfg),
    }
}

pub const CORPUS_FILE: &str = "corpus.json";
pub const CHUNKS_FILE: &str = "chunks.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";
pub const CHUNK_EMB_FILE: &str = "chunk_embeddings.emb";
pub const DOC_EMB_FILE: &str = "doc_embeddings.emb";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const CHANGEPOINT_FILE: &str = "changepoint.json";
pub const ATTRIBUTION_FILE: &str = "attribution.json";
pub const DATELINE_FILE: &str = "dateline.json";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn projection_file(method: Method) -> String {
    format!("projection_{}.json", method.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusArtifact {
    pub root: PathBuf,
    pub authors: Vec<String>,
    pub documents: Vec<DocumentRecord>,
    pub empty_documents: Vec<String>,
    pub coverage_gaps: Vec<(String, Split)>,
}

impl CorpusArtifact {
    fn meta(&self) -> HashMap<&str, &DocumentRecord> {
        self.documents.iter().map(|d| (d.doc_id.as_str(), d)).collect()
    }
}

fn ingest(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus(&cfg.corpus.root, cfg.corpus.layout)?;
    if corpus.documents.is_empty() {
        return Err(Error::InvalidInput(format!("no documents under {}", cfg.corpus.root.display())));
    }
    let art = CorpusArtifact {
        root: cfg.corpus.root.clone(),
        authors: corpus.authors(),
        coverage_gaps: corpus.coverage_gaps(),
        empty_documents: corpus.empty.iter().map(|d| d.doc_id.clone()).collect(),
        documents: corpus.documents,
    };
    let stamp = cfg.stamp();
    let mut csv = stamp.csv_comment();
    csv.push_str("doc_id,author,year,split,chars\n");
    for d in &art.documents {
        csv.push_str(&format!("{},{},{},{},{}\n", d.doc_id, d.author, d.year, d.split, d.text.chars().count()));
    }
    write_text(&cfg.out("corpus.csv"), &csv)?;
    write_json(&cfg.out(CORPUS_FILE), "ingest", &stamp, &art)
}

pub fn load_corpus_artifact(cfg: &PipelineConfig) -> Result<CorpusArtifact> {
    Ok(read_json::<CorpusArtifact>(&cfg.out(CORPUS_FILE))?.data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkedDocument {
    pub doc_id: String,
    pub n_tokens: usize,
    pub spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkArtifact {
    pub chunker: ChunkerConfig,
    pub n_chunks: usize,
    pub documents: Vec<ChunkedDocument>,
}

fn chunk_stage(cfg: &PipelineConfig) -> Result<()> {
    cfg.chunker.validate()?;
    let corpus = load_corpus_artifact(cfg)?;
    let documents: Vec<ChunkedDocument> = corpus
        .documents
        .iter()
        .map(|d| {
            let n = tokenize(&d.text).len();
            ChunkedDocument {
                doc_id: d.doc_id.clone(),
                n_tokens: n,
                spans: chunk_spans(n, &cfg.chunker),
            }
        })
        .collect();
    let art = ChunkArtifact {
        chunker: cfg.chunker,
        n_chunks: documents.iter().map(|d| d.spans.len()).sum(),
        documents,
    };
    write_json(&cfg.out(CHUNKS_FILE), "chunk", &cfg.stamp(), &art)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingArtifact {
    pub provider: String,
    pub dim: usize,
    pub n_chunks: usize,
    pub n_documents: usize,
    pub empty_rows: Vec<String>,
    /// File name and hex SHA-256 of each binary matrix.
    pub files: Vec<(String, String)>,
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn embed_stage(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus_artifact(cfg)?;
    let chunks: ChunkArtifact = read_json(&cfg.out(CHUNKS_FILE))?.data;
    let chunk_matrix = match cfg.provider()? {
        Provider::HashedNgram => {
            let hcfg = cfg.hashed_config();
            hcfg.validate()?;
            let meta = corpus.meta();
            let parts = chunks
                .documents
                .iter()
                .map(|c| {
                    let doc = meta
                        .get(c.doc_id.as_str())
                        .ok_or_else(|| Error::InvalidInput(format!("chunked document {} not in corpus", c.doc_id)))?;
                    let set = ChunkSet {
                        doc_id: c.doc_id.clone(),
                        spans: c.spans.clone(),
                        tokens: tokenize(&doc.text),
                    };
                    hashed_ngram_embed(&set, &hcfg)
                })
                .collect::<Result<Vec<_>>>()?;
            EmbeddingMatrix::concat(&parts)?
        }
        Provider::External(path) => external_chunks(&load_external_embeddings(&path)?, &corpus)?,
    };
    let doc_matrix = pool_all(&chunk_matrix)?;
    chunk_matrix.save_binary(&cfg.out(CHUNK_EMB_FILE))?;
    doc_matrix.save_binary(&cfg.out(DOC_EMB_FILE))?;
    let art = EmbeddingArtifact {
        provider: chunk_matrix.provider.clone(),
        dim: chunk_matrix.dim(),
        n_chunks: chunk_matrix.len(),
        n_documents: doc_matrix.len(),
        empty_rows: chunk_matrix.empty_rows.iter().map(|&r| chunk_matrix.ids()[r].clone()).collect(),
        files: vec![
            (CHUNK_EMB_FILE.into(), file_digest(&cfg.out(CHUNK_EMB_FILE))?),
            (DOC_EMB_FILE.into(), file_digest(&cfg.out(DOC_EMB_FILE))?),
        ],
    };
    write_json(&cfg.out(EMBEDDINGS_FILE), "embed", &cfg.stamp(), &art)
}

/// Map an external matrix onto corpus documents. Rows are keyed by document id
/// or file stem, optionally with a `#<chunk>` suffix; document-level rows become
/// a single chunk.
fn external_chunks(ext: &EmbeddingMatrix, corpus: &CorpusArtifact) -> Result<EmbeddingMatrix> {
    let mut by_key: HashMap<&str, Vec<usize>> = HashMap::new();
    for (row, id) in ext.ids().iter().enumerate() {
        let doc = split_chunk_id(id).map_or(id.as_str(), |(d, _)| d);
        by_key.entry(doc).or_default().push(row);
    }
    let mut ids = Vec::new();
    let mut picked = Vec::new();
    let mut missing = Vec::new();
    for d in &corpus.documents {
        let stem = d.stem();
        match by_key.get(d.doc_id.as_str()).or_else(|| by_key.get(stem.as_str())) {
            Some(rows) => {
                for (i, &r) in rows.iter().enumerate() {
                    ids.push(chunk_id(&d.doc_id, i));
                    picked.push(r);
                }
            }
            None => missing.push(d.doc_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "external embeddings lack {} corpus documents, e.g. {}",
            missing.len(),
            missing[0]
        )));
    }
    let data = picked.iter().flat_map(|&r| ext.row(r).iter().copied()).collect();
    EmbeddingMatrix::new(ids, ext.dim(), data, ext.provider.clone())
}

fn read_matrix(cfg: &PipelineConfig, name: &str) -> Result<EmbeddingMatrix> {
    let art: EmbeddingArtifact = read_json(&cfg.out(EMBEDDINGS_FILE))?.data;
    let path = cfg.out(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    EmbeddingMatrix::from_binary(&bytes, art.provider)
}

pub fn load_doc_embeddings(cfg: &PipelineConfig) -> Result<EmbeddingMatrix> {
    read_matrix(cfg, DOC_EMB_FILE)
}

pub fn load_chunk_embeddings(cfg: &PipelineConfig) -> Result<EmbeddingMatrix> {
    read_matrix(cfg, CHUNK_EMB_FILE)
}

fn point_meta(ids: &[String], corpus: &CorpusArtifact, clusters: Option<&ClusterAssignment>) -> Result<Vec<PointMeta>> {
    let meta = corpus.meta();
    let cluster_of: Option<HashMap<&str, usize>> =
        clusters.map(|c| c.ids.iter().map(String::as_str).zip(c.labels.iter().copied()).collect());
    ids.iter()
        .map(|id| {
            let d = meta
                .get(id.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("embedded document {id} not in corpus")))?;
            Ok(PointMeta {
                author: d.author.clone(),
                year: d.year,
                cluster: cluster_of.as_ref().and_then(|m| m.get(id.as_str()).copied()),
            })
        })
        .collect()
}

fn reduce_stage(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus_artifact(cfg)?;
    let docs = load_doc_embeddings(cfg)?;
    let meta = point_meta(docs.ids(), &corpus, None)?;
    let stamp = cfg.stamp();
    for &method in &cfg.reduce.methods {
        let projection = fit(&docs, &cfg.reducer_config(method))?;
        write_json(&cfg.out(&projection_file(method)), "reduce", &stamp, &projection)?;
        write_text(
            &cfg.out(&format!("projection_{}.csv", method.as_str())),
            &projection_csv(&projection, &meta, &stamp)?,
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterArtifact {
    pub assignment: ClusterAssignment,
    pub silhouette: f64,
}

fn cluster_stage(cfg: &PipelineConfig) -> Result<()> {
    let docs = load_doc_embeddings(cfg)?;
    let assignment = spherical_kmeans(&docs, cfg.cluster.k, stage_seed(cfg.seed, "cluster"))?;
    let sil = if assignment.k > 1 && assignment.k < docs.len() {
        silhouette(&docs, &assignment.labels)?
    } else {
        0.0
    };
    let stamp = cfg.stamp();
    let mut csv = stamp.csv_comment();
    csv.push_str("id,cluster\n");
    for (id, l) in assignment.ids.iter().zip(&assignment.labels) {
        csv.push_str(&format!("{id},{l}\n"));
    }
    write_text(&cfg.out("clusters.csv"), &csv)?;
    write_json(
        &cfg.out(CLUSTERS_FILE),
        "cluster",
        &stamp,
        &ClusterArtifact {
            assignment,
            silhouette: sil,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangepointArtifact {
    pub provider: String,
    pub n_documents: usize,
    pub report: ChangepointReport,
}

fn changepoint_stage(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus_artifact(cfg)?;
    let docs = load_doc_embeddings(cfg)?;
    let years: Vec<i32> = point_meta(docs.ids(), &corpus, None)?.iter().map(|m| m.year).collect();
    let report = detect_changepoint(&docs, &years, &cfg.changepoint_config())?;
    let stamp = cfg.stamp();
    let mut csv = stamp.csv_comment();
    csv.push_str("year,score\n");
    for (y, s) in report.candidate_years.iter().zip(&report.scores) {
        csv.push_str(&format!("{y},{s}\n"));
    }
    write_text(&cfg.out("changepoint_scores.csv"), &csv)?;
    write_json(
        &cfg.out(CHANGEPOINT_FILE),
        "changepoint",
        &stamp,
        &ChangepointArtifact {
            provider: docs.provider.clone(),
            n_documents: docs.len(),
            report,
        },
    )
}

/// Chunk rows of one split with their documents' metadata.
fn split_rows<'a>(
    chunks: &EmbeddingMatrix,
    corpus: &'a CorpusArtifact,
    split: Split,
) -> Result<(EmbeddingMatrix, Vec<&'a DocumentRecord>)> {
    let meta = corpus.meta();
    let mut rows = Vec::new();
    let mut docs = Vec::new();
    for (i, id) in chunks.ids().iter().enumerate() {
        let doc_id = split_chunk_id(id).map_or(id.as_str(), |(d, _)| d);
        let d = meta
            .get(doc_id)
            .ok_or_else(|| Error::InvalidInput(format!("chunk {id} has no corpus document")))?;
        if d.split == split {
            rows.push(i);
            docs.push(*d);
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("no {split} chunks")));
    }
    Ok((chunks.select(&rows), docs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionArtifact {
    pub config: AttributionConfig,
    pub loss_history: Vec<f64>,
    pub evaluation: EvalReport,
    pub model_files: Vec<(String, String)>,
}

fn attribute_stage(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus_artifact(cfg)?;
    let chunks = load_chunk_embeddings(cfg)?;
    let (train, train_docs) = split_rows(&chunks, &corpus, Split::Train)?;
    let (test, test_docs) = split_rows(&chunks, &corpus, Split::Test)?;
    let labels = |docs: &[&DocumentRecord]| docs.iter().map(|d| d.author.clone()).collect::<Vec<_>>();
    let acfg = cfg.attribution_config();
    let model = train_attribution(&train, &labels(&train_docs), &acfg)?;
    let evaluation = evaluate_attribution(&model, &test, &labels(&test_docs))?;
    model.save(&cfg.out_dir, "attribution_model")?;
    let stamp = cfg.stamp();
    let mut csv = stamp.csv_comment();
    csv.push_str(&evaluation.confusion_csv());
    write_text(&cfg.out("attribution_confusion.csv"), &csv)?;
    let model_files = model_digests(cfg, &["attribution_model.emb", "attribution_model.json"])?;
    write_json(
        &cfg.out(ATTRIBUTION_FILE),
        "attribute",
        &stamp,
        &AttributionArtifact {
            config: acfg,
            loss_history: model.loss_history.clone(),
            evaluation,
            model_files,
        },
    )
}

fn model_digests(cfg: &PipelineConfig, names: &[&str]) -> Result<Vec<(String, String)>> {
    names
        .iter()
        .map(|n| Ok((n.to_string(), file_digest(&cfg.out(n))?)))
        .collect()
}

pub fn load_attribution_model(cfg: &PipelineConfig) -> Result<AttributionModel> {
    AttributionModel::load(&cfg.out_dir, "attribution_model")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatelineArtifact {
    pub config: DatelineConfig,
    pub loss_history: Vec<f64>,
    pub evaluation: DatelineReport,
    pub model_files: Vec<(String, String)>,
}

fn dateline_stage(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus_artifact(cfg)?;
    let chunks = load_chunk_embeddings(cfg)?;
    let (train, train_docs) = split_rows(&chunks, &corpus, Split::Train)?;
    let (test, test_docs) = split_rows(&chunks, &corpus, Split::Test)?;
    let years = |docs: &[&DocumentRecord]| docs.iter().map(|d| d.year).collect::<Vec<_>>();
    let (train_years, test_years) = (years(&train_docs), years(&test_docs));
    let dcfg = cfg.dateline_config();
    let model = train_dateline(&train, &train_years, &dcfg)?;
    let evaluation = evaluate_dateline(&model, &test, &test_years)?;
    model.save(&cfg.out_dir, "dateline_model")?;
    let stamp = cfg.stamp();

    let mut csv = stamp.csv_comment();
    csv.push_str(&evaluation.residuals_csv());
    write_text(&cfg.out("dateline_residuals.csv"), &csv)?;
    if !cfg.dateline.p_sweep.is_empty() {
        let rows = p_sweep(&train, &train_years, &test, &test_years, &dcfg, &cfg.dateline.p_sweep)?;
        let mut csv = stamp.csv_comment();
        csv.push_str("p,chunk_rmse,doc_rmse,final_train_loss\n");
        for r in rows {
            csv.push_str(&format!("{},{},{},{}\n", r.p, r.chunk_rmse, r.doc_rmse, r.final_train_loss));
        }
        write_text(&cfg.out("dateline_sweep.csv"), &csv)?;
    }
    let mut names: Vec<String> = (0..model.layers.len()).map(|k| format!("dateline_model.layer{k}.emb")).collect();
    names.push("dateline_model.json".into());
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let model_files = model_digests(cfg, &refs)?;
    write_json(
        &cfg.out(DATELINE_FILE),
        "dateline",
        &stamp,
        &DatelineArtifact {
            config: dcfg,
            loss_history: model.loss_history.clone(),
            evaluation,
            model_files,
        },
    )
}

pub fn load_dateline_model(cfg: &PipelineConfig) -> Result<DatelineModel> {
    DatelineModel::load(&cfg.out_dir, "dateline_model")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub figures: Vec<String>,
    /// Every stamped artifact in the output directory with its SHA-256.
    pub artifacts: Vec<(String, String)>,
}

fn report_stage(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus_artifact(cfg)?;
    let clusters: Option<ClusterAssignment> = match read_json::<ClusterArtifact>(&cfg.out(CLUSTERS_FILE)) {
        Ok(a) => Some(a.data.assignment),
        Err(Error::MissingPath(_)) => None,
        Err(e) => return Err(e),
    };
    let stamp = cfg.stamp();
    let mut figures = Vec::new();
    for &method in &cfg.reduce.methods {
        let projection: Projection = match read_json(&cfg.out(&projection_file(method))) {
            Ok(a) => a.data,
            Err(Error::MissingPath(p)) => {
                log::warn!("no projection at {}, skipping its figures", p.display());
                continue;
            }
            Err(e) => return Err(e),
        };
        let meta = point_meta(&projection.ids, &corpus, clusters.as_ref())?;
        for &color in &cfg.report.color_by {
            if color == ColorBy::Cluster && clusters.is_none() {
                continue;
            }
            let name = format!("scatter_{}_{}.svg", method.as_str(), color.as_str());
            write_text(&cfg.out(&name), &emit_scatter(&projection, &meta, color, &stamp)?)?;
            figures.push(name);
        }
    }
    let mut artifacts = Vec::new();
    let mut names: Vec<String> = fs::read_dir(&cfg.out_dir)
        .map_err(|e| Error::io(&cfg.out_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .filter(|n| n != SUMMARY_FILE)
        .collect();
    names.sort();
    for n in names {
        artifacts.push((n.clone(), file_digest(&cfg.out(&n))?));
    }
    write_json(&cfg.out(SUMMARY_FILE), "report", &stamp, &Summary { figures, artifacts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
            assert!(StageSwitches::only(s).enabled(s));
        }
    }

    #[test]
    fn hash_ignores_out_dir_but_not_seed() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = PipelineConfig { seed: 1, ..a.clone() };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let a = PipelineConfig::default();
        let text = a.to_toml().unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(a, back);
        assert!(toml::from_str::<PipelineConfig>("sede = 3").is_err());
    }

    #[test]
    fn stage_seeds_are_independent_of_switches() {
        let mut a = PipelineConfig::default();
        let before = a.reducer_config(Method::PacmapLike).seed;
        a.stages.cluster = false;
        assert_eq!(a.reducer_config(Method::PacmapLike).seed, before);
        assert_ne!(
            a.reducer_config(Method::UmapLike).seed,
            a.reducer_config(Method::TrimapLike).seed
        );
    }

    #[test]
    fn bad_provider_is_bad_input() {
        let cfg = PipelineConfig {
            embed: EmbedSection {
                provider: "word2vec".into(),
                ..Default::default()
            },
            stages: StageSwitches::only(Stage::Embed),
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().is_bad_input());
    }
}
