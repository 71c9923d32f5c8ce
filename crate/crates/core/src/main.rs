use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tempora::pipeline::{run_pipeline, run_stage, PipelineConfig, Stage, StageError, StageSwitches};
use tempora::reduce::Method;
use tempora::synth::{write_text_corpus, TextCorpusSpec};

#[derive(Parser)]
#[command(name = "tempora", version, about = "Temporal and stylistic analysis of dated document corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the corpus root.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Override the embedding provider (`hashed-ngram` or `external:<path>`).
    #[arg(long)]
    provider: Option<String>,
    /// Restrict `reduce` to these methods (repeatable).
    #[arg(long = "method")]
    methods: Vec<Method>,
    /// Override the number of clusters.
    #[arg(long)]
    k: Option<usize>,
    /// Override the dateline loss exponent.
    #[arg(long)]
    p: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the corpus.
    Ingest(Common),
    /// Split documents into overlapping token windows.
    Chunk(Common),
    /// Embed chunks and pool them per document.
    Embed(Common),
    /// Project document embeddings to 2 or 3 dimensions.
    Reduce(Common),
    /// Spherical k-means over document embeddings.
    Cluster(Common),
    /// Find the year split that best separates the corpus.
    Changepoint(Common),
    /// Train and evaluate the author classifier.
    Attribute(Common),
    /// Train and evaluate the year regressor.
    Dateline(Common),
    /// Render scatter plots and the artifact summary.
    Report(Common),
    /// Run every enabled stage in order.
    Pipeline(Common),
    /// Write a small synthetic corpus for trying the pipeline out.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        authors: usize,
        #[arg(long, default_value_t = 4)]
        docs_per_author: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn resolve_config(c: &Common) -> tempora::Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(r) = &c.corpus {
        cfg.corpus.root = r.clone();
    }
    if let Some(p) = &c.provider {
        cfg.embed.provider = p.clone();
    }
    if !c.methods.is_empty() {
        cfg.reduce.methods = c.methods.clone();
    }
    if let Some(k) = c.k {
        cfg.cluster.k = k;
    }
    if let Some(p) = c.p {
        cfg.dateline.p = p;
    }
    Ok(cfg)
}

fn single_stage(common: &Common, stage: Stage) -> Result<(), StageError> {
    let mut cfg = resolve_config(common).map_err(|source| StageError { stage: None, source })?;
    cfg.stages = StageSwitches::only(stage);
    cfg.validate().map_err(|source| StageError { stage: None, source })?;
    run_stage(&cfg, stage).map_err(|source| StageError {
        stage: Some(stage),
        source,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(c) => single_stage(c, Stage::Ingest),
        Command::Chunk(c) => single_stage(c, Stage::Chunk),
        Command::Embed(c) => single_stage(c, Stage::Embed),
        Command::Reduce(c) => single_stage(c, Stage::Reduce),
        Command::Cluster(c) => single_stage(c, Stage::Cluster),
        Command::Changepoint(c) => single_stage(c, Stage::Changepoint),
        Command::Attribute(c) => single_stage(c, Stage::Attribute),
        Command::Dateline(c) => single_stage(c, Stage::Dateline),
        Command::Report(c) => single_stage(c, Stage::Report),
        Command::Pipeline(c) => resolve_config(c)
            .map_err(|source| StageError { stage: None, source })
            .and_then(|cfg| run_pipeline(&cfg).map(|_| ())),
        Command::SynthCorpus {
            out,
            authors,
            docs_per_author,
            seed,
        } => {
            let spec = TextCorpusSpec {
                authors: *authors,
                docs_per_author: *docs_per_author,
                seed: *seed,
                ..Default::default()
            };
            write_text_corpus(out, &spec).map_err(|source| StageError { stage: None, source })
        }
        Command::DefaultConfig => PipelineConfig::default()
            .to_toml()
            .map(|t| print!("{t}"))
            .map_err(|source| StageError { stage: None, source }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
