use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use qr_core::application::{
    augment_for_tier, evaluate, run_pipeline, run_stage, AugmentationParams, EvalInputs, Manifest, PipelineConfig,
    Reformulator, Stage, Workspace,
};
use qr_core::corpus::{Corpus, TrafficTier};
use qr_core::encoders::{BiEncoder, CrossEncoder};
use qr_core::evaluation::{read_audit_labels, EvalReport};
use qr_core::mining::{read_pairs, MiningMode};
use qr_core::retrieval_index::KnnIndex;
use qr_core::{Error, Result as CoreResult};

#[derive(Parser)]
#[command(name = "qr", version, about = "Query reformulation pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding all artifacts of a run.
    #[arg(long, global = true, default_value = "qr-out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic behavior log with ground truth.
    SynthGen,
    /// Ingest a behavior log into a corpus.
    Ingest {
        /// Behavior log to ingest instead of the synthetic one.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Drop events with fewer purchases.
        #[arg(long)]
        min_purchase: Option<u64>,
    },
    /// Normalize queries and group surface variants.
    Normalize {
        /// Normalizer config file.
        #[arg(long)]
        normalizer: Option<PathBuf>,
    },
    /// Mine scored query pairs from co-purchases.
    Mine {
        /// Pair set to summarize; both are always written.
        #[arg(long, value_enum, default_value = "proposed")]
        mode: Mode,
        /// Minimum importance a pair needs to survive.
        #[arg(long)]
        floor: Option<f64>,
    },
    /// Train the baseline and importance-weighted retrievers.
    TrainRetriever {
        /// Epochs per retriever.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Hard-negative rounds for the retriever.
    Ance {
        #[arg(long)]
        rounds: Option<usize>,
        /// Neighbors retrieved per anchor when mining negatives.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Train the pointwise re-ranker and its circle-loss fine-tune.
    TrainReranker {
        /// Epochs of the pointwise run.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Build the serving index and pick the re-rank threshold.
    Index,
    /// Reformulate queries with the served models.
    Reformulate {
        /// Query text; may be repeated.
        #[arg(long = "query", required = true)]
        queries: Vec<String>,
        /// Candidates retrieved before re-ranking.
        #[arg(long)]
        top_k: Option<usize>,
        /// Minimum sigmoid re-rank score; defaults to the selected one.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Evaluate all models, or one checkpoint with --model and --mode.
    Evaluate {
        /// Checkpoint file.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<EvalMode>,
    },
    /// Blend a behavioral feature with its reformulations' features.
    Augment {
        /// Feature value of the query itself.
        #[arg(long)]
        source: f64,
        /// Comma-separated target features.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<f64>,
        /// Weight of the query's own feature.
        #[arg(long)]
        alpha: Option<f64>,
        /// Scale of the reformulation mean.
        #[arg(long)]
        beta: Option<f64>,
        /// Treat the query as behavior-rich (skipped when tail-only).
        #[arg(long)]
        rich: bool,
    },
    /// Run every stage, skipping those already up to date.
    Run,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Proposed,
    Baseline,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Retrieval,
    Rerank,
    Audit,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(global: &Global) -> Result<PipelineConfig> {
    let mut config = match &global.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn stage(config: &PipelineConfig, out_dir: &Path, stage: Stage) -> Result<()> {
    let ws = Workspace::new(out_dir, config);
    ws.config.validate()?;
    let mut manifest = Manifest::load(&ws.manifest())?.unwrap_or_default();
    let ran = run_stage(&ws, stage, &mut manifest)?;
    manifest.save(&ws.manifest())?;
    println!("{stage}: {}", if ran { "done" } else { "up to date" });
    Ok(())
}

/// Attach a stage name to errors raised outside the pipeline runner.
fn in_stage<T>(name: &str, r: CoreResult<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        },
    })
    .map_err(Into::into)
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli.global)?;
    let out = cli.global.out_dir.clone();
    match cli.command {
        Command::SynthGen => stage(&config, &out, Stage::Synth),
        Command::Ingest { log, min_purchase } => {
            if let Some(log) = log {
                config.source = qr_core::application::DataSource::Log;
                config.log_path = Some(log);
            }
            if let Some(m) = min_purchase {
                config.corpus.min_purchase = m;
            }
            stage(&config, &out, Stage::Ingest)
        }
        Command::Normalize { normalizer } => {
            if normalizer.is_some() {
                config.normalizer_path = normalizer;
            }
            stage(&config, &out, Stage::Normalize)
        }
        Command::Mine { mode, floor } => {
            if let Some(f) = floor {
                config.mining.floor = f;
            }
            stage(&config, &out, Stage::Mine)?;
            let ws = Workspace::new(&out, &config);
            let mode = match mode {
                Mode::Proposed => MiningMode::Proposed,
                Mode::Baseline => MiningMode::BaselineTop30,
            };
            let path = ws.pairs(mode);
            let n = in_stage("mine", read_pairs(&path))?.len();
            println!("{n} pairs in {}", path.display());
            Ok(())
        }
        Command::TrainRetriever { epochs } => {
            if let Some(e) = epochs {
                config.retriever.epochs = e;
            }
            stage(&config, &out, Stage::TrainRetriever)
        }
        Command::Ance { rounds, top_k } => {
            if let Some(r) = rounds {
                config.ance.rounds = r;
            }
            if let Some(k) = top_k {
                config.ance.top_k = k;
            }
            stage(&config, &out, Stage::Ance)
        }
        Command::TrainReranker { epochs } => {
            if let Some(e) = epochs {
                config.reranker.epochs = e;
            }
            stage(&config, &out, Stage::TrainReranker)
        }
        Command::Index => stage(&config, &out, Stage::Index),
        Command::Reformulate {
            queries,
            top_k,
            threshold,
        } => in_stage("reformulate", reformulate(&config, &out, &queries, top_k, threshold)),
        Command::Evaluate { model, mode } => match (model, mode) {
            (None, None) => {
                stage(&config, &out, Stage::Evaluate)?;
                let ws = Workspace::new(&out, &config);
                print!("{}", in_stage("evaluate", EvalReport::load(&ws.report()))?);
                Ok(())
            }
            (Some(model), Some(mode)) => {
                let report = in_stage("evaluate", evaluate_one(&config, &out, &model, mode))?;
                print!("{report}");
                Ok(())
            }
            _ => bail!("--model and --mode must be given together"),
        },
        Command::Augment {
            source,
            targets,
            alpha,
            beta,
            rich,
        } => {
            let defaults = &config.application.augmentation;
            let params = AugmentationParams {
                alpha: alpha.unwrap_or(defaults.alpha),
                beta: beta.unwrap_or(defaults.beta),
                ..defaults.clone()
            };
            let tier = if rich { TrafficTier::Rich } else { TrafficTier::Impoverished };
            let v = in_stage("augment", augment_for_tier(tier, source, &targets, &params))?;
            println!("{v}");
            Ok(())
        }
        Command::Run => {
            let outcome = run_pipeline(&config, &out)?;
            let names = |v: &[Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(",");
            println!("ran: {}", names(&outcome.ran));
            println!("skipped: {}", names(&outcome.skipped));
            print!("{}", outcome.report);
            Ok(())
        }
    }
}

fn load_corpus(ws: &Workspace) -> CoreResult<Corpus> {
    let (q, e) = ws.normalized_files();
    Corpus::load(&q, &e)
}

fn reformulate(
    config: &PipelineConfig,
    out: &Path,
    queries: &[String],
    top_k: Option<usize>,
    threshold: Option<f64>,
) -> CoreResult<()> {
    let ws = Workspace::new(out, config);
    let corpus = load_corpus(&ws)?;
    let texts: Vec<String> = corpus.queries().iter().map(|q| q.raw_text.clone()).collect();
    let bi = BiEncoder::load(&ws.final_retriever())?;
    let cross = CrossEncoder::load(&ws.final_reranker())?;
    let index = KnnIndex::load(&ws.index(), Some(&bi.checksum()))?;
    let threshold = match threshold {
        Some(t) => t,
        None => ws.read_threshold()?,
    };
    let reformulator = Reformulator {
        bi_encoder: &bi,
        cross_encoder: &cross,
        index: &index,
        texts: &texts,
        top_k: top_k.unwrap_or(ws.config.application.top_k),
        threshold,
        n_max: ws.config.application.n_max,
    };
    for q in queries {
        let result = reformulator.reformulate(q)?;
        println!("{}\t(threshold {:.4})", result.source, result.threshold);
        for (_, text, score) in &result.targets {
            println!("  {score:.4}\t{text}");
        }
    }
    Ok(())
}

fn evaluate_one(config: &PipelineConfig, out: &Path, model: &Path, mode: EvalMode) -> CoreResult<EvalReport> {
    let ws = Workspace::new(out, config);
    let corpus = load_corpus(&ws)?;
    let pairs = read_pairs(&ws.pairs(MiningMode::Proposed))?;
    let test_queries = ws.read_test_queries()?;
    let audit = match (mode, ws.audit()) {
        (EvalMode::Audit, Some(p)) => read_audit_labels(&p)?,
        (EvalMode::Audit, None) => return Err(Error::Config("no audit labels configured".into())),
        _ => Vec::new(),
    };
    let name = model
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let bi = BiEncoder::load(model);
    let (retriever, reranker) = match bi {
        Ok(bi) => (bi, None),
        Err(_) => (BiEncoder::load(&ws.final_retriever())?, Some(CrossEncoder::load(model)?)),
    };
    if mode == EvalMode::Rerank && reranker.is_none() {
        return Err(Error::InvalidArgument(format!("{} is not a re-ranker checkpoint", model.display())));
    }
    let retriever_name = if reranker.is_some() { "retriever".to_string() } else { name.clone() };
    let report = evaluate(&EvalInputs {
        corpus: &corpus,
        pairs: &pairs,
        test_queries: &test_queries,
        retrievers: vec![(retriever_name, &retriever)],
        rerankers: reranker.iter().map(|r| (name.clone(), r)).collect(),
        audit: &audit,
        synth_truth: None,
        top_k: ws.config.application.top_k,
        n_max: ws.config.application.n_max,
        threshold: 1.0,
    })?;
    let keep = |k: &str| {
        let metric = k.strip_prefix(&format!("{name}.")).unwrap_or("");
        match mode {
            EvalMode::Retrieval => metric.starts_with("recall"),
            EvalMode::Rerank => metric.starts_with("ndcg"),
            EvalMode::Audit => metric.starts_with("auroc") || metric.starts_with("spearman"),
        }
    };
    Ok(EvalReport {
        metrics: report.metrics.into_iter().filter(|(k, _)| keep(k)).collect(),
        counts: report.counts.into_iter().filter(|(k, _)| keep(k)).collect(),
    })
}
