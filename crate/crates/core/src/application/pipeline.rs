//! Staged, resumable pipeline over files in one output directory.
//!
//! Every stage declares its input and output files. The manifest records
//! their checksums together with a hash of the configuration the stage
//! depends on; a stage whose outputs are intact and whose inputs and
//! configuration are unchanged is skipped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::{evaluate, index_over, rich_pool, EvalInputs};
use super::{select_threshold, Reformulator};
use crate::ance::{
    read_hard_negatives, run_retriever_rounds, teach_reranker, write_hard_negatives, AnceConfig, AnceInputs,
};
use crate::corpus::{self, Corpus, QueryId, DEFAULT_MIN_PURCHASE, DEFAULT_RICH_THRESHOLD};
use crate::encoders::{BiEncoder, BiEncoderConfig, CrossEncoder, CrossEncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::{read_audit_labels, EvalReport};
use crate::mining::{self, CoPurchaseGraph, MiningMode, QueryPair, DEFAULT_FLOOR};
use crate::normalizer::{self, NormalizationConfig, Normalizer, QueryGroup};
use crate::synthgen::{self, SynthConfig, SynthGroundTruth};
use crate::training::{
    train_reranker_pointwise, train_retriever, LossTrace, RetrievalContext, RetrievalExample, TrainConfig,
};
use crate::util::{file_checksum, parse_field, read_versioned, sha256_hex, split_fields, version_header, write_lines};

const MANIFEST_HEADER: &str = "# qr manifest v1";
const TEST_QUERIES_KIND: &str = "test-queries";
const PAIR_COUNTS_KIND: &str = "pair-counts";
const THRESHOLD_KIND: &str = "threshold";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Ingest,
    Normalize,
    Mine,
    TrainRetriever,
    Ance,
    TrainReranker,
    Index,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Normalize,
        Stage::Mine,
        Stage::TrainRetriever,
        Stage::Ance,
        Stage::TrainReranker,
        Stage::Index,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Normalize => "normalize",
            Stage::Mine => "mine",
            Stage::TrainRetriever => "train-retriever",
            Stage::Ance => "ance",
            Stage::TrainReranker => "train-reranker",
            Stage::Index => "index",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synth,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub min_purchase: u64,
    pub rich_threshold: u64,
    pub n_test_queries: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_purchase: DEFAULT_MIN_PURCHASE,
            rich_threshold: DEFAULT_RICH_THRESHOLD,
            n_test_queries: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub floor: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { floor: DEFAULT_FLOOR }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApplicationConfig {
    /// Retrieval depth for evaluation, threshold selection and serving.
    pub top_k: usize,
    pub n_max: usize,
    /// Fixed re-rank threshold; chosen on validation data when absent.
    pub threshold: Option<f64>,
    /// Validation anchors used for threshold selection.
    pub threshold_anchors: usize,
    pub augmentation: super::AugmentationParams,
}

impl Default for ApplicationConfig {
    fn default() -> Self {
        Self {
            top_k: 100,
            n_max: 10,
            threshold: None,
            threshold_anchors: 200,
            augmentation: Default::default(),
        }
    }
}

/// Full pipeline configuration. Every component seed is derived from
/// `seed`, so one number fixes a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub source: DataSource,
    /// Behavior log, when `source = "log"`.
    pub log_path: Option<PathBuf>,
    /// Normalizer config file; synthetic runs use the generated one.
    pub normalizer_path: Option<PathBuf>,
    /// Audit labels; synthetic runs use the generated ones.
    pub audit_path: Option<PathBuf>,
    pub synth: SynthConfig,
    pub corpus: CorpusConfig,
    pub mining: MiningConfig,
    pub bi_encoder: BiEncoderConfig,
    pub cross_encoder: CrossEncoderConfig,
    pub retriever: TrainConfig,
    /// Defaults to [`RERANKER_EPOCHS`] epochs; a partial `[reranker]` table
    /// falls back to the generic training defaults for missing keys.
    pub reranker: TrainConfig,
    /// Circle-loss fine-tuning of the re-ranker on mined negatives.
    pub circle: TrainConfig,
    pub ance: AnceConfig,
    pub application: ApplicationConfig,
}

/// The joint-feature MLP converges far slower than the linear retriever.
pub const RERANKER_EPOCHS: usize = 60;

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source: DataSource::Synth,
            log_path: None,
            normalizer_path: None,
            audit_path: None,
            synth: SynthConfig::default(),
            corpus: CorpusConfig::default(),
            mining: MiningConfig::default(),
            bi_encoder: BiEncoderConfig::default(),
            cross_encoder: CrossEncoderConfig::default(),
            retriever: TrainConfig::default(),
            reranker: TrainConfig { epochs: RERANKER_EPOCHS, ..Default::default() },
            circle: TrainConfig { epochs: RERANKER_EPOCHS, ..Default::default() },
            ance: AnceConfig::default(),
            application: ApplicationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with every component seed derived from the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.synth.seed = s;
        c.bi_encoder.seed = s.wrapping_add(1);
        c.cross_encoder.seed = s.wrapping_add(2);
        c.retriever.seed = s.wrapping_add(3);
        c.reranker.seed = s.wrapping_add(4);
        c.circle.seed = s.wrapping_add(5);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.source == DataSource::Synth {
            self.synth.validate()?;
        } else if self.log_path.is_none() {
            return Err(Error::Config("source = \"log\" needs log_path".into()));
        }
        for t in [&self.retriever, &self.reranker, &self.circle] {
            t.validate()?;
        }
        if self.application.top_k == 0 || self.application.n_max == 0 {
            return Err(Error::Config("top_k and n_max must be positive".into()));
        }
        Ok(())
    }

    fn hash(&self) -> String {
        sha256_hex(self.to_toml().unwrap_or_default().as_bytes())
    }

    fn stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| *s != Stage::Synth || self.source == DataSource::Synth)
            .collect()
    }

    /// Hash of the configuration one stage depends on.
    fn stage_hash(&self, stage: Stage) -> String {
        let parts: Vec<String> = match stage {
            Stage::Synth => vec![toml_of(&self.synth)],
            Stage::Ingest => vec![self.corpus.min_purchase.to_string(), self.corpus.rich_threshold.to_string()],
            Stage::Normalize => vec![format!("{:?}", self.normalizer_path)],
            Stage::Mine => vec![toml_of(&self.mining), toml_of(&self.corpus), self.seed.to_string()],
            Stage::TrainRetriever => vec![toml_of(&self.bi_encoder), toml_of(&self.retriever)],
            Stage::Ance => vec![toml_of(&self.ance), toml_of(&self.retriever)],
            Stage::TrainReranker => vec![
                toml_of(&self.cross_encoder),
                toml_of(&self.reranker),
                toml_of(&self.circle),
                self.ance.rounds.to_string(),
            ],
            Stage::Index => vec![toml_of(&self.application), self.ance.rounds.to_string()],
            Stage::Evaluate => vec![toml_of(&self.application), format!("{:?}", self.audit_path)],
        };
        sha256_hex(parts.join("\n").as_bytes())
    }
}

fn toml_of<T: Serialize>(value: &T) -> String {
    toml::to_string(value).unwrap_or_default()
}

/// File layout of one pipeline run.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
    pub config: PipelineConfig,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, config: &PipelineConfig) -> Self {
        Self {
            root: root.into(),
            config: config.resolved(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.path("synth")
    }

    pub fn log(&self) -> PathBuf {
        match (&self.config.source, &self.config.log_path) {
            (DataSource::Log, Some(p)) => p.clone(),
            _ => self.synth_dir().join(synthgen::LOG_FILE),
        }
    }

    pub fn normalizer_config(&self) -> Option<PathBuf> {
        match self.config.source {
            DataSource::Synth => Some(self.synth_dir().join(synthgen::NORMALIZER_FILE)),
            DataSource::Log => self.config.normalizer_path.clone(),
        }
    }

    pub fn audit(&self) -> Option<PathBuf> {
        match (&self.config.audit_path, self.config.source) {
            (Some(p), _) => Some(p.clone()),
            (None, DataSource::Synth) => Some(self.synth_dir().join(synthgen::AUDIT_FILE)),
            (None, DataSource::Log) => None,
        }
    }

    fn truth_files(&self) -> (PathBuf, PathBuf) {
        let d = self.synth_dir();
        (d.join(synthgen::TRUTH_QUERIES_FILE), d.join(synthgen::TRUTH_INTENTS_FILE))
    }

    pub fn corpus_files(&self) -> (PathBuf, PathBuf) {
        (self.path("corpus/queries.tsv"), self.path("corpus/events.tsv"))
    }

    pub fn normalized_files(&self) -> (PathBuf, PathBuf) {
        (self.path("normalized/queries.tsv"), self.path("normalized/events.tsv"))
    }

    pub fn pairs(&self, mode: MiningMode) -> PathBuf {
        match mode {
            MiningMode::Proposed => self.path("mining/proposed.tsv"),
            MiningMode::BaselineTop30 => self.path("mining/baseline.tsv"),
        }
    }

    pub fn test_queries(&self) -> PathBuf {
        self.path("mining/test_queries.tsv")
    }

    pub fn pair_counts(&self) -> PathBuf {
        self.path("mining/pair_counts.tsv")
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.path(&format!("models/{name}.ckpt"))
    }

    pub fn trace(&self, name: &str) -> PathBuf {
        self.path(&format!("traces/{name}.tsv"))
    }

    pub fn hard_negatives(&self, round: usize) -> PathBuf {
        self.path(&format!("ance/round{round}.tsv"))
    }

    pub fn index(&self) -> PathBuf {
        self.path("index/final.idx")
    }

    pub fn threshold(&self) -> PathBuf {
        self.path("index/threshold.tsv")
    }

    pub fn report(&self) -> PathBuf {
        self.path("report.tsv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.path("manifest.toml")
    }

    pub fn read_test_queries(&self) -> Result<BTreeSet<QueryId>> {
        read_test_queries(&self.test_queries())
    }

    pub fn read_threshold(&self) -> Result<f64> {
        read_threshold(&self.threshold())
    }

    /// Retriever names in training order: baseline, importance, ANCE rounds.
    pub fn retriever_names(&self) -> Vec<String> {
        (1..=2 + self.config.ance.rounds).map(|i| format!("rt{i}")).collect()
    }

    /// Re-ranker names: pointwise, then circle fine-tuning when ANCE runs.
    pub fn reranker_names(&self) -> Vec<String> {
        let mut names = vec!["rr1".to_string()];
        if self.config.ance.rounds > 0 {
            names.push("rr3".to_string());
        }
        names
    }

    pub fn final_retriever(&self) -> PathBuf {
        self.model(self.retriever_names().last().expect("at least two retrievers"))
    }

    pub fn final_reranker(&self) -> PathBuf {
        self.model(self.reranker_names().last().expect("at least one reranker"))
    }

    fn normalizer_inputs(&self) -> Vec<PathBuf> {
        let Some(cfg) = self.normalizer_config() else {
            return Vec::new();
        };
        let dir = cfg.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map(|it| it.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file()).collect())
            .unwrap_or_default();
        if !files.contains(&cfg) {
            files.push(cfg);
        }
        files.sort();
        files
    }

    pub fn inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let (nq, ne) = self.normalized_files();
        let mined = vec![nq.clone(), ne.clone(), self.pairs(MiningMode::Proposed), self.test_queries()];
        let rounds = self.config.ance.rounds;
        match stage {
            Stage::Synth => Vec::new(),
            Stage::Ingest => vec![self.log()],
            Stage::Normalize => {
                let (q, e) = self.corpus_files();
                let mut v = vec![q, e];
                v.extend(self.normalizer_inputs());
                v
            }
            Stage::Mine => vec![nq, ne],
            Stage::TrainRetriever => {
                let mut v = mined;
                v.push(self.pairs(MiningMode::BaselineTop30));
                v
            }
            Stage::Ance => {
                let mut v = mined;
                v.push(self.model("rt2"));
                v
            }
            Stage::TrainReranker => {
                let mut v = mined;
                if rounds > 0 {
                    v.push(self.hard_negatives(rounds));
                }
                v
            }
            Stage::Index => {
                let mut v = mined;
                v.push(self.final_retriever());
                v.push(self.final_reranker());
                v
            }
            Stage::Evaluate => {
                let mut v = mined;
                v.extend(self.retriever_names().iter().map(|n| self.model(n)));
                v.extend(self.reranker_names().iter().map(|n| self.model(n)));
                v.push(self.threshold());
                v.push(self.pair_counts());
                v.extend(self.audit());
                if self.config.source == DataSource::Synth {
                    let (a, b) = self.truth_files();
                    v.extend([a, b]);
                }
                v
            }
        }
    }

    pub fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        let rounds = self.config.ance.rounds;
        let models_and_traces = |names: &[String]| -> Vec<PathBuf> {
            names.iter().flat_map(|n| [self.model(n), self.trace(n)]).collect()
        };
        match stage {
            Stage::Synth => {
                let d = self.synth_dir();
                let (a, b) = self.truth_files();
                vec![
                    d.join(synthgen::LOG_FILE),
                    a,
                    b,
                    d.join(synthgen::AUDIT_FILE),
                    d.join(synthgen::NORMALIZER_FILE),
                ]
            }
            Stage::Ingest => {
                let (q, e) = self.corpus_files();
                vec![q, e]
            }
            Stage::Normalize => {
                let (q, e) = self.normalized_files();
                vec![q, e]
            }
            Stage::Mine => vec![
                self.pairs(MiningMode::Proposed),
                self.pairs(MiningMode::BaselineTop30),
                self.test_queries(),
                self.pair_counts(),
            ],
            Stage::TrainRetriever => models_and_traces(&["rt1".into(), "rt2".into()]),
            Stage::Ance => {
                let names: Vec<String> = self.retriever_names().into_iter().skip(2).collect();
                let mut v = models_and_traces(&names);
                v.extend((1..=rounds).map(|r| self.hard_negatives(r)));
                v
            }
            Stage::TrainReranker => models_and_traces(&self.reranker_names()),
            Stage::Index => vec![self.index(), self.threshold()],
            Stage::Evaluate => vec![self.report()],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub seconds: f64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.lines().next() != Some(MANIFEST_HEADER) {
            return Err(Error::parse(path, 1, format!("expected header `{MANIFEST_HEADER}`")));
        }
        toml::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, format!("{MANIFEST_HEADER}\n{body}")).map_err(|e| Error::io(path, e))
    }
}

fn checksums(root: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|f| {
            let key = f.strip_prefix(root).unwrap_or(f).display().to_string();
            Ok((key, file_checksum(f)?))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub manifest: Manifest,
}

/// Run every stage in order, skipping those that are up to date.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<PipelineOutcome> {
    let ws = Workspace::new(out_dir, config);
    ws.config.validate()?;
    let mut manifest = Manifest::load(&ws.manifest())?.unwrap_or_default();
    manifest.config_hash = ws.config.hash();
    manifest.seed = ws.config.seed;
    let (mut ran, mut skipped) = (Vec::new(), Vec::new());
    for stage in ws.config.stages() {
        if run_stage(&ws, stage, &mut manifest)? {
            ran.push(stage);
        } else {
            skipped.push(stage);
        }
        manifest.save(&ws.manifest())?;
    }
    let report = EvalReport::load(&ws.report())?;
    Ok(PipelineOutcome {
        report,
        ran,
        skipped,
        manifest,
    })
}

/// Run one stage unless it is up to date. Returns whether it ran.
pub fn run_stage(ws: &Workspace, stage: Stage, manifest: &mut Manifest) -> Result<bool> {
    let wrap = |e: Error| Error::Stage {
        stage: stage.name().to_string(),
        source: Box::new(e),
    };
    let inputs = ws.inputs(stage);
    if let Some(missing) = inputs.iter().find(|p| !p.exists()) {
        return Err(wrap(Error::Config(format!("missing input {}", missing.display()))));
    }
    let input_sums = checksums(&ws.root, &inputs).map_err(wrap)?;
    let config_hash = ws.config.stage_hash(stage);
    let outputs = ws.outputs(stage);
    if let Some(rec) = manifest.stages.get(stage.name()) {
        let fresh = rec.config_hash == config_hash
            && rec.inputs == input_sums
            && outputs.iter().all(|p| p.exists())
            && checksums(&ws.root, &outputs).ok().as_ref() == Some(&rec.outputs);
        if fresh {
            return Ok(false);
        }
    }
    let start = Instant::now();
    execute(ws, stage).map_err(wrap)?;
    let record = StageRecord {
        config_hash,
        seconds: start.elapsed().as_secs_f64(),
        inputs: input_sums,
        outputs: checksums(&ws.root, &outputs).map_err(wrap)?,
    };
    manifest.stages.insert(stage.name().to_string(), record);
    Ok(true)
}

fn execute(ws: &Workspace, stage: Stage) -> Result<()> {
    let cfg = &ws.config;
    match stage {
        Stage::Synth => synthgen::write_output(&synthgen::generate(&cfg.synth)?, &ws.synth_dir()),
        Stage::Ingest => {
            let rows = corpus::parse_log(&ws.log())?;
            let corpus = Corpus::from_rows(&rows, cfg.corpus.min_purchase, cfg.corpus.rich_threshold)?;
            let (q, e) = ws.corpus_files();
            corpus.save(&q, &e)
        }
        Stage::Normalize => {
            let (q, e) = ws.corpus_files();
            let mut corpus = Corpus::load(&q, &e)?;
            let config = match ws.normalizer_config() {
                Some(p) => NormalizationConfig::load(&p)?,
                None => NormalizationConfig::default(),
            };
            normalizer::group_queries(&mut corpus, &Normalizer::new(config)?);
            let (q, e) = ws.normalized_files();
            corpus.save(&q, &e)
        }
        Stage::Mine => mine_stage(ws),
        Stage::TrainRetriever => train_retriever_stage(ws),
        Stage::Ance => ance_stage(ws),
        Stage::TrainReranker => train_reranker_stage(ws),
        Stage::Index => index_stage(ws),
        Stage::Evaluate => evaluate_stage(ws),
    }
}

fn load_normalized(ws: &Workspace) -> Result<Corpus> {
    let (q, e) = ws.normalized_files();
    Corpus::load(&q, &e)
}

fn mine_stage(ws: &Workspace) -> Result<()> {
    let cfg = &ws.config;
    let corpus = load_normalized(ws)?;
    let min = cfg.corpus.min_purchase;
    let floor = cfg.mining.floor;
    let groups = normalizer::groups_from_normalized(&corpus);
    let copurchase = mining::group_copurchase(&groups, min);
    let proposed = mining::mine_pairs(&groups, &copurchase, min, floor, MiningMode::Proposed)?;
    let baseline = mining::mine_pairs(&groups, &copurchase, min, floor, MiningMode::BaselineTop30)?;
    let singletons = normalizer::singleton_groups(&corpus);
    let ungrouped = mining::mine_pairs(
        &singletons,
        &mining::group_copurchase(&singletons, min),
        min,
        floor,
        MiningMode::Proposed,
    )?;
    let split = corpus::make_split(&proposed, cfg.corpus.n_test_queries, cfg.seed)?;
    mining::write_pairs(&ws.pairs(MiningMode::Proposed), &proposed)?;
    mining::write_pairs(&ws.pairs(MiningMode::BaselineTop30), &baseline)?;
    write_lines(
        &ws.test_queries(),
        &version_header(TEST_QUERIES_KIND),
        split.test_query_ids.iter().map(|q| q.to_string()),
    )?;
    write_lines(
        &ws.pair_counts(),
        &version_header(PAIR_COUNTS_KIND),
        [
            format!("grouped\t{}", proposed.len()),
            format!("ungrouped\t{}", ungrouped.len()),
        ],
    )
}

fn read_test_queries(path: &Path) -> Result<BTreeSet<QueryId>> {
    read_versioned(path, TEST_QUERIES_KIND)?
        .into_iter()
        .map(|(n, line)| parse_field(path, n, &line, "query id"))
        .collect()
}

fn read_pair_counts(path: &Path) -> Result<BTreeMap<String, usize>> {
    read_versioned(path, PAIR_COUNTS_KIND)?
        .into_iter()
        .map(|(n, line)| {
            let f = split_fields(path, n, &line, 2)?;
            Ok((f[0].to_string(), parse_field(path, n, f[1], "count")?))
        })
        .collect()
}

fn read_threshold(path: &Path) -> Result<f64> {
    let lines = read_versioned(path, THRESHOLD_KIND)?;
    let (n, line) = lines
        .first()
        .ok_or_else(|| Error::parse(path, 2, "missing threshold value"))?;
    parse_field(path, *n, line, "threshold")
}

/// Everything the training stages share, rebuilt from stage outputs.
struct Prepared {
    corpus: Corpus,
    texts: Vec<String>,
    graph: CoPurchaseGraph,
    test_queries: BTreeSet<QueryId>,
    pairs: Vec<QueryPair>,
    train: Vec<QueryPair>,
    validation: Vec<QueryPair>,
    /// Queries whose group keeps purchases after the filter.
    with_behavior: BTreeSet<QueryId>,
}

impl Prepared {
    fn load(ws: &Workspace, mode: MiningMode) -> Result<Self> {
        let corpus = load_normalized(ws)?;
        let groups: Vec<QueryGroup> = normalizer::groups_from_normalized(&corpus);
        let copurchase = mining::group_copurchase(&groups, ws.config.corpus.min_purchase);
        let graph = CoPurchaseGraph::new(corpus.len(), &groups, &copurchase);
        let test_queries = ws.read_test_queries()?;
        let pairs = mining::read_pairs(&ws.pairs(mode))?;
        let split = corpus::split_with_test_queries(&pairs, test_queries.clone(), ws.config.seed);
        let texts = corpus.queries().iter().map(|q| q.raw_text.clone()).collect();
        let min_purchase = ws.config.corpus.min_purchase;
        let with_behavior = groups
            .iter()
            .filter(|g| !g.behavior(min_purchase).is_empty())
            .flat_map(|g| g.member_query_ids.iter().copied())
            .collect();
        Ok(Self {
            corpus,
            texts,
            graph,
            test_queries,
            pairs,
            train: split.train,
            validation: split.validation,
            with_behavior,
        })
    }

    fn context(&self) -> RetrievalContext {
        let ids: HashMap<String, QueryId> = self.corpus.queries().iter().map(|q| (q.raw_text.clone(), q.id)).collect();
        RetrievalContext::with_graph(ids, self.graph.clone())
    }

    /// Proposed pairs are unordered and train in both directions; baseline
    /// pairs are already directed.
    fn examples(&self, pairs: &[QueryPair], mode: MiningMode) -> Vec<RetrievalExample> {
        let mut out = Vec::with_capacity(pairs.len() * 2);
        for p in pairs {
            let mut push = |a: QueryId, b: QueryId| {
                out.push(RetrievalExample {
                    anchor: self.texts[a.index()].clone(),
                    positive: self.texts[b.index()].clone(),
                    importance: p.importance,
                })
            };
            push(p.source, p.target);
            if mode == MiningMode::Proposed {
                push(p.target, p.source);
            }
        }
        out
    }

    fn pointwise(&self, pairs: &[QueryPair]) -> Vec<(String, String, f64)> {
        pairs
            .iter()
            .flat_map(|p| {
                let (s, t) = (&self.texts[p.source.index()], &self.texts[p.target.index()]);
                [
                    (s.clone(), t.clone(), p.rerank_target_fwd),
                    (t.clone(), s.clone(), p.rerank_target_rev),
                ]
            })
            .collect()
    }

    fn rerank_positives(pairs: &[QueryPair]) -> BTreeMap<QueryId, Vec<(QueryId, f64)>> {
        let mut out: BTreeMap<QueryId, Vec<(QueryId, f64)>> = BTreeMap::new();
        for p in pairs {
            out.entry(p.source).or_default().push((p.target, p.rerank_target_fwd));
            out.entry(p.target).or_default().push((p.source, p.rerank_target_rev));
        }
        out
    }
}

fn save_model_bi(ws: &Workspace, name: &str, model: &BiEncoder, trace: &LossTrace) -> Result<()> {
    model.save(&ws.model(name))?;
    trace.save(&ws.trace(name))
}

fn train_retriever_stage(ws: &Workspace) -> Result<()> {
    let cfg = &ws.config;
    let proposed = Prepared::load(ws, MiningMode::Proposed)?;
    let baseline = Prepared::load(ws, MiningMode::BaselineTop30)?;
    let init = BiEncoder::new(cfg.bi_encoder.clone())?;
    let context = proposed.context();
    let run = |data: &Prepared, mode: MiningMode| -> Result<(BiEncoder, LossTrace)> {
        let mut model = init.clone();
        let train = data.examples(&data.train, mode);
        let val = data.examples(&data.validation, mode);
        let trace = train_retriever(&mut model, &train, &val, &context, &cfg.retriever)?;
        Ok((model, trace))
    };
    let (rt1, rt2) = rayon::join(
        || run(&baseline, MiningMode::BaselineTop30),
        || run(&proposed, MiningMode::Proposed),
    );
    let (rt1, rt1_trace) = rt1?;
    let (rt2, rt2_trace) = rt2?;
    save_model_bi(ws, "rt1", &rt1, &rt1_trace)?;
    save_model_bi(ws, "rt2", &rt2, &rt2_trace)
}

fn ance_anchor_pool(data: &Prepared) -> (Vec<QueryId>, Vec<QueryId>) {
    let anchors: BTreeSet<QueryId> = data
        .train
        .iter()
        .chain(&data.validation)
        .flat_map(|p| [p.source, p.target])
        .collect();
    let candidates: Vec<QueryId> = data
        .with_behavior
        .iter()
        .filter(|q| !data.test_queries.contains(q))
        .copied()
        .collect();
    (anchors.into_iter().collect(), candidates)
}

fn ance_stage(ws: &Workspace) -> Result<()> {
    let cfg = &ws.config;
    let data = Prepared::load(ws, MiningMode::Proposed)?;
    let rt2 = BiEncoder::load(&ws.model("rt2"))?;
    let train = data.examples(&data.train, MiningMode::Proposed);
    let validation = data.examples(&data.validation, MiningMode::Proposed);
    let (anchors, candidates) = ance_anchor_pool(&data);
    let inputs = AnceInputs {
        texts: &data.texts,
        graph: &data.graph,
        anchors,
        candidates,
        train: &train,
        validation: &validation,
        context: data.context(),
        rerank_train: BTreeMap::new(),
        rerank_validation: BTreeMap::new(),
    };
    let rounds = run_retriever_rounds(rt2, &inputs, &cfg.ance, &cfg.retriever)?;
    for r in &rounds {
        save_model_bi(ws, &format!("rt{}", r.round + 2), &r.model, &r.trace)?;
        write_hard_negatives(&ws.hard_negatives(r.round), &r.hard_negatives)?;
    }
    Ok(())
}

fn train_reranker_stage(ws: &Workspace) -> Result<()> {
    let cfg = &ws.config;
    let data = Prepared::load(ws, MiningMode::Proposed)?;
    let mut rr1 = CrossEncoder::new(cfg.cross_encoder.clone())?;
    let trace = train_reranker_pointwise(
        &mut rr1,
        &data.pointwise(&data.train),
        &data.pointwise(&data.validation),
        &cfg.reranker,
    )?;
    rr1.save(&ws.model("rr1"))?;
    trace.save(&ws.trace("rr1"))?;
    if cfg.ance.rounds > 0 {
        let negatives = read_hard_negatives(&ws.hard_negatives(cfg.ance.rounds))?;
        let mut rr3 = rr1.clone();
        let trace = teach_reranker(
            &mut rr3,
            &data.texts,
            &negatives,
            &Prepared::rerank_positives(&data.train),
            &Prepared::rerank_positives(&data.validation),
            &cfg.circle,
        )?
        .unwrap_or_default();
        rr3.save(&ws.model("rr3"))?;
        trace.save(&ws.trace("rr3"))?;
    }
    Ok(())
}

fn index_stage(ws: &Workspace) -> Result<()> {
    let cfg = &ws.config;
    let data = Prepared::load(ws, MiningMode::Proposed)?;
    let bi = BiEncoder::load(&ws.final_retriever())?;
    let cross = CrossEncoder::load(&ws.final_reranker())?;
    let index = index_over(&bi, &data.corpus, &rich_pool(&data.corpus))?;
    index.save(&ws.index())?;
    let threshold = match cfg.application.threshold {
        Some(t) => t,
        None => {
            let reformulator = Reformulator {
                bi_encoder: &bi,
                cross_encoder: &cross,
                index: &index,
                texts: &data.texts,
                top_k: cfg.application.top_k,
                threshold: 0.0,
                n_max: cfg.application.n_max,
            };
            validation_threshold(&data, &reformulator, cfg.application.threshold_anchors)?
        }
    };
    write_lines(&ws.threshold(), &version_header(THRESHOLD_KIND), [threshold.to_string()])
}

/// F1-optimal threshold over retrieved candidates of validation anchors,
/// labeled by co-purchase.
fn validation_threshold(
    data: &Prepared,
    reformulator: &Reformulator<'_, BiEncoder, CrossEncoder>,
    max_anchors: usize,
) -> Result<f64> {
    use rayon::prelude::*;
    let anchors: BTreeSet<QueryId> = data.validation.iter().flat_map(|p| [p.source, p.target]).collect();
    let anchors: Vec<QueryId> = anchors.into_iter().take(max_anchors).collect();
    let scored: Vec<Vec<(f64, bool)>> = anchors
        .par_iter()
        .map(|&a| {
            Ok(reformulator
                .candidates(&data.texts[a.index()])?
                .into_iter()
                .map(|(id, s)| (s, data.graph.related(a, id)))
                .collect())
        })
        .collect::<Result<_>>()?;
    select_threshold(&scored.concat())
}

fn evaluate_stage(ws: &Workspace) -> Result<()> {
    let cfg = &ws.config;
    let data = Prepared::load(ws, MiningMode::Proposed)?;
    let retrievers: Vec<(String, BiEncoder)> = ws
        .retriever_names()
        .into_iter()
        .map(|n| Ok((n.clone(), BiEncoder::load(&ws.model(&n))?)))
        .collect::<Result<_>>()?;
    let rerankers: Vec<(String, CrossEncoder)> = ws
        .reranker_names()
        .into_iter()
        .map(|n| Ok((n.clone(), CrossEncoder::load(&ws.model(&n))?)))
        .collect::<Result<_>>()?;
    let audit = match ws.audit() {
        Some(p) => read_audit_labels(&p)?,
        None => Vec::new(),
    };
    let truth = match cfg.source {
        DataSource::Synth => {
            let (a, b) = ws.truth_files();
            Some(SynthGroundTruth::load(&a, &b)?)
        }
        DataSource::Log => None,
    };
    let mut report = evaluate(&EvalInputs {
        corpus: &data.corpus,
        pairs: &data.pairs,
        test_queries: &data.test_queries,
        retrievers: retrievers.iter().map(|(n, m)| (n.clone(), m)).collect(),
        rerankers: rerankers.iter().map(|(n, m)| (n.clone(), m)).collect(),
        audit: &audit,
        synth_truth: truth.as_ref(),
        top_k: cfg.application.top_k,
        n_max: cfg.application.n_max,
        threshold: ws.read_threshold()?,
    })?;
    for (k, v) in read_pair_counts(&ws.pair_counts())? {
        report.set_count("mining", &format!("pairs_{k}"), v);
    }
    report.save(&ws.report())
}
