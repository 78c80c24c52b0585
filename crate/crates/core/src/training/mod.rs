//! Training objectives, the Adam optimizer and a seeded epoch loop.

mod losses;

pub use losses::{
    circle_loss, loss_rerank_circle, loss_rerank_pointwise, loss_retrieval, pointwise_loss, softplus,
    weighted_info_nce, ContrastiveRow, RerankBatch, RetrievalBatch,
};

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QueryId;
use crate::encoders::{BiEncoder, CrossEncoder, Gradient, Parameterized};
use crate::mining::CoPurchaseGraph;
use crate::error::{Error, Result};
use crate::util::{parse_field, read_versioned, split_fields, write_lines};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Retrieval,
    RerankPointwise,
    RerankCircle,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(Objective::Retrieval),
            "rerank_pointwise" | "pointwise" => Ok(Objective::RerankPointwise),
            "rerank_circle" | "circle" => Ok(Objective::RerankCircle),
            _ => Err(Error::Config(format!("unknown objective `{s}`"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Retrieval => "retrieval",
            Objective::RerankPointwise => "rerank_pointwise",
            Objective::RerankCircle => "rerank_circle",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub temperature: f64,
    pub hard_negative_cap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            temperature: 0.05,
            hard_negative_cap: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Adam moments. Table rows are updated lazily: only rows present in a
/// gradient move, and their moments are allocated on first use.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub step: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    /// Per table row, the index of its moment block, or `u32::MAX`.
    table_slots: Vec<u32>,
    /// First and second moments, `2 * width` values per touched row.
    table_moments: Vec<f64>,
    dense_m: Vec<f64>,
    dense_v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            step: 0,
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            ..Default::default()
        }
    }

    pub fn apply<M: Parameterized>(&mut self, model: &mut M, grad: &Gradient) {
        self.step += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        let width = model.table_width();
        let table = model.table_mut();
        if self.table_slots.len() * width != table.len() {
            self.table_slots = vec![u32::MAX; table.len() / width.max(1)];
            self.table_moments.clear();
        }
        for (&row, g) in &grad.table.rows {
            let slot = &mut self.table_slots[row as usize];
            if *slot == u32::MAX {
                *slot = (self.table_moments.len() / (2 * width)) as u32;
                self.table_moments.resize(self.table_moments.len() + 2 * width, 0.0);
            }
            let start = *slot as usize * 2 * width;
            let (m, v) = self.table_moments[start..start + 2 * width].split_at_mut(width);
            let params = &mut table[row as usize * width..(row as usize + 1) * width];
            for c in 0..width {
                update(&mut params[c], g[c], &mut m[c], &mut v[c]);
            }
        }
        let mut dense = model.dense_mut();
        if self.dense_m.len() != dense.len() {
            self.dense_m = vec![0.0; dense.len()];
            self.dense_v = vec![0.0; dense.len()];
        }
        for (i, p) in dense.iter_mut().enumerate() {
            update(p, grad.dense[i], &mut self.dense_m[i], &mut self.dense_v[i]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Per-epoch losses; epoch 0 holds the losses of the initial model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub epochs: Vec<EpochLoss>,
}

impl LossTrace {
    pub fn initial(&self) -> Option<&EpochLoss> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochLoss> {
        self.epochs.last()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let fmt_val = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.8}"));
        write_lines(
            path,
            &crate::util::version_header("loss-trace"),
            std::iter::once("epoch\ttrain_loss\tval_loss".to_string()).chain(
                self.epochs
                    .iter()
                    .map(|e| format!("{}\t{:.8}\t{}", e.epoch, e.train_loss, fmt_val(e.val_loss))),
            ),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut epochs = Vec::new();
        for (line_no, line) in read_versioned(path, "loss-trace")? {
            if line.starts_with("epoch\t") {
                continue;
            }
            let f = split_fields(path, line_no, &line, 3)?;
            epochs.push(EpochLoss {
                epoch: parse_field(path, line_no, f[0], "epoch")?,
                train_loss: parse_field(path, line_no, f[1], "train_loss")?,
                val_loss: match f[2] {
                    "NA" => None,
                    v => Some(parse_field(path, line_no, v, "val_loss")?),
                },
            });
        }
        Ok(Self { epochs })
    }
}

fn mean_loss<M, E, F>(model: &M, set: &[E], batch_size: usize, loss: &F) -> Result<Option<f64>>
where
    F: Fn(&M, &[&E]) -> Result<(f64, Gradient)>,
{
    if set.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&E> = set.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size) {
        total += loss(model, chunk)?.0 * chunk.len() as f64;
    }
    Ok(Some(total / set.len() as f64))
}

/// Seeded minibatch Adam loop. `loss` maps a model and a batch to the batch
/// loss and its gradient.
pub fn train<M, E, F>(
    model: &mut M,
    train_set: &[E],
    validation: &[E],
    config: &TrainConfig,
    loss: F,
) -> Result<LossTrace>
where
    M: Parameterized,
    F: Fn(&M, &[&E]) -> Result<(f64, Gradient)>,
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let mut trace = LossTrace::default();
    trace.epochs.push(EpochLoss {
        epoch: 0,
        train_loss: mean_loss(model, train_set, config.batch_size, &loss)?.unwrap_or(f64::NAN),
        val_loss: mean_loss(model, validation, config.batch_size, &loss)?,
    });
    let mut optimizer = OptimizerState::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&E> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (l, grad) = loss(model, &batch)?;
            if !l.is_finite() || !grad.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("batch loss {l}, max |grad| {}", grad.max_abs()),
                });
            }
            optimizer.apply(model, &grad);
            total += l * batch.len() as f64;
        }
        let val_loss = mean_loss(model, validation, config.batch_size, &loss)?;
        if let Some(v) = val_loss.filter(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                step: 0,
                detail: format!("validation loss {v}"),
            });
        }
        trace.epochs.push(EpochLoss {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss,
        });
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalExample {
    pub anchor: String,
    pub positive: String,
    pub importance: f64,
}

/// Knowledge shared across retrieval batches: which texts are related (and
/// so never serve as each other's negatives) and mined hard negatives.
#[derive(Clone, Debug, Default)]
pub struct RetrievalContext {
    related: HashSet<(String, String)>,
    text_ids: HashMap<String, QueryId>,
    graph: CoPurchaseGraph,
    pub hard_negatives: HashMap<String, Vec<String>>,
}

impl RetrievalContext {
    pub fn new<'a>(related: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut ctx = Self::default();
        for (a, b) in related {
            ctx.add_related(a, b);
        }
        ctx
    }

    /// Relate texts through a co-purchase graph over their query ids.
    pub fn with_graph(text_ids: HashMap<String, QueryId>, graph: CoPurchaseGraph) -> Self {
        Self {
            text_ids,
            graph,
            ..Default::default()
        }
    }

    pub fn add_related(&mut self, a: &str, b: &str) {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.related.insert((key.0.to_string(), key.1.to_string()));
    }

    pub fn is_related(&self, a: &str, b: &str) -> bool {
        self.related_ids(self.text_ids.get(a).copied(), self.text_ids.get(b).copied())
            || self.related_texts(a, b)
    }

    fn related_ids(&self, a: Option<QueryId>, b: Option<QueryId>) -> bool {
        matches!((a, b), (Some(x), Some(y)) if self.graph.related(x, y))
    }

    fn related_texts(&self, a: &str, b: &str) -> bool {
        if self.related.is_empty() {
            return false;
        }
        let key = if a <= b { (a, b) } else { (b, a) };
        self.related.contains(&(key.0.to_string(), key.1.to_string()))
    }

    pub fn batch(&self, examples: &[&RetrievalExample], temperature: f64, hard_negative_cap: usize) -> RetrievalBatch {
        let mut batch = RetrievalBatch::new(
            examples.iter().map(|e| e.anchor.clone()).collect(),
            examples.iter().map(|e| e.positive.clone()).collect(),
            examples.iter().map(|e| e.importance).collect(),
            temperature,
        );
        let id = |t: &str| self.text_ids.get(t).copied();
        let anchor_ids: Vec<Option<QueryId>> = examples.iter().map(|e| id(&e.anchor)).collect();
        let positive_ids: Vec<Option<QueryId>> = examples.iter().map(|e| id(&e.positive)).collect();
        let n = examples.len();
        for (k, ek) in examples.iter().enumerate() {
            for (j, ej) in examples.iter().enumerate() {
                if j != k
                    && (ej.positive == ek.anchor
                        || ej.positive == ek.positive
                        || self.related_ids(anchor_ids[k], positive_ids[j])
                        || self.related_texts(&ek.anchor, &ej.positive))
                {
                    batch.excluded[k * n + j] = true;
                }
            }
            if let Some(negs) = self.hard_negatives.get(&ek.anchor) {
                batch.hard_negatives[k] = negs
                    .iter()
                    .filter(|n| **n != ek.positive && !self.is_related(&ek.anchor, n))
                    .take(hard_negative_cap)
                    .cloned()
                    .collect();
            }
        }
        batch
    }
}

pub fn train_retriever(
    model: &mut BiEncoder,
    train_set: &[RetrievalExample],
    validation: &[RetrievalExample],
    context: &RetrievalContext,
    config: &TrainConfig,
) -> Result<LossTrace> {
    train(model, train_set, validation, config, |m, batch| {
        loss_retrieval(m, &context.batch(batch, config.temperature, config.hard_negative_cap))
    })
}

/// Directed `(source, target, rerank_target)` triples.
pub fn train_reranker_pointwise(
    model: &mut CrossEncoder,
    train_set: &[(String, String, f64)],
    validation: &[(String, String, f64)],
    config: &TrainConfig,
) -> Result<LossTrace> {
    train(model, train_set, validation, config, |m, batch| {
        let owned: Vec<(String, String, f64)> = batch.iter().map(|p| (*p).clone()).collect();
        loss_rerank_pointwise(m, &owned)
    })
}

pub fn train_reranker_circle(
    model: &mut CrossEncoder,
    train_set: &[RerankBatch],
    validation: &[RerankBatch],
    config: &TrainConfig,
) -> Result<LossTrace> {
    train(model, train_set, validation, config, |m, batch| {
        let owned: Vec<RerankBatch> = batch.iter().map(|b| (*b).clone()).collect();
        loss_rerank_circle(m, &owned)
    })
}
