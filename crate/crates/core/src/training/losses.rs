//! Loss functions over raw scores, and their model-level wrappers.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::encoders::{sigmoid, BiEncoder, CrossEncoder, Gradient, Parameterized, ScoreTrace};
use crate::error::{Error, Result};

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs.iter().copied());
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// One anchor's candidate similarities; `scores[positive]` is its positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveRow {
    pub scores: Vec<f64>,
    pub positive: usize,
    pub weight: f64,
}

/// Importance-weighted infoNCE:
/// `L = -(1/N) Σ_k w_k · log softmax(s_k / τ)[positive_k]`.
/// Returns the loss and `dL/ds` shaped like the input rows.
pub fn weighted_info_nce(rows: &[ContrastiveRow], tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if rows.is_empty() {
        return Err(Error::Empty("retrieval batch has no rows".into()));
    }
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(rows.len());
    for row in rows {
        if row.positive >= row.scores.len() {
            return Err(Error::InvalidArgument("positive index out of range".into()));
        }
        if !row.weight.is_finite() {
            return Err(Error::InvalidArgument("importance must be finite".into()));
        }
        let logits: Vec<f64> = row.scores.iter().map(|s| s / tau).collect();
        let lse = log_sum_exp(logits.iter().copied());
        loss += row.weight * (lse - logits[row.positive]);
        let p = softmax(&logits);
        let g = p
            .iter()
            .enumerate()
            .map(|(j, pj)| {
                let indicator = if j == row.positive { 1.0 } else { 0.0 };
                row.weight * (pj - indicator) / (tau * n)
            })
            .collect();
        grads.push(g);
    }
    Ok((loss / n, grads))
}

/// Circle loss `log(1 + Σ_neg e^{s_n} · Σ_pos e^{-s_p})`, evaluated as
/// `softplus(LSE(s_neg) + LSE(-s_pos))`. Returns `(loss, dL/ds_pos, dL/ds_neg)`.
pub fn circle_loss(pos: &[f64], neg: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if pos.is_empty() {
        return Err(Error::Empty("circle loss needs at least one positive".into()));
    }
    if neg.is_empty() {
        return Ok((0.0, vec![0.0; pos.len()], Vec::new()));
    }
    let z = log_sum_exp(neg.iter().copied()) + log_sum_exp(pos.iter().map(|s| -s));
    let loss = softplus(z);
    let outer = sigmoid(z);
    let neg_w = softmax(neg);
    let pos_neg: Vec<f64> = pos.iter().map(|s| -s).collect();
    let pos_w = softmax(&pos_neg);
    Ok((
        loss,
        pos_w.iter().map(|w| -outer * w).collect(),
        neg_w.iter().map(|w| outer * w).collect(),
    ))
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean of `(sigmoid(s) - target)^2`; returns the loss and `dL/ds`.
pub fn pointwise_loss(scores: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if scores.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len().to_string(),
            found: targets.len().to_string(),
        });
    }
    if scores.is_empty() {
        return Err(Error::Empty("pointwise loss over no pairs".into()));
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (s, t) in scores.iter().zip(targets) {
        let p = sigmoid(*s);
        loss += (p - t) * (p - t);
        grad.push(2.0 * (p - t) * p * (1.0 - p) / n);
    }
    Ok((loss / n, grad))
}

/// Anchors with parallel positives and importances, plus optional per-anchor
/// hard negatives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalBatch {
    pub anchors: Vec<String>,
    pub positives: Vec<String>,
    pub importances: Vec<f64>,
    pub temperature: f64,
    pub hard_negatives: Vec<Vec<String>>,
    /// Row-major `n x n` flags; `excluded[k * n + j]` drops positive `j`
    /// from anchor `k`'s candidates.
    pub excluded: Vec<bool>,
}

impl RetrievalBatch {
    pub fn new(anchors: Vec<String>, positives: Vec<String>, importances: Vec<f64>, temperature: f64) -> Self {
        let n = anchors.len();
        Self {
            anchors,
            positives,
            importances,
            temperature,
            hard_negatives: vec![Vec::new(); n],
            excluded: vec![false; n * n],
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.anchors.len();
        if n == 0 {
            return Err(Error::Empty("retrieval batch has no anchors".into()));
        }
        if self.positives.len() != n || self.importances.len() != n || self.hard_negatives.len() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("{n} positives, importances and negative lists"),
                found: format!(
                    "{}, {}, {}",
                    self.positives.len(),
                    self.importances.len(),
                    self.hard_negatives.len()
                ),
            });
        }
        if self.excluded.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: format!("{} exclusion flags", n * n),
                found: self.excluded.len().to_string(),
            });
        }
        Ok(())
    }
}

/// Text interning so shared texts are embedded once.
#[derive(Default)]
struct Interner<'a> {
    index: BTreeMap<&'a str, usize>,
    texts: Vec<&'a str>,
}

impl<'a> Interner<'a> {
    fn id(&mut self, text: &'a str) -> usize {
        *self.index.entry(text).or_insert_with(|| {
            self.texts.push(text);
            self.texts.len() - 1
        })
    }
}

/// Dot product with four independent accumulators, which lets the compiler
/// vectorize the reduction.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`.
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Weighted infoNCE of a bi-encoder over one batch. Candidates of anchor `k`
/// are every batch positive not excluded for `k`, then `k`'s hard negatives.
pub fn loss_retrieval(model: &BiEncoder, batch: &RetrievalBatch) -> Result<(f64, Gradient)> {
    batch.validate()?;
    let mut interner = Interner::default();
    let anchors: Vec<usize> = batch.anchors.iter().map(|t| interner.id(t)).collect();
    let positives: Vec<usize> = batch.positives.iter().map(|t| interner.id(t)).collect();
    let n = anchors.len();
    let excluded = &batch.excluded;
    let mut candidates = Vec::with_capacity(n);
    for k in 0..n {
        let mut c: Vec<usize> = Vec::with_capacity(n + batch.hard_negatives[k].len());
        let mut positive = 0;
        for (j, &p) in positives.iter().enumerate() {
            if j == k {
                positive = c.len();
                c.push(p);
            } else if !excluded[k * n + j] {
                c.push(p);
            }
        }
        for t in &batch.hard_negatives[k] {
            c.push(interner.id(t));
        }
        candidates.push((c, positive));
    }
    let traces = interner
        .texts
        .par_iter()
        .map(|t| model.forward(t))
        .collect::<Result<Vec<_>>>()?;
    let dim = model.config().embed_dim;
    let mut flat = Vec::with_capacity(traces.len() * dim);
    for t in &traces {
        flat.extend_from_slice(t.embedding.as_slice());
    }
    let emb = |i: usize| &flat[i * dim..(i + 1) * dim];
    let rows: Vec<ContrastiveRow> = candidates
        .iter()
        .zip(&anchors)
        .zip(&batch.importances)
        .map(|(((c, positive), &a), &w)| ContrastiveRow {
            scores: c.iter().map(|&j| dot(emb(a), emb(j))).collect(),
            positive: *positive,
            weight: w,
        })
        .collect();
    let (loss, d_scores) = weighted_info_nce(&rows, batch.temperature)?;
    let mut d_emb = vec![0.0; traces.len() * dim];
    for (((c, _), &a), ds) in candidates.iter().zip(&anchors).zip(&d_scores) {
        for (&j, &g) in c.iter().zip(ds) {
            if g == 0.0 {
                continue;
            }
            axpy(&mut d_emb[a * dim..(a + 1) * dim], g, emb(j));
            axpy(&mut d_emb[j * dim..(j + 1) * dim], g, emb(a));
        }
    }
    let mut grad = model.zero_grad();
    for (trace, g) in traces.iter().zip(d_emb.chunks_exact(dim)) {
        if g.iter().any(|x| *x != 0.0) {
            model.backward(trace, g, &mut grad);
        }
    }
    Ok((loss, grad))
}

fn forward_all<'a>(
    model: &CrossEncoder,
    pairs: impl IndexedParallelIterator<Item = (&'a str, &'a str)>,
) -> Result<Vec<ScoreTrace>> {
    pairs.map(|(s, t)| model.forward(s, t)).collect()
}

/// Pointwise regression of `sigmoid(s_CE(source, target))` onto `target`.
pub fn loss_rerank_pointwise(model: &CrossEncoder, pairs: &[(String, String, f64)]) -> Result<(f64, Gradient)> {
    if let Some(p) = pairs.iter().find(|p| !(0.0..=1.0).contains(&p.2)) {
        return Err(Error::InvalidArgument(format!("rerank target {} outside [0,1]", p.2)));
    }
    let traces = forward_all(model, pairs.par_iter().map(|p| (p.0.as_str(), p.1.as_str())))?;
    let scores: Vec<f64> = traces.iter().map(|t| t.score).collect();
    let targets: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let (loss, d) = pointwise_loss(&scores, &targets)?;
    let mut grad = model.zero_grad();
    for (trace, g) in traces.iter().zip(d) {
        model.backward(trace, g, &mut grad);
    }
    Ok((loss, grad))
}

/// An anchor's positive set (with re-ranking targets) and its hard negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct RerankBatch {
    pub anchor: String,
    pub positives: Vec<(String, f64)>,
    pub hard_negatives: Vec<String>,
}

/// Mean circle loss over anchors.
pub fn loss_rerank_circle(model: &CrossEncoder, batches: &[RerankBatch]) -> Result<(f64, Gradient)> {
    if batches.is_empty() {
        return Err(Error::Empty("no rerank batches".into()));
    }
    let n = batches.len() as f64;
    let per_anchor = batches
        .par_iter()
        .map(|b| -> Result<_> {
            if b.positives.is_empty() {
                return Err(Error::Empty(format!("anchor `{}` has no positives", b.anchor)));
            }
            let pos = b
                .positives
                .iter()
                .map(|(t, _)| model.forward(&b.anchor, t))
                .collect::<Result<Vec<_>>>()?;
            let neg = b
                .hard_negatives
                .iter()
                .map(|t| model.forward(&b.anchor, t))
                .collect::<Result<Vec<_>>>()?;
            let sp: Vec<f64> = pos.iter().map(|t| t.score).collect();
            let sn: Vec<f64> = neg.iter().map(|t| t.score).collect();
            let (loss, dp, dn) = circle_loss(&sp, &sn)?;
            Ok((loss, pos, dp, neg, dn))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = model.zero_grad();
    let mut loss = 0.0;
    for (l, pos, dp, neg, dn) in &per_anchor {
        loss += l;
        for (t, g) in pos.iter().zip(dp).chain(neg.iter().zip(dn)) {
            if *g != 0.0 {
                model.backward(t, g / n, &mut grad);
            }
        }
    }
    Ok((loss / n, grad))
}
