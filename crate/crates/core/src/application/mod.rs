//! End-user surface: reformulating a query, choosing the re-rank threshold,
//! blending behavioral features, and the staged pipeline.

mod pipeline;
mod report;

pub use pipeline::{
    run_pipeline, run_stage, ApplicationConfig, CorpusConfig, DataSource, Manifest, MiningConfig, PipelineConfig,
    PipelineOutcome, Stage, StageRecord, Workspace,
};
pub use report::{evaluate, EvalInputs};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QueryId, TrafficTier};
use crate::encoders::{sigmoid, PairScorer, QueryEmbedder};
use crate::error::{Error, Result};
use crate::retrieval_index::KnnIndex;

#[derive(Clone, Debug, PartialEq)]
pub struct ReformulationResult {
    pub source: String,
    /// `(target id, target text, sigmoid score)`, best first.
    pub targets: Vec<(QueryId, String, f64)>,
    pub threshold: f64,
}

/// Retrieval plus re-ranking over an index of behavior-rich queries.
pub struct Reformulator<'a, E, S> {
    pub bi_encoder: &'a E,
    pub cross_encoder: &'a S,
    pub index: &'a KnnIndex,
    /// Raw text by query id.
    pub texts: &'a [String],
    pub top_k: usize,
    pub threshold: f64,
    pub n_max: usize,
}

impl<E: QueryEmbedder, S: PairScorer> Reformulator<'_, E, S> {
    /// Candidates scored by the cross-encoder, before thresholding; the query
    /// itself is never a candidate.
    pub fn candidates(&self, query: &str) -> Result<Vec<(QueryId, f64)>> {
        if query.trim().is_empty() {
            return Err(Error::Empty("cannot reformulate an empty query".into()));
        }
        let probe = self.bi_encoder.embed(query)?;
        let mut out = Vec::new();
        for (id, _) in self.index.knn(&probe, self.top_k.saturating_add(1))? {
            let text = &self.texts[id.index()];
            if text != query && out.len() < self.top_k {
                out.push((id, sigmoid(self.cross_encoder.score(query, text)?)));
            }
        }
        Ok(out)
    }

    pub fn reformulate(&self, query: &str) -> Result<ReformulationResult> {
        let mut kept: Vec<(QueryId, f64)> = self
            .candidates(query)?
            .into_iter()
            .filter(|c| c.1 >= self.threshold)
            .collect();
        kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        kept.truncate(self.n_max);
        Ok(ReformulationResult {
            source: query.to_string(),
            targets: kept
                .into_iter()
                .map(|(id, s)| (id, self.texts[id.index()].clone(), s))
                .collect(),
            threshold: self.threshold,
        })
    }
}

/// Threshold maximizing F1 over `(score, is_positive)` pairs. Candidate
/// thresholds are the observed scores; ties in F1 go to the higher threshold.
pub fn select_threshold(scored: &[(f64, bool)]) -> Result<f64> {
    let total_pos = scored.iter().filter(|s| s.1).count();
    if total_pos == 0 {
        return Err(Error::Empty("threshold selection needs at least one positive".into()));
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut best, mut best_f1) = (f64::INFINITY, -1.0);
    let mut tp = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            tp += usize::from(sorted[i].1);
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (i + total_pos) as f64;
        if f1 > best_f1 {
            best_f1 = f1;
            best = t;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationParams {
    pub alpha: f64,
    pub beta: f64,
    pub n_max: usize,
    /// Blend only for impoverished (tail) queries.
    pub tail_only: bool,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 1.0,
            n_max: 10,
            tail_only: true,
        }
    }
}

/// `alpha * f_source + (1 - alpha) * beta * mean(f_targets)`.
pub fn augment_feature(f_source: f64, f_targets: &[f64], params: &AugmentationParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&params.alpha) || !(params.beta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha = {} must lie in [0, 1] and beta = {} must be non-negative",
            params.alpha, params.beta
        )));
    }
    if params.alpha == 1.0 {
        return Ok(f_source);
    }
    if f_targets.is_empty() {
        return Err(Error::Empty("augmentation with alpha < 1 needs reformulation features".into()));
    }
    let n = f_targets.len().min(params.n_max.max(1));
    let mean = f_targets[..n].iter().sum::<f64>() / n as f64;
    Ok(params.alpha * f_source + (1.0 - params.alpha) * params.beta * mean)
}

/// Tier-gated augmentation: rich queries keep their own feature when
/// `tail_only` is set, and queries without reformulations always do.
pub fn augment_for_tier(tier: TrafficTier, f_source: f64, f_targets: &[f64], params: &AugmentationParams) -> Result<f64> {
    if (params.tail_only && tier == TrafficTier::Rich) || f_targets.is_empty() {
        return Ok(f_source);
    }
    augment_feature(f_source, f_targets, params)
}

/// The lowest-traffic third of queries by raw purchase volume, ties by id.
pub fn tail_queries(corpus: &Corpus) -> BTreeSet<QueryId> {
    let mut by_traffic: Vec<(u64, QueryId)> = corpus
        .queries()
        .iter()
        .map(|q| (corpus.raw_behavior(q.id).values().sum(), q.id))
        .collect();
    by_traffic.sort_unstable();
    let n = by_traffic.len() / 3;
    by_traffic.into_iter().take(n).map(|x| x.1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{Embedding, TableEmbedder};
    use proptest::prelude::*;

    struct ConstScorer(f64);

    impl PairScorer for ConstScorer {
        fn score(&self, _: &str, target: &str) -> Result<f64> {
            Ok(self.0 - target.len() as f64)
        }
    }

    fn setup() -> (TableEmbedder, KnnIndex, Vec<String>) {
        let texts: Vec<String> = ["a", "bb", "ccc"].iter().map(|s| s.to_string()).collect();
        let mut table = TableEmbedder { dim: 2, ..Default::default() };
        let vecs = [[1.0, 0.0], [0.9, 0.1], [0.5, 0.5]];
        let mut entries = Vec::new();
        for (i, (t, v)) in texts.iter().zip(vecs).enumerate() {
            let e = Embedding::from_unnormalized(v.to_vec()).unwrap();
            table.table.insert(t.clone(), e.clone());
            entries.push((QueryId(i as u32), e));
        }
        (table, KnnIndex::from_embeddings(entries, "m").unwrap(), texts)
    }

    #[test]
    fn self_match_is_excluded_and_max_threshold_empties() {
        let (table, index, texts) = setup();
        let scorer = ConstScorer(5.0);
        let mut r = Reformulator {
            bi_encoder: &table,
            cross_encoder: &scorer,
            index: &index,
            texts: &texts,
            top_k: 10,
            threshold: 0.0,
            n_max: 10,
        };
        let out = r.reformulate("a").unwrap();
        let ids: Vec<QueryId> = out.targets.iter().map(|t| t.0).collect();
        assert_eq!(ids, vec![QueryId(1), QueryId(2)]);
        r.threshold = 1.0 + 1e-9;
        assert!(r.reformulate("a").unwrap().targets.is_empty());
        r.threshold = 0.0;
        r.n_max = 1;
        assert_eq!(r.reformulate("a").unwrap().targets.len(), 1);
        assert!(r.reformulate("  ").is_err());
    }

    #[test]
    fn augment_examples() {
        let p = |alpha| AugmentationParams { alpha, beta: 1.0, ..Default::default() };
        assert_eq!(augment_feature(0.3, &[], &p(1.0)).unwrap(), 0.3);
        assert_eq!(augment_feature(0.3, &[0.9], &p(1.0)).unwrap(), 0.3);
        assert_eq!(augment_feature(0.3, &[0.9], &p(0.0)).unwrap(), 0.9);
        assert!((augment_feature(0.2, &[0.4, 0.8], &p(0.5)).unwrap() - 0.4).abs() < 1e-12);
        assert!(augment_feature(0.2, &[], &p(0.5)).is_err());
        assert!(augment_feature(0.2, &[0.1], &p(1.5)).is_err());
    }

    #[test]
    fn tier_gate() {
        let params = AugmentationParams::default();
        assert_eq!(augment_for_tier(TrafficTier::Rich, 0.1, &[0.9], &params).unwrap(), 0.1);
        assert!(augment_for_tier(TrafficTier::Impoverished, 0.1, &[0.9], &params).unwrap() > 0.1);
        assert_eq!(augment_for_tier(TrafficTier::Impoverished, 0.1, &[], &params).unwrap(), 0.1);
    }

    #[test]
    fn threshold_maximizes_f1() {
        let scored = [(0.9, true), (0.8, true), (0.7, false), (0.6, true), (0.2, false)];
        // F1 at 0.8: 2*2/(2+3) = 0.8; at 0.6: 2*3/(4+3) = 0.857.
        assert_eq!(select_threshold(&scored).unwrap(), 0.6);
        assert!(select_threshold(&[(0.5, false)]).is_err());
    }

    proptest! {
        #[test]
        fn augment_stays_in_unit_interval(
            alpha in 0.0..=1.0f64,
            beta in 0.0..=1.0f64,
            f in 0.0..=1.0f64,
            targets in proptest::collection::vec(0.0..=1.0f64, 1..12),
        ) {
            let params = AugmentationParams { alpha, beta, ..Default::default() };
            let v = augment_feature(f, &targets, &params).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        }
    }
}
