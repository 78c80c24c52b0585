//! Offline evaluation of trained models into one [`EvalReport`].

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::{tail_queries, Reformulator};
use crate::corpus::{Corpus, QueryId, TrafficTier};
use crate::encoders::{BiEncoder, CrossEncoder, PairScorer, QueryEmbedder};
use crate::error::Result;
use crate::evaluation::{
    audit_metrics, mean_ndcg, ndcg_at_3_query, ndcg_candidates, recall_at_k, Averaging, AuditRecord, EvalReport,
    GroundTruth, NdcgMode, RecallScope,
};
use crate::mining::QueryPair;
use crate::retrieval_index::{build_index, KnnIndex};
use crate::synthgen::{Relation, SynthGroundTruth};

pub struct EvalInputs<'a> {
    /// Corpus with normalized text filled in.
    pub corpus: &'a Corpus,
    /// Proposed-mode pairs; test-query partners form the ground truth.
    pub pairs: &'a [QueryPair],
    pub test_queries: &'a BTreeSet<QueryId>,
    /// Retrievers in training order; the last one serves.
    pub retrievers: Vec<(String, &'a BiEncoder)>,
    /// Re-rankers in training order; the last one serves.
    pub rerankers: Vec<(String, &'a CrossEncoder)>,
    pub audit: &'a [AuditRecord],
    pub synth_truth: Option<&'a SynthGroundTruth>,
    pub top_k: usize,
    pub n_max: usize,
    pub threshold: f64,
}

/// Behavior-rich queries and their index, shared by several evaluations.
pub(crate) fn rich_pool(corpus: &Corpus) -> BTreeSet<QueryId> {
    corpus
        .queries()
        .iter()
        .filter(|q| q.traffic_tier == TrafficTier::Rich)
        .map(|q| q.id)
        .collect()
}

pub(crate) fn index_over(model: &BiEncoder, corpus: &Corpus, pool: &BTreeSet<QueryId>) -> Result<KnnIndex> {
    let entries: Vec<(QueryId, &str)> = pool.iter().map(|id| (*id, corpus.query(*id).raw_text.as_str())).collect();
    build_index(model, &entries, &model.checksum())
}

/// Top-`k` pool neighbors of each query, excluding the query itself.
fn retrieve_all(
    model: &BiEncoder,
    index: &KnnIndex,
    corpus: &Corpus,
    queries: &[QueryId],
    k: usize,
) -> Result<BTreeMap<QueryId, Vec<QueryId>>> {
    queries
        .par_iter()
        .map(|&q| {
            let probe = model.embed(&corpus.query(q).raw_text)?;
            let list: Vec<QueryId> = index
                .knn(&probe, k + 1)?
                .into_iter()
                .map(|(id, _)| id)
                .filter(|id| *id != q)
                .take(k)
                .collect();
            Ok((q, list))
        })
        .collect()
}

fn audit_scores(audit: &[AuditRecord], score: impl Fn(&str, &str) -> Result<f64> + Sync) -> Result<Vec<f64>> {
    audit.par_iter().map(|r| score(&r.source, &r.target)).collect()
}

fn set_audit(report: &mut EvalReport, model: &str, audit: &[AuditRecord], scores: &[f64]) -> Result<()> {
    let labels: Vec<_> = audit.iter().map(|r| r.label).collect();
    let m = audit_metrics(scores, &labels)?;
    report.set(model, "auroc_strict", m.auroc_strict)?;
    report.set(model, "auroc_notrel", m.auroc_notrel)?;
    report.set(model, "spearman", m.spearman)
}

pub fn evaluate(inputs: &EvalInputs<'_>) -> Result<EvalReport> {
    let corpus = inputs.corpus;
    let rich = rich_pool(corpus);
    let pool: BTreeSet<QueryId> = corpus.queries().iter().map(|q| q.id).collect();
    let truth = GroundTruth::from_pairs(inputs.pairs, inputs.test_queries, &pool);
    let queries: Vec<QueryId> = truth.partners.keys().copied().collect();
    let k = inputs.top_k;
    let mut report = EvalReport::default();
    report.set_count("data", "queries", corpus.len());
    report.set_count("data", "rich_queries", rich.len());
    report.set_count("data", "test_queries", inputs.test_queries.len());
    report.set_count("data", "evaluated_queries", queries.len());
    report.set_count("data", "audit_pairs", inputs.audit.len());

    let mut final_retrieval = None;
    for (name, model) in &inputs.retrievers {
        let index = index_over(model, corpus, &pool)?;
        let retrieved = retrieve_all(model, &index, corpus, &queries, k)?;
        for (scope, s) in [(RecallScope::Top3, "top3"), (RecallScope::All, "all")] {
            for (avg, a) in [(Averaging::Micro, "micro"), (Averaging::Macro, "macro")] {
                let v = recall_at_k(&retrieved, &truth, k, scope, avg)?;
                report.set(name, &format!("recall@{k}.{s}.{a}"), v)?;
            }
        }
        if !inputs.audit.is_empty() {
            let scores = audit_scores(inputs.audit, |a, b| Ok(model.embed(a)?.dot(&model.embed(b)?)))?;
            set_audit(&mut report, name, inputs.audit, &scores)?;
        }
        final_retrieval = Some(retrieved);
    }

    for (name, model) in &inputs.rerankers {
        for (mode, m) in [(NdcgMode::General, "general"), (NdcgMode::Hard, "hard")] {
            let per_query: Vec<Option<f64>> = queries
                .par_iter()
                .map(|q| {
                    let retrieved = final_retrieval.as_ref().and_then(|r| r.get(q)).map(|v| v.as_slice());
                    let candidates = ndcg_candidates(&truth.partners[q], retrieved, mode)?;
                    let source = &corpus.query(*q).raw_text;
                    let scored = candidates
                        .into_iter()
                        .map(|(id, gain)| Ok((id, model.score(source, &corpus.query(id).raw_text)?, gain)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(ndcg_at_3_query(&scored))
                })
                .collect::<Result<_>>()?;
            let summary = mean_ndcg(per_query)?;
            report.set(name, &format!("ndcg@3.{m}"), summary.mean)?;
            report.set_count(name, &format!("ndcg@3.{m}.skipped"), summary.skipped);
        }
        if !inputs.audit.is_empty() {
            let scores = audit_scores(inputs.audit, |a, b| model.score(a, b))?;
            set_audit(&mut report, name, inputs.audit, &scores)?;
        }
    }

    if let (Some((_, bi)), Some((_, cross))) = (inputs.retrievers.last(), inputs.rerankers.last()) {
        let index = index_over(bi, corpus, &rich)?;
        reformulation_quality(&mut report, inputs, bi, cross, &index)?;
    }
    Ok(report)
}

/// Coverage of tail queries by reformulations and, with synthetic truth,
/// how many of them get a same-intent target.
fn reformulation_quality(
    report: &mut EvalReport,
    inputs: &EvalInputs<'_>,
    bi: &BiEncoder,
    cross: &CrossEncoder,
    index: &KnnIndex,
) -> Result<()> {
    let corpus = inputs.corpus;
    let texts: Vec<String> = corpus.queries().iter().map(|q| q.raw_text.clone()).collect();
    let reformulator = Reformulator {
        bi_encoder: bi,
        cross_encoder: cross,
        index,
        texts: &texts,
        top_k: inputs.top_k,
        threshold: inputs.threshold,
        n_max: inputs.n_max,
    };
    let tail: Vec<QueryId> = tail_queries(corpus).into_iter().collect();
    let results = tail
        .par_iter()
        .map(|q| reformulator.reformulate(&texts[q.index()]))
        .collect::<Result<Vec<_>>>()?;
    let n = results.len().max(1) as f64;
    let covered = results.iter().filter(|r| !r.targets.is_empty()).count();
    report.set("application", "threshold", inputs.threshold)?;
    report.set("application", "tail_covered", covered as f64 / n)?;
    report.set_count("application", "tail_queries", results.len());
    if let Some(truth) = inputs.synth_truth {
        let same = results
            .iter()
            .filter(|r| {
                r.targets
                    .iter()
                    .any(|t| truth.relation(&r.source, &t.1) == Some(Relation::Same))
            })
            .count();
        report.set("application", "tail_same_intent", same as f64 / n)?;
    }
    Ok(())
}
