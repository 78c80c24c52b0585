//! Hard-negative mining and iterative fine-tuning.
//!
//! Each round retrieves neighbors of every anchor with the current
//! bi-encoder, drops co-purchase partners, the anchor itself and its
//! normalization duplicates, and fine-tunes the bi-encoder with the survivors
//! added to each anchor's negatives. After the last round the cross-encoder
//! is fine-tuned with circle loss on the final negatives; it never retrieves.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::QueryId;
use crate::encoders::{BiEncoder, CrossEncoder, QueryEmbedder};
use crate::error::{Error, Result};
use crate::mining::CoPurchaseGraph;
use crate::retrieval_index::build_index;
use crate::training::{
    train_reranker_circle, train_retriever, LossTrace, RerankBatch, RetrievalContext, RetrievalExample, TrainConfig,
};
use crate::util::{parse_field, read_versioned, split_fields, version_header, write_lines};

const HARD_NEGATIVES_KIND: &str = "hard-negatives";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegativeRecord {
    pub anchor: QueryId,
    /// Ordered by retrieval rank, hardest first.
    pub negatives: Vec<QueryId>,
    pub round: usize,
    /// Checksum of the bi-encoder checkpoint that retrieved the negatives.
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnceConfig {
    pub rounds: usize,
    pub top_k: usize,
    pub epochs_per_round: usize,
}

impl Default for AnceConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            top_k: 100,
            epochs_per_round: 3,
        }
    }
}

/// Retrieve `top_k` candidates per anchor and keep those unrelated to it.
#[allow(clippy::too_many_arguments)]
pub fn mine_hard_negatives<E: QueryEmbedder>(
    model: &E,
    provenance: &str,
    texts: &[String],
    anchors: &[QueryId],
    candidates: &[QueryId],
    graph: &CoPurchaseGraph,
    top_k: usize,
    round: usize,
) -> Result<Vec<HardNegativeRecord>> {
    if candidates.is_empty() {
        return Err(Error::Empty("hard-negative mining needs candidates".into()));
    }
    let pool: Vec<(QueryId, &str)> = candidates.iter().map(|id| (*id, texts[id.index()].as_str())).collect();
    let index = build_index(model, &pool, provenance)?;
    anchors
        .par_iter()
        .map(|&anchor| {
            let probe = model.embed(&texts[anchor.index()])?;
            let negatives = index
                .knn(&probe, top_k)?
                .into_iter()
                .map(|(id, _)| id)
                .filter(|&id| id != anchor && !graph.related(anchor, id))
                .collect();
            Ok(HardNegativeRecord {
                anchor,
                negatives,
                round,
                provenance: provenance.to_string(),
            })
        })
        .collect()
}

pub fn write_hard_negatives(path: &Path, records: &[HardNegativeRecord]) -> Result<()> {
    write_lines(
        path,
        &version_header(HARD_NEGATIVES_KIND),
        records.iter().map(|r| {
            let negs: Vec<String> = r.negatives.iter().map(|n| n.to_string()).collect();
            format!("{}\t{}\t{}\t{}", r.anchor, r.round, negs.join(","), r.provenance)
        }),
    )
}

pub fn read_hard_negatives(path: &Path) -> Result<Vec<HardNegativeRecord>> {
    read_versioned(path, HARD_NEGATIVES_KIND)?
        .into_iter()
        .map(|(n, line)| {
            let f = split_fields(path, n, &line, 4)?;
            let negatives = if f[2].is_empty() {
                Vec::new()
            } else {
                f[2].split(',')
                    .map(|x| parse_field(path, n, x, "negative id"))
                    .collect::<Result<_>>()?
            };
            Ok(HardNegativeRecord {
                anchor: parse_field(path, n, f[0], "anchor id")?,
                round: parse_field(path, n, f[1], "round")?,
                negatives,
                provenance: f[3].to_string(),
            })
        })
        .collect()
}

/// Everything the loop needs besides the models.
pub struct AnceInputs<'a> {
    /// Raw text by query id.
    pub texts: &'a [String],
    pub graph: &'a CoPurchaseGraph,
    /// Queries whose negatives are mined.
    pub anchors: Vec<QueryId>,
    /// Retrieval pool for mining.
    pub candidates: Vec<QueryId>,
    pub train: &'a [RetrievalExample],
    pub validation: &'a [RetrievalExample],
    pub context: RetrievalContext,
    /// Re-ranking positives `(target, rerank_target)` per anchor.
    pub rerank_train: BTreeMap<QueryId, Vec<(QueryId, f64)>>,
    pub rerank_validation: BTreeMap<QueryId, Vec<(QueryId, f64)>>,
}

#[derive(Clone, Debug)]
pub struct AnceRound {
    pub round: usize,
    pub model: BiEncoder,
    pub hard_negatives: Vec<HardNegativeRecord>,
    pub trace: LossTrace,
}

#[derive(Clone, Debug)]
pub struct AnceOutcome {
    pub rounds: Vec<AnceRound>,
    pub bi_encoder: BiEncoder,
    pub cross_encoder: CrossEncoder,
    pub cross_trace: Option<LossTrace>,
}

/// Re-ranking batches pairing each anchor's positives with its negatives;
/// anchors without negatives are skipped.
pub fn rerank_batches(
    texts: &[String],
    positives: &BTreeMap<QueryId, Vec<(QueryId, f64)>>,
    negatives: &HashMap<QueryId, &HardNegativeRecord>,
    cap: usize,
) -> Vec<RerankBatch> {
    positives
        .iter()
        .filter_map(|(anchor, pos)| {
            let negs = negatives.get(anchor)?;
            if negs.negatives.is_empty() || pos.is_empty() {
                return None;
            }
            Some(RerankBatch {
                anchor: texts[anchor.index()].clone(),
                positives: pos.iter().map(|(t, v)| (texts[t.index()].clone(), *v)).collect(),
                hard_negatives: negs
                    .negatives
                    .iter()
                    .take(cap)
                    .map(|n| texts[n.index()].clone())
                    .collect(),
            })
        })
        .collect()
}

/// Self-learning rounds of the bi-encoder. Each round mines with the
/// previous round's model and fine-tunes on the augmented negatives.
pub fn run_retriever_rounds(
    bi_encoder: BiEncoder,
    inputs: &AnceInputs<'_>,
    config: &AnceConfig,
    retriever: &TrainConfig,
) -> Result<Vec<AnceRound>> {
    let mut model = bi_encoder;
    let mut context = inputs.context.clone();
    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let negatives = mine_hard_negatives(
            &model,
            &model.checksum(),
            inputs.texts,
            &inputs.anchors,
            &inputs.candidates,
            inputs.graph,
            config.top_k,
            round,
        )?;
        context.hard_negatives = negatives
            .iter()
            .map(|r| {
                (
                    inputs.texts[r.anchor.index()].clone(),
                    r.negatives.iter().map(|n| inputs.texts[n.index()].clone()).collect(),
                )
            })
            .collect();
        let round_config = TrainConfig {
            epochs: config.epochs_per_round,
            seed: retriever.seed.wrapping_add(round as u64),
            ..retriever.clone()
        };
        let trace = train_retriever(&mut model, inputs.train, inputs.validation, &context, &round_config)?;
        rounds.push(AnceRound {
            round,
            model: model.clone(),
            hard_negatives: negatives,
            trace,
        });
    }
    Ok(rounds)
}

/// Learn-from-teacher step: circle-loss fine-tuning of the cross-encoder on
/// negatives mined by a bi-encoder. Returns `None` when no anchor has both
/// positives and negatives.
pub fn teach_reranker(
    cross_encoder: &mut CrossEncoder,
    texts: &[String],
    negatives: &[HardNegativeRecord],
    rerank_train: &BTreeMap<QueryId, Vec<(QueryId, f64)>>,
    rerank_validation: &BTreeMap<QueryId, Vec<(QueryId, f64)>>,
    config: &TrainConfig,
) -> Result<Option<LossTrace>> {
    let by_anchor: HashMap<QueryId, &HardNegativeRecord> = negatives.iter().map(|r| (r.anchor, r)).collect();
    let cap = config.hard_negative_cap;
    let train = rerank_batches(texts, rerank_train, &by_anchor, cap);
    let validation = rerank_batches(texts, rerank_validation, &by_anchor, cap);
    if train.is_empty() {
        return Ok(None);
    }
    train_reranker_circle(cross_encoder, &train, &validation, config).map(Some)
}

pub fn run_ance_loop(
    bi_encoder: BiEncoder,
    cross_encoder: CrossEncoder,
    inputs: AnceInputs<'_>,
    config: &AnceConfig,
    retriever: &TrainConfig,
    reranker: &TrainConfig,
) -> Result<AnceOutcome> {
    let rounds = run_retriever_rounds(bi_encoder.clone(), &inputs, config, retriever)?;
    let mut cross = cross_encoder;
    let mut cross_trace = None;
    if let Some(last) = rounds.last() {
        cross_trace = teach_reranker(
            &mut cross,
            inputs.texts,
            &last.hard_negatives,
            &inputs.rerank_train,
            &inputs.rerank_validation,
            reranker,
        )?;
    }
    Ok(AnceOutcome {
        bi_encoder: rounds.last().map_or(bi_encoder, |r| r.model.clone()),
        rounds,
        cross_encoder: cross,
        cross_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{BiEncoderConfig, CrossEncoderConfig, Embedding, TableEmbedder};
    use crate::normalizer::QueryGroup;

    fn group(text: &str, ids: &[u32]) -> QueryGroup {
        QueryGroup {
            normalized_text: text.into(),
            member_query_ids: ids.iter().map(|&i| QueryId(i)).collect(),
            aggregated_behavior: BTreeMap::new(),
        }
    }

    fn unit(v: &[f64]) -> Embedding {
        Embedding::from_unnormalized(v.to_vec()).unwrap()
    }

    /// Anchor "q" (0); a (1), b (2), c (3) near it; "q2" (4) shares its group.
    fn fixture() -> (Vec<String>, TableEmbedder) {
        let texts: Vec<String> = ["q", "a", "b", "c", "q2"].iter().map(|s| s.to_string()).collect();
        let mut table = TableEmbedder { dim: 2, ..Default::default() };
        for (t, v) in [("q", [1.0, 0.0]), ("a", [0.9, 0.1]), ("b", [0.8, 0.2]), ("c", [0.7, 0.3]), ("q2", [1.0, 0.01])] {
            table.table.insert(t.into(), unit(&v));
        }
        (texts, table)
    }

    fn ids(v: &[u32]) -> Vec<QueryId> {
        v.iter().map(|&i| QueryId(i)).collect()
    }

    #[test]
    fn subtracts_copurchase_partners_self_and_duplicates() {
        let (texts, table) = fixture();
        let groups = [group("q", &[0, 4]), group("a", &[1]), group("b", &[2]), group("c", &[3])];
        let graph = CoPurchaseGraph::new(5, &groups, &[(0, 2, 1)]);
        let recs = mine_hard_negatives(&table, "mock", &texts, &ids(&[0]), &ids(&[0, 1, 2, 3, 4]), &graph, 10, 1).unwrap();
        assert_eq!(recs[0].negatives, ids(&[1, 3]));
        assert_eq!(recs[0].provenance, "mock");
    }

    #[test]
    fn all_partners_gives_empty_record_and_empty_pool_errors() {
        let (texts, table) = fixture();
        let groups = [group("q", &[0]), group("a", &[1]), group("b", &[2]), group("c", &[3]), group("q2", &[4])];
        let graph = CoPurchaseGraph::new(5, &groups, &[(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1)]);
        let recs = mine_hard_negatives(&table, "m", &texts, &ids(&[0]), &ids(&[1, 2, 3, 4]), &graph, 10, 1).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].negatives.is_empty());
        assert!(mine_hard_negatives(&table, "m", &texts, &ids(&[0]), &[], &graph, 10, 1).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hn.tsv");
        let recs = vec![
            HardNegativeRecord { anchor: QueryId(3), negatives: ids(&[5, 1]), round: 2, provenance: "abc".into() },
            HardNegativeRecord { anchor: QueryId(4), negatives: vec![], round: 2, provenance: "abc".into() },
        ];
        write_hard_negatives(&path, &recs).unwrap();
        assert_eq!(read_hard_negatives(&path).unwrap(), recs);
    }

    #[test]
    fn zero_rounds_is_identity() {
        let bi = BiEncoder::new(BiEncoderConfig { feature_dim: 64, embed_dim: 4, ..Default::default() }).unwrap();
        let cross = CrossEncoder::new(CrossEncoderConfig { joint_feature_dim: 64, hidden_dims: vec![4], ..Default::default() }).unwrap();
        let texts = vec!["a".to_string(), "b".to_string()];
        let graph = CoPurchaseGraph::default();
        let inputs = AnceInputs {
            texts: &texts,
            graph: &graph,
            anchors: ids(&[0]),
            candidates: ids(&[1]),
            train: &[],
            validation: &[],
            context: RetrievalContext::default(),
            rerank_train: BTreeMap::new(),
            rerank_validation: BTreeMap::new(),
        };
        let config = AnceConfig { rounds: 0, ..Default::default() };
        let out = run_ance_loop(bi.clone(), cross.clone(), inputs, &config, &TrainConfig::default(), &TrainConfig::default()).unwrap();
        assert_eq!(out.bi_encoder, bi);
        assert_eq!(out.cross_encoder, cross);
        assert!(out.rounds.is_empty());
    }
}
