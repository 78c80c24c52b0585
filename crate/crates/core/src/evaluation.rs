//! Offline metrics: recall@k, NDCG@3, AUROC, Spearman, and the report file.
//!
//! Naming note: `Averaging::Micro` is the mean of per-query recalls and
//! `Averaging::Macro` pools hits over pooled truth sizes. This is the reverse
//! of the usual IR convention and is kept deliberately for comparability with
//! earlier reports that use it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::QueryId;
use crate::error::{Error, Result};
use crate::mining::QueryPair;
use crate::util::{parse_field, read_versioned, split_fields, version_header, write_lines};

const REPORT_KIND: &str = "eval-report";
const AUDIT_KIND: &str = "audit-labels";

/// Relevance-scored partners of each test query.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub partners: BTreeMap<QueryId, Vec<(QueryId, f64)>>,
}

impl GroundTruth {
    /// Partners of each test query drawn from `pool`, scored by importance.
    pub fn from_pairs(pairs: &[QueryPair], test_queries: &BTreeSet<QueryId>, pool: &BTreeSet<QueryId>) -> Self {
        let mut partners: BTreeMap<QueryId, BTreeMap<QueryId, f64>> = BTreeMap::new();
        for p in pairs {
            for (q, other) in [(p.source, p.target), (p.target, p.source)] {
                if test_queries.contains(&q) && pool.contains(&other) && q != other {
                    let slot = partners.entry(q).or_default().entry(other).or_insert(0.0);
                    *slot = slot.max(p.importance);
                }
            }
        }
        Self {
            partners: partners
                .into_iter()
                .map(|(q, m)| (q, m.into_iter().collect()))
                .collect(),
        }
    }

    /// The `n` highest-scored partners, ties by ascending id.
    pub fn top(&self, query: QueryId, n: usize) -> Vec<QueryId> {
        let mut p = self.partners.get(&query).cloned().unwrap_or_default();
        p.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        p.into_iter().take(n).map(|x| x.0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecallScope {
    Top3,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    /// Mean of per-query recalls.
    Micro,
    /// Total hits over total truth size.
    Macro,
}

pub fn recall_at_k(
    retrieved: &BTreeMap<QueryId, Vec<QueryId>>,
    truth: &GroundTruth,
    k: usize,
    scope: RecallScope,
    averaging: Averaging,
) -> Result<f64> {
    let mut per_query = Vec::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for (&q, partners) in &truth.partners {
        let relevant: BTreeSet<QueryId> = match scope {
            RecallScope::Top3 => truth.top(q, 3).into_iter().collect(),
            RecallScope::All => partners.iter().map(|p| p.0).collect(),
        };
        if relevant.is_empty() {
            continue;
        }
        let list = retrieved
            .get(&q)
            .ok_or_else(|| Error::InvalidArgument(format!("no retrieval results for query {q}")))?;
        let h = list.iter().take(k).filter(|id| relevant.contains(id)).count();
        per_query.push(h as f64 / relevant.len() as f64);
        hits += h;
        total += relevant.len();
    }
    if per_query.is_empty() {
        return Err(Error::Empty("ground truth has no query with partners".into()));
    }
    Ok(match averaging {
        Averaging::Micro => per_query.iter().sum::<f64>() / per_query.len() as f64,
        Averaging::Macro => hits as f64 / total as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NdcgMode {
    /// Candidates are the truth partners only.
    General,
    /// Candidates are retrieved ∪ truth partners; unpaired ones have gain 0.
    Hard,
}

/// Candidate set of one query as `(id, gain)`, sorted by id.
pub fn ndcg_candidates(
    partners: &[(QueryId, f64)],
    retrieved: Option<&[QueryId]>,
    mode: NdcgMode,
) -> Result<Vec<(QueryId, f64)>> {
    let mut gains: BTreeMap<QueryId, f64> = partners.iter().copied().collect();
    if mode == NdcgMode::Hard {
        let retrieved =
            retrieved.ok_or_else(|| Error::InvalidArgument("hard NDCG needs retrieval results".into()))?;
        for id in retrieved {
            gains.entry(*id).or_insert(0.0);
        }
    }
    Ok(gains.into_iter().collect())
}

fn dcg3(gains_in_rank_order: impl Iterator<Item = f64>) -> f64 {
    gains_in_rank_order
        .take(3)
        .enumerate()
        .map(|(r, g)| g / ((r + 2) as f64).log2())
        .sum()
}

/// NDCG@3 of one query from `(id, model_score, gain)` candidates, ranked by
/// score descending with ties by ascending id. `None` when the ideal DCG is 0.
pub fn ndcg_at_3_query(candidates: &[(QueryId, f64, f64)]) -> Option<f64> {
    let mut ideal: Vec<f64> = candidates.iter().map(|c| c.2).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg3(ideal.into_iter());
    if !(idcg > 0.0) {
        return None;
    }
    let mut ranked: Vec<&(QueryId, f64, f64)> = candidates.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Some(dcg3(ranked.into_iter().map(|c| c.2)) / idcg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NdcgSummary {
    pub mean: f64,
    pub evaluated: usize,
    /// Queries with zero ideal gain.
    pub skipped: usize,
}

pub fn mean_ndcg(per_query: impl IntoIterator<Item = Option<f64>>) -> Result<NdcgSummary> {
    let (mut sum, mut evaluated, mut skipped) = (0.0, 0, 0);
    for v in per_query {
        match v {
            Some(x) => {
                sum += x;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::Empty("no query has positive ideal gain".into()));
    }
    Ok(NdcgSummary {
        mean: sum / evaluated as f64,
        evaluated,
        skipped,
    })
}

/// Fractional (1-based, tie-averaged) ranks in ascending order of `values`.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUROC: probability a positive outscores a negative, ties ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len().to_string(),
            found: labels.len().to_string(),
        });
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUROC needs both classes".into()));
    }
    let ranks = fractional_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Spearman correlation: Pearson correlation of fractional ranks.
pub fn spearman(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len().to_string(),
            found: labels.len().to_string(),
        });
    }
    if scores.len() < 2 {
        return Err(Error::InvalidArgument("Spearman needs at least two points".into()));
    }
    let (x, y) = (fractional_ranks(scores), fractional_ranks(labels));
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidArgument("Spearman undefined for a constant ranking".into()));
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AuditLabel {
    NotRelevant = 0,
    PartiallyRelevant = 1,
    StrictlyRelevant = 2,
}

impl AuditLabel {
    pub fn value(self) -> u8 {
        self as u8
    }
}

impl FromStr for AuditLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "0" => Ok(AuditLabel::NotRelevant),
            "1" => Ok(AuditLabel::PartiallyRelevant),
            "2" => Ok(AuditLabel::StrictlyRelevant),
            _ => Err(Error::InvalidArgument(format!("audit label must be 0, 1 or 2, got `{s}`"))),
        }
    }
}

/// A labeled ordered pair of raw query texts.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct AuditRecord {
    pub source: String,
    pub target: String,
    pub label: AuditLabel,
}

pub fn write_audit_labels(path: &Path, records: &[AuditRecord]) -> Result<()> {
    write_lines(
        path,
        &version_header(AUDIT_KIND),
        records
            .iter()
            .map(|r| format!("{}\t{}\t{}", r.source, r.target, r.label.value())),
    )
}

/// Reads audit labels; a second label for the same ordered pair is an error.
pub fn read_audit_labels(path: &Path) -> Result<Vec<AuditRecord>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line_no, line) in read_versioned(path, AUDIT_KIND)? {
        let f = split_fields(path, line_no, &line, 3)?;
        let label: AuditLabel = parse_field(path, line_no, f[2], "label")?;
        if !seen.insert((f[0].to_string(), f[1].to_string())) {
            return Err(Error::parse(path, line_no, "duplicate label for ordered pair"));
        }
        out.push(AuditRecord {
            source: f[0].to_string(),
            target: f[1].to_string(),
            label,
        });
    }
    Ok(out)
}

/// Audit metrics of model scores against labels, in label order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditMetrics {
    pub auroc_strict: f64,
    pub auroc_notrel: f64,
    pub spearman: f64,
}

pub fn audit_metrics(scores: &[f64], labels: &[AuditLabel]) -> Result<AuditMetrics> {
    let strict: Vec<bool> = labels.iter().map(|l| *l == AuditLabel::StrictlyRelevant).collect();
    let relevant: Vec<bool> = labels.iter().map(|l| *l != AuditLabel::NotRelevant).collect();
    let ordinal: Vec<f64> = labels.iter().map(|l| f64::from(l.value())).collect();
    Ok(AuditMetrics {
        auroc_strict: auroc(scores, &strict)?,
        auroc_notrel: auroc(scores, &relevant)?,
        spearman: spearman(scores, &ordinal)?,
    })
}

/// Named metrics of one or more models, rendered with 5 decimals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn set(&mut self, model: &str, metric: &str, value: f64) -> Result<()> {
        let bounded = !metric.starts_with("spearman");
        let ok = value.is_finite()
            && if bounded {
                (0.0..=1.0).contains(&value)
            } else {
                (-1.0..=1.0).contains(&value)
            };
        if !ok {
            return Err(Error::InvalidArgument(format!("{model}.{metric} = {value} out of range")));
        }
        self.metrics.insert(format!("{model}.{metric}"), value);
        Ok(())
    }

    pub fn set_count(&mut self, model: &str, name: &str, value: usize) {
        self.counts.insert(format!("{model}.{name}"), value);
    }

    pub fn get(&self, model: &str, metric: &str) -> Option<f64> {
        self.metrics.get(&format!("{model}.{metric}")).copied()
    }

    pub fn merge(&mut self, other: EvalReport) {
        self.metrics.extend(other.metrics);
        self.counts.extend(other.counts);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_lines(path, &version_header(REPORT_KIND), self.to_string().lines())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut report = EvalReport::default();
        for (line_no, line) in read_versioned(path, REPORT_KIND)? {
            let f = split_fields(path, line_no, &line, 2)?;
            if f[1].contains('.') {
                report.metrics.insert(f[0].to_string(), parse_field(path, line_no, f[1], "metric")?);
            } else {
                report.counts.insert(f[0].to_string(), parse_field(path, line_no, f[1], "count")?);
            }
        }
        Ok(report)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.metrics {
            writeln!(f, "{k}\t{v:.5}")?;
        }
        for (k, v) in &self.counts {
            writeln!(f, "{k}\t{v}")?;
        }
        Ok(())
    }
}
