//! Query-query relevance from purchase behavior.
//!
//! All divergences use base-2 logarithms, so both the Jensen-Shannon
//! divergence and its one-sided (target-conditioned) term live in `[0, 1]`.
//! Similarities are `1 - divergence`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::corpus::{self, PairEndpoints, ProductId, QueryId};
use crate::error::{Error, Result};
use crate::normalizer::QueryGroup;
use crate::util;

const PAIRS_KIND: &str = "pairs";
pub const DEFAULT_FLOOR: f64 = 0.01;
pub const BASELINE_KEEP_FRACTION: f64 = 0.3;
const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Normalized purchase distribution of one query (or query group).
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorDistribution {
    probs: BTreeMap<ProductId, f64>,
}

impl BehaviorDistribution {
    pub fn new(probs: BTreeMap<ProductId, f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if let Some((p, v)) = probs.iter().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidDistribution(format!(
                "probability of product {} is {v}",
                p.0
            )));
        }
        let total: f64 = probs.values().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalize raw purchase counts; zero counts are dropped.
    pub fn from_counts(counts: &BTreeMap<ProductId, u64>) -> Result<Self> {
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(Error::InvalidDistribution("no purchases".into()));
        }
        let probs = counts
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(&p, &n)| (p, n as f64 / total as f64))
            .collect();
        Self::new(probs)
    }

    pub fn probs(&self) -> &BTreeMap<ProductId, f64> {
        &self.probs
    }

    pub fn support(&self) -> BTreeSet<ProductId> {
        self.probs.keys().copied().collect()
    }

    fn shares_support(&self, other: &Self) -> bool {
        self.probs.keys().any(|p| other.probs.contains_key(p))
    }
}

/// `p * log2(p / m)` with the `0 log 0 = 0` convention.
fn kl_term(p: f64, m: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / m).log2()
    }
}

/// KLD₂(target ‖ m) with `m = (target + other) / 2`. Always finite since the
/// mixture is positive wherever `target` is.
pub fn kld_to_mixture(target: &BehaviorDistribution, other: &BehaviorDistribution) -> f64 {
    if !target.shares_support(other) {
        return 1.0;
    }
    target
        .probs
        .iter()
        .map(|(product, &p)| {
            let q = other.probs.get(product).copied().unwrap_or(0.0);
            kl_term(p, 0.5 * (p + q))
        })
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// Jensen-Shannon divergence, base 2, over the union support.
pub fn jsd(d1: &BehaviorDistribution, d2: &BehaviorDistribution) -> f64 {
    if !d1.shares_support(d2) {
        return 1.0;
    }
    let mut total = 0.0;
    for (product, &p) in &d1.probs {
        let q = d2.probs.get(product).copied().unwrap_or(0.0);
        let m = 0.5 * (p + q);
        total += 0.5 * kl_term(p, m) + 0.5 * kl_term(q, m);
    }
    for (product, &q) in &d2.probs {
        if !d1.probs.contains_key(product) {
            total += 0.5 * kl_term(q, 0.5 * q);
        }
    }
    total.clamp(0.0, 1.0)
}

/// Symmetric sample importance used to weight retrieval training pairs.
pub fn importance(d1: &BehaviorDistribution, d2: &BehaviorDistribution) -> f64 {
    1.0 - jsd(d1, d2)
}

/// Directed re-ranking relevance of `target` as a reformulation of `source`:
/// only the target-conditioned half of the JSD is kept.
pub fn rerank_target(source: &BehaviorDistribution, target: &BehaviorDistribution) -> f64 {
    1.0 - kld_to_mixture(target, source)
}

/// Overlap score used by the legacy mining job:
/// `|∩| / min(|a|,|b|) · |∩| / |∪|`.
pub fn legacy_score(pp1: &BTreeSet<ProductId>, pp2: &BTreeSet<ProductId>) -> Result<f64> {
    if pp1.is_empty() || pp2.is_empty() {
        return Err(Error::Empty("legacy_score needs two non-empty product sets".into()));
    }
    let inter = pp1.intersection(pp2).count() as f64;
    let union = pp1.union(pp2).count() as f64;
    let min = pp1.len().min(pp2.len()) as f64;
    Ok((inter / min) * (inter / union))
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPair {
    pub source: QueryId,
    pub target: QueryId,
    pub importance: f64,
    /// `rerank_target(source -> target)`.
    pub rerank_target_fwd: f64,
    /// `rerank_target(target -> source)`.
    pub rerank_target_rev: f64,
    pub co_purchases: u32,
}

impl QueryPair {
    pub fn reversed(&self) -> QueryPair {
        QueryPair {
            source: self.target,
            target: self.source,
            importance: self.importance,
            rerank_target_fwd: self.rerank_target_rev,
            rerank_target_rev: self.rerank_target_fwd,
            co_purchases: self.co_purchases,
        }
    }
}

impl PairEndpoints for QueryPair {
    fn endpoints(&self) -> (QueryId, QueryId) {
        (self.source, self.target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiningMode {
    /// Every co-purchase pair above the floor, weighted by importance.
    Proposed,
    /// Each query keeps the top 30% of its pairs, unweighted.
    BaselineTop30,
}

impl std::str::FromStr for MiningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(MiningMode::Proposed),
            "baseline" | "baseline_top30" => Ok(MiningMode::BaselineTop30),
            other => Err(Error::InvalidArgument(format!("unknown mining mode `{other}`"))),
        }
    }
}

/// Group-level co-purchase records `(group_a, group_b, shared_products)`.
pub fn group_copurchase(groups: &[QueryGroup], min_purchase: u64) -> Vec<(usize, usize, u32)> {
    let supports: Vec<Vec<ProductId>> = groups
        .iter()
        .map(|g| g.behavior(min_purchase).into_keys().collect())
        .collect();
    corpus::self_join(&supports)
}

/// Score group-level co-purchase pairs and expand them to member queries.
///
/// Members of one group are paired with each other at importance 1 when the
/// group has surviving behavior. Proposed mode returns one record per
/// unordered pair (`source < target`); baseline mode returns directed records
/// whose source is the query that selected them.
pub fn mine_pairs(
    groups: &[QueryGroup],
    copurchase: &[(usize, usize, u32)],
    min_purchase: u64,
    floor: f64,
    mode: MiningMode,
) -> Result<Vec<QueryPair>> {
    if !(0.0..1.0).contains(&floor) {
        return Err(Error::InvalidArgument(format!("floor {floor} outside [0, 1)")));
    }
    let dists: Vec<Option<BehaviorDistribution>> = groups
        .iter()
        .map(|g| BehaviorDistribution::from_counts(&g.behavior(min_purchase)).ok())
        .collect();

    let mut pairs = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let Some(d) = &dists[g] else { continue };
        let shared = d.probs.len() as u32;
        let members = &group.member_query_ids;
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                pairs.push(ordered_pair(a, b, 1.0, 1.0, 1.0, shared));
            }
        }
    }
    for &(ga, gb, shared) in copurchase {
        let (Some(da), Some(db)) = (&dists[ga], &dists[gb]) else {
            continue;
        };
        let imp = importance(da, db);
        if imp < floor || imp <= 0.0 {
            continue;
        }
        let fwd = rerank_target(da, db);
        let rev = rerank_target(db, da);
        for &a in &groups[ga].member_query_ids {
            for &b in &groups[gb].member_query_ids {
                pairs.push(ordered_pair(a, b, imp, fwd, rev, shared));
            }
        }
    }
    pairs.retain(|p| p.importance >= floor);
    pairs.sort_by_key(|p| (p.source, p.target));

    match mode {
        MiningMode::Proposed => Ok(pairs),
        MiningMode::BaselineTop30 => Ok(select_top_fraction(&pairs, BASELINE_KEEP_FRACTION)),
    }
}

/// Build a record with `source < target`, swapping directed targets if needed.
fn ordered_pair(a: QueryId, b: QueryId, imp: f64, fwd: f64, rev: f64, shared: u32) -> QueryPair {
    let pair = QueryPair {
        source: a,
        target: b,
        importance: imp,
        rerank_target_fwd: fwd,
        rerank_target_rev: rev,
        co_purchases: shared,
    };
    if a < b {
        pair
    } else {
        pair.reversed()
    }
}

fn select_top_fraction(pairs: &[QueryPair], fraction: f64) -> Vec<QueryPair> {
    let mut by_query: BTreeMap<QueryId, Vec<QueryPair>> = BTreeMap::new();
    for p in pairs {
        by_query.entry(p.source).or_default().push(p.clone());
        by_query.entry(p.target).or_default().push(p.reversed());
    }
    let mut out = Vec::new();
    for (_, mut outgoing) in by_query {
        outgoing.sort_by(|x, y| {
            y.importance
                .total_cmp(&x.importance)
                .then(x.target.cmp(&y.target))
        });
        let keep = (outgoing.len() as f64 * fraction).ceil() as usize;
        out.extend(outgoing.into_iter().take(keep).map(|mut p| {
            p.importance = 1.0;
            p
        }));
    }
    out.sort_by_key(|p| (p.source, p.target));
    out
}

/// Query-level co-purchase relation lifted from group-level co-purchase:
/// two queries are related when they share a normalization group or their
/// groups share a purchased product.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoPurchaseGraph {
    group_of: Vec<u32>,
    /// Sorted co-purchasing groups of each group.
    neighbors: Vec<Vec<u32>>,
}

impl CoPurchaseGraph {
    pub fn new(n_queries: usize, groups: &[QueryGroup], copurchase: &[(usize, usize, u32)]) -> Self {
        let mut group_of = vec![u32::MAX; n_queries];
        for (g, group) in groups.iter().enumerate() {
            for q in &group.member_query_ids {
                group_of[q.index()] = g as u32;
            }
        }
        let mut neighbors = vec![Vec::new(); groups.len()];
        for &(a, b, _) in copurchase {
            neighbors[a].push(b as u32);
            neighbors[b].push(a as u32);
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Self { group_of, neighbors }
    }

    pub fn group(&self, q: QueryId) -> Option<u32> {
        self.group_of.get(q.index()).copied().filter(|g| *g != u32::MAX)
    }

    pub fn same_group(&self, a: QueryId, b: QueryId) -> bool {
        matches!((self.group(a), self.group(b)), (Some(x), Some(y)) if x == y)
    }

    pub fn related(&self, a: QueryId, b: QueryId) -> bool {
        match (self.group(a), self.group(b)) {
            (Some(x), Some(y)) => x == y || self.neighbors[x as usize].binary_search(&y).is_ok(),
            _ => false,
        }
    }
}

pub fn write_pairs(path: &Path, pairs: &[QueryPair]) -> Result<()> {
    util::write_lines(
        path,
        &util::version_header(PAIRS_KIND),
        pairs.iter().map(|p| {
            format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                p.source, p.target, p.importance, p.rerank_target_fwd, p.rerank_target_rev, p.co_purchases
            )
        }),
    )
}

pub fn read_pairs(path: &Path) -> Result<Vec<QueryPair>> {
    util::read_versioned(path, PAIRS_KIND)?
        .into_iter()
        .map(|(n, line)| {
            let f = util::split_fields(path, n, &line, 6)?;
            let unit = |field: &str, what: &str| -> Result<f64> {
                let v: f64 = util::parse_field(path, n, field, what)?;
                if (0.0..=1.0).contains(&v) {
                    Ok(v)
                } else {
                    Err(Error::parse(path, n, format!("{what} {v} outside [0, 1]")))
                }
            };
            Ok(QueryPair {
                source: util::parse_field(path, n, f[0], "source id")?,
                target: util::parse_field(path, n, f[1], "target id")?,
                importance: unit(f[2], "importance")?,
                rerank_target_fwd: unit(f[3], "rerank_target_fwd")?,
                rerank_target_rev: unit(f[4], "rerank_target_rev")?,
                co_purchases: util::parse_field(path, n, f[5], "co_purchases")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(entries: &[(u32, f64)]) -> BehaviorDistribution {
        BehaviorDistribution::new(entries.iter().map(|&(p, v)| (ProductId(p), v)).collect()).unwrap()
    }

    fn set(ids: &[u32]) -> BTreeSet<ProductId> {
        ids.iter().map(|&i| ProductId(i)).collect()
    }

    /// Straight-line JSD over an explicit union support.
    fn jsd_oracle(a: &[(u32, f64)], b: &[(u32, f64)]) -> f64 {
        let support: BTreeSet<u32> = a.iter().chain(b).map(|e| e.0).collect();
        let get = |d: &[(u32, f64)], k: u32| d.iter().find(|e| e.0 == k).map_or(0.0, |e| e.1);
        let mut total = 0.0;
        for k in support {
            let (p, q) = (get(a, k), get(b, k));
            let m = (p + q) / 2.0;
            if p > 0.0 {
                total += 0.5 * p * (p / m).log2();
            }
            if q > 0.0 {
                total += 0.5 * q * (q / m).log2();
            }
        }
        total
    }

    #[test]
    fn jsd_examples() {
        let d = dist(&[(0, 0.3), (1, 0.7)]);
        assert_eq!(jsd(&d, &d), 0.0);
        assert_eq!(jsd(&dist(&[(0, 1.0)]), &dist(&[(1, 1.0)])), 1.0);
        let a = [(0, 1.0)];
        let b = [(0, 0.5), (1, 0.5)];
        let expected = jsd_oracle(&a, &b);
        assert!((expected - 0.3113).abs() < 1e-4);
        assert!((jsd(&dist(&a), &dist(&b)) - expected).abs() < 1e-12);
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        let probs = BTreeMap::from([(ProductId(0), 0.4), (ProductId(1), 0.4)]);
        assert!(matches!(BehaviorDistribution::new(probs), Err(Error::InvalidDistribution(_))));
        let probs = BTreeMap::from([(ProductId(0), 1.0), (ProductId(1), 0.0)]);
        assert!(BehaviorDistribution::new(probs).is_err());
        assert!(BehaviorDistribution::from_counts(&BTreeMap::new()).is_err());
    }

    #[test]
    fn importance_examples() {
        let d = dist(&[(0, 0.5), (1, 0.5)]);
        assert_eq!(importance(&d, &d), 1.0);
        assert_eq!(importance(&dist(&[(0, 1.0)]), &dist(&[(1, 1.0)])), 0.0);
    }

    #[test]
    fn rerank_target_examples() {
        let d = dist(&[(0, 0.5), (1, 0.5)]);
        assert_eq!(rerank_target(&d, &d), 1.0);
        assert_eq!(rerank_target(&dist(&[(0, 1.0)]), &dist(&[(1, 1.0)])), 0.0);
        let source = dist(&[(0, 0.5), (1, 0.5)]);
        let target = dist(&[(0, 1.0)]);
        let expected = 1.0 - (1.0f64 / 0.75).log2();
        assert!((expected - 0.5850).abs() < 1e-4);
        assert!((rerank_target(&source, &target) - expected).abs() < 1e-12);
        // KLD({a:.5,b:.5} || {a:.75,b:.25}) differs from the forward term.
        let reverse = rerank_target(&target, &source);
        let oracle = 1.0 - (0.5 * (0.5f64 / 0.75).log2() + 0.5 * (0.5f64 / 0.25).log2());
        assert!((reverse - oracle).abs() < 1e-12);
        assert!((reverse - rerank_target(&source, &target)).abs() > 0.1);
    }

    #[test]
    fn legacy_score_examples() {
        assert_eq!(legacy_score(&set(&[1, 2]), &set(&[1, 2])).unwrap(), 1.0);
        let s = legacy_score(&set(&[0, 1, 2]), &set(&[1, 2, 3])).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-12);
        let s = legacy_score(&set(&[0]), &set(&(0..10).collect::<Vec<_>>())).unwrap();
        assert!((s - 0.1).abs() < 1e-12);
        assert!(legacy_score(&set(&[]), &set(&[1])).is_err());
    }

    #[test]
    fn containment_pathology() {
        // A narrow query nested inside a broad one whose purchases mostly fall
        // outside the narrow set: overlap looks good, distributions do not.
        let narrow = set(&[0, 1, 2]);
        let broad = set(&[0, 1, 2, 3]);
        let legacy = legacy_score(&narrow, &broad).unwrap();
        assert!((legacy - 0.75).abs() < 1e-12);
        let d_narrow = dist(&[(0, 1.0 / 3.0), (1, 1.0 / 3.0), (2, 1.0 / 3.0)]);
        let d_broad = dist(&[(0, 0.01), (1, 0.01), (2, 0.01), (3, 0.97)]);
        assert!(importance(&d_narrow, &d_broad) < legacy);

        for size in 2..12u32 {
            let small = set(&[0]);
            let big = set(&(0..size).collect::<Vec<_>>());
            let legacy = legacy_score(&small, &big).unwrap();
            assert!((legacy - 1.0 / size as f64).abs() < 1e-12);
            let eps = 1e-3;
            let mut skew = vec![(0, eps)];
            skew.extend((1..size).map(|p| (p, (1.0 - eps) / (size - 1) as f64)));
            assert!(importance(&dist(&[(0, 1.0)]), &dist(&skew)) < legacy);
        }
    }

    fn arb_dist() -> impl Strategy<Value = BehaviorDistribution> {
        prop::collection::btree_map(0u32..12, 1u64..50, 1..8).prop_map(|m| {
            let counts = m.into_iter().map(|(k, v)| (ProductId(k), v)).collect();
            BehaviorDistribution::from_counts(&counts).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn divergence_properties(a in arb_dist(), b in arb_dist()) {
            let ab = jsd(&a, &b);
            prop_assert!((ab - jsd(&b, &a)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let halves = 0.5 * kld_to_mixture(&a, &b) + 0.5 * kld_to_mixture(&b, &a);
            prop_assert!((ab - halves).abs() <= 1e-12);
            let r = rerank_target(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }

    fn group(members: &[u32], counts: &[(u32, u64)]) -> QueryGroup {
        QueryGroup {
            normalized_text: String::new(),
            member_query_ids: members.iter().map(|&m| QueryId(m)).collect(),
            aggregated_behavior: counts.iter().map(|&(p, n)| (ProductId(p), n)).collect(),
        }
    }

    fn fixture() -> Vec<QueryGroup> {
        vec![
            group(&[0], &[(0, 10), (1, 10)]),
            group(&[1], &[(0, 9), (1, 11)]),
            group(&[2], &[(1, 2), (5, 200)]),
            group(&[3, 4], &[(0, 5), (2, 5)]),
            group(&[5], &[(7, 5)]),
        ]
    }

    #[test]
    fn floor_zero_keeps_every_copurchase_pair() {
        let groups = fixture();
        let co = group_copurchase(&groups, 1);
        let pairs = mine_pairs(&groups, &co, 1, 0.0, MiningMode::Proposed).unwrap();
        let expanded: usize = co
            .iter()
            .map(|&(a, b, _)| groups[a].member_query_ids.len() * groups[b].member_query_ids.len())
            .sum();
        assert_eq!(pairs.len(), expanded + 1);
        for p in &pairs {
            assert!(p.source < p.target);
            assert!(p.importance > 0.0 && p.co_purchases >= 1);
        }
        let intra = pairs.iter().find(|p| p.source == QueryId(3) && p.target == QueryId(4)).unwrap();
        assert_eq!(intra.importance, 1.0);
    }

    #[test]
    fn floor_excludes_weak_pairs_and_is_validated() {
        let groups = fixture();
        let co = group_copurchase(&groups, 1);
        let all = mine_pairs(&groups, &co, 1, 0.0, MiningMode::Proposed).unwrap();
        let weak = all
            .iter()
            .find(|p| p.target == QueryId(2) && p.source == QueryId(0))
            .unwrap();
        assert!(weak.importance < 0.1, "{}", weak.importance);
        let kept = mine_pairs(&groups, &co, 1, 0.1, MiningMode::Proposed).unwrap();
        assert!(kept.iter().all(|p| p.importance >= 0.1));
        assert!(!kept.iter().any(|p| p.source == weak.source && p.target == weak.target));
        assert!(mine_pairs(&groups, &co, 1, 1.0, MiningMode::Proposed).is_err());
        assert!(mine_pairs(&groups, &co, 1, -0.1, MiningMode::Proposed).is_err());
    }

    #[test]
    fn baseline_keeps_ceiling_of_thirty_percent() {
        let mut groups = vec![group(&[0], &(0..10).map(|p| (p, 10 + p as u64)).collect::<Vec<_>>())];
        for i in 0..10u32 {
            groups.push(group(&[i + 1], &[(i, 1 + i as u64), (100 + i, 5)]));
        }
        let co = group_copurchase(&groups, 1);
        let pairs = mine_pairs(&groups, &co, 1, 0.0, MiningMode::BaselineTop30).unwrap();
        let from_hub: Vec<&QueryPair> = pairs.iter().filter(|p| p.source == QueryId(0)).collect();
        assert_eq!(from_hub.len(), 3);
        assert!(pairs.iter().all(|p| p.importance == 1.0));
    }

    #[test]
    fn proposed_mining_ignores_record_order() {
        let groups = fixture();
        let mut co = group_copurchase(&groups, 1);
        let a = mine_pairs(&groups, &co, 1, 0.0, MiningMode::Proposed).unwrap();
        co.reverse();
        let b = mine_pairs(&groups, &co, 1, 0.0, MiningMode::Proposed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pairs_file_roundtrip() {
        let groups = fixture();
        let co = group_copurchase(&groups, 1);
        let pairs = mine_pairs(&groups, &co, 1, 0.0, MiningMode::Proposed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        write_pairs(&path, &pairs).unwrap();
        let back = read_pairs(&path).unwrap();
        assert_eq!(back.len(), pairs.len());
        for (x, y) in back.iter().zip(&pairs) {
            assert_eq!((x.source, x.target, x.co_purchases), (y.source, y.target, y.co_purchases));
            assert!((x.importance - y.importance).abs() <= 5e-7);
        }
    }
}
