//! Offline metrics against exhaustive brute-force definitions on small instances.

use std::collections::{BTreeMap, BTreeSet};

use qr_core::corpus::QueryId;
use qr_core::evaluation::{auroc, ndcg_at_3_query, recall_at_k, spearman, Averaging, GroundTruth, RecallScope};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;
const MAX_CANDIDATES: usize = 8;

/// Coarse values so ties are common.
fn coarse(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0..5) as f64 * 0.25
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn dcg3(gains: impl Iterator<Item = f64>) -> f64 {
    gains.take(3).enumerate().map(|(r, g)| g / (r as f64 + 2.0).log2()).sum()
}

#[test]
pub fn ndcg_matches_permutation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let perms: Vec<Vec<Vec<usize>>> = (0..=MAX_CANDIDATES).map(permutations).collect();
    for case in 0..400 {
        let n = rng.random_range(1..=MAX_CANDIDATES);
        let cands: Vec<(QueryId, f64, f64)> =
            (0..n).map(|i| (QueryId(i as u32 * 7 % 11), coarse(&mut rng), coarse(&mut rng))).collect();
        let ideal = perms[n]
            .iter()
            .map(|p| dcg3(p.iter().map(|&i| cands[i].2)))
            .fold(0.0, f64::max);
        // The model ranking is the unique permutation ordered by score, then id.
        let ranked = perms[n]
            .iter()
            .find(|p| {
                p.windows(2).all(|w| {
                    let (a, b) = (&cands[w[0]], &cands[w[1]]);
                    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
                })
            })
            .unwrap();
        let got = ndcg_at_3_query(&cands);
        if ideal == 0.0 {
            assert_eq!(got, None, "case {case}");
        } else {
            let want = dcg3(ranked.iter().map(|&i| cands[i].2)) / ideal;
            assert!((got.unwrap() - want).abs() < TOL, "case {case}: {got:?} vs {want}");
        }
    }
}

#[test]
pub fn auroc_matches_pairwise_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 1_000 {
        let n = rng.random_range(2..=MAX_CANDIDATES);
        let scores: Vec<f64> = (0..n).map(|_| coarse(&mut rng)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        if pairs == 0.0 {
            assert!(auroc(&scores, &labels).is_err());
            continue;
        }
        checked += 1;
        assert!((auroc(&scores, &labels).unwrap() - wins / pairs).abs() < TOL);
    }
}

/// Rank of `v` among `all`: one plus the number below it plus half the other ties.
fn brute_rank(v: f64, all: &[f64]) -> f64 {
    let below = all.iter().filter(|x| **x < v).count() as f64;
    let equal = all.iter().filter(|x| **x == v).count() as f64;
    1.0 + below + (equal - 1.0) / 2.0
}

#[test]
pub fn spearman_matches_rank_pearson() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..1_000 {
        let n = rng.random_range(2..=MAX_CANDIDATES);
        let x: Vec<f64> = (0..n).map(|_| coarse(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
        let rx: Vec<f64> = x.iter().map(|v| brute_rank(*v, &x)).collect();
        let ry: Vec<f64> = y.iter().map(|v| brute_rank(*v, &y)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(&rx), mean(&ry));
        let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        match spearman(&x, &y) {
            Ok(got) => assert!((got - sxy / (sxx * syy).sqrt()).abs() < TOL, "case {case}"),
            Err(_) => assert!(sxx == 0.0 || syy == 0.0, "case {case}: unexpected error"),
        }
    }
}

#[test]
pub fn recall_matches_set_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..500 {
        let n_queries = rng.random_range(1..5);
        let mut truth = GroundTruth::default();
        let mut retrieved = BTreeMap::new();
        for q in 0..n_queries {
            let q = QueryId(100 + q);
            let partners: Vec<(QueryId, f64)> = (0..rng.random_range(1..=MAX_CANDIDATES as u32))
                .map(|p| (QueryId(p), coarse(&mut rng)))
                .collect();
            let list: Vec<QueryId> = (0..rng.random_range(0..=MAX_CANDIDATES as u32))
                .map(|_| QueryId(rng.random_range(0..12)))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            truth.partners.insert(q, partners);
            retrieved.insert(q, list);
        }
        let k = rng.random_range(1..=MAX_CANDIDATES);
        for scope in [RecallScope::Top3, RecallScope::All] {
            let (mut per_query, mut hits, mut total) = (Vec::new(), 0.0, 0.0);
            for (q, partners) in &truth.partners {
                let mut sorted = partners.clone();
                sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                let keep = if scope == RecallScope::Top3 { 3 } else { sorted.len() };
                let relevant: BTreeSet<QueryId> = sorted.iter().take(keep).map(|p| p.0).collect();
                let top_k: BTreeSet<QueryId> = retrieved[q].iter().take(k).copied().collect();
                let h = relevant.intersection(&top_k).count() as f64;
                per_query.push(h / relevant.len() as f64);
                hits += h;
                total += relevant.len() as f64;
            }
            let micro = per_query.iter().sum::<f64>() / per_query.len() as f64;
            let got_micro = recall_at_k(&retrieved, &truth, k, scope, Averaging::Micro).unwrap();
            let got_macro = recall_at_k(&retrieved, &truth, k, scope, Averaging::Macro).unwrap();
            assert!((got_micro - micro).abs() < TOL, "case {case} micro");
            assert!((got_macro - hits / total).abs() < TOL, "case {case} macro");
        }
    }
}
