//! Fuzzed properties of the behavioral divergences against a naive oracle.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use qr_core::corpus::ProductId;
use qr_core::mining::{importance, jsd, kld_to_mixture, legacy_score, rerank_target, BehaviorDistribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PAIRS: usize = 1_000;
const TOL: f64 = 1e-12;

fn random_counts(rng: &mut ChaCha8Rng) -> BTreeMap<ProductId, u64> {
    let universe = rng.random_range(1..40u32);
    let n = rng.random_range(1..=universe.min(12));
    let mut counts = BTreeMap::new();
    while counts.len() < n as usize {
        counts.insert(ProductId(rng.random_range(0..universe)), rng.random_range(1..50u64));
    }
    counts
}

/// KL(p ‖ (p+q)/2) in bits straight from the definition, over the union support.
fn kl_to_mid(p: &BTreeMap<ProductId, f64>, q: &BTreeMap<ProductId, f64>) -> f64 {
    let support: BTreeSet<&ProductId> = p.keys().chain(q.keys()).collect();
    support
        .into_iter()
        .map(|k| {
            let a = p.get(k).copied().unwrap_or(0.0);
            let b = q.get(k).copied().unwrap_or(0.0);
            if a == 0.0 {
                0.0
            } else {
                a * (2.0 * a / (a + b)).ln() / std::f64::consts::LN_2
            }
        })
        .sum()
}

#[test]
pub fn jsd_properties_over_fuzzed_pairs() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..PAIRS {
        let a = BehaviorDistribution::from_counts(&random_counts(&mut rng)).unwrap();
        let b = if i % 10 == 0 {
            a.clone()
        } else {
            BehaviorDistribution::from_counts(&random_counts(&mut rng)).unwrap()
        };
        let d = jsd(&a, &b);
        assert!((0.0..=1.0).contains(&d), "pair {i}: jsd {d} out of bounds");
        assert!((d - jsd(&b, &a)).abs() <= TOL, "pair {i}: asymmetric");
        assert!(jsd(&a, &a).abs() <= TOL, "pair {i}: identity");

        let (ka, kb) = (kld_to_mixture(&a, &b), kld_to_mixture(&b, &a));
        assert!((d - (0.5 * ka + 0.5 * kb)).abs() <= TOL, "pair {i}: decomposition");
        let oracle = 0.5 * kl_to_mid(a.probs(), b.probs()) + 0.5 * kl_to_mid(b.probs(), a.probs());
        assert!((d - oracle).abs() <= TOL, "pair {i}: jsd {d} vs oracle {oracle}");
        assert!((ka - kl_to_mid(a.probs(), b.probs())).abs() <= TOL, "pair {i}: one-sided term");

        assert!((importance(&a, &b) - (1.0 - d)).abs() <= TOL);
        assert!((rerank_target(&b, &a) - (1.0 - ka)).abs() <= TOL);
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "divergence suite took {elapsed:?}");
}

#[test]
fn disjoint_supports_have_zero_importance() {
    let a = BehaviorDistribution::from_counts(&[(ProductId(1), 3), (ProductId(2), 1)].into()).unwrap();
    let b = BehaviorDistribution::from_counts(&[(ProductId(3), 5)].into()).unwrap();
    assert_eq!(jsd(&a, &b), 1.0);
    assert_eq!(importance(&a, &b), 0.0);
    assert_eq!(rerank_target(&a, &b), 0.0);
}

#[test]
fn containment_scores_high_on_legacy_and_low_on_importance() {
    // The broad query buys mostly elsewhere but covers the niche query's products.
    let broad: BTreeMap<ProductId, u64> =
        [(ProductId(0), 1), (ProductId(1), 1), (ProductId(2), 50), (ProductId(3), 50)].into();
    let niche: BTreeMap<ProductId, u64> = [(ProductId(0), 30), (ProductId(1), 30)].into();
    let supp = |m: &BTreeMap<ProductId, u64>| m.keys().copied().collect::<BTreeSet<_>>();
    // |∩| / min = 1 and |∩| / |∪| = 0.5.
    assert!((legacy_score(&supp(&broad), &supp(&niche)).unwrap() - 0.5).abs() < TOL);
    let (b, n) = (
        BehaviorDistribution::from_counts(&broad).unwrap(),
        BehaviorDistribution::from_counts(&niche).unwrap(),
    );
    assert!(importance(&b, &n) < 0.2, "importance {}", importance(&b, &n));
}
