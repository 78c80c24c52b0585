//! Synthetic behavior logs with known intent structure.
//!
//! Intents are (modifier, head) concept combinations plus "broad" head-only
//! intents whose catalog contains the catalogs of every specific intent with
//! the same head. Each concept has two synonyms, and each synonym has a Latin
//! spelling and a katakana spelling linked by the emitted script map, so
//! surface variants of one intent can share no characters at all while
//! queries of unrelated intents share whole tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_log, LogRow};
use crate::error::{Error, Result};
use crate::evaluation::{write_audit_labels, AuditLabel, AuditRecord};
use crate::normalizer::NormalizationConfig;
use crate::util::{parse_field, read_versioned, split_fields, version_header, write_lines};

const SYLLABLES: [(&str, &str); 30] = [
    ("ka", "カ"), ("ki", "キ"), ("ku", "ク"), ("ke", "ケ"), ("ko", "コ"),
    ("sa", "サ"), ("su", "ス"), ("se", "セ"), ("so", "ソ"), ("ta", "タ"),
    ("te", "テ"), ("to", "ト"), ("na", "ナ"), ("ni", "ニ"), ("nu", "ヌ"),
    ("ne", "ネ"), ("no", "ノ"), ("ma", "マ"), ("mi", "ミ"), ("mu", "ム"),
    ("me", "メ"), ("mo", "モ"), ("ra", "ラ"), ("ri", "リ"), ("ru", "ル"),
    ("re", "レ"), ("ro", "ロ"), ("ya", "ヤ"), ("yu", "ユ"), ("yo", "ヨ"),
];
const STOPWORDS: [&str; 4] = ["for", "the", "with", "new"];
const GENERIC: [&str; 3] = ["best", "cheap", "sale"];
const GLOBAL_PRODUCTS: usize = 20;
const QUERIES_KIND: &str = "synth-queries";
const INTENTS_KIND: &str = "synth-intents";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_intents: usize,
    pub queries_per_intent: usize,
    pub products_per_catalog: usize,
    pub zipf_exponent: f64,
    /// Fraction of heads that also get a broad intent nesting their catalogs.
    pub overlap_fraction: f64,
    pub n_heads: usize,
    pub n_modifiers: usize,
    pub purchases_per_intent: usize,
    /// Log-normal sigma of per-query product popularity noise.
    pub popularity_noise: f64,
    /// Probability a purchase goes to the shared pool of generic products.
    pub global_noise: f64,
    /// Probability a low-traffic query gets a typo.
    pub typo_rate: f64,
    pub n_audit_pairs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_intents: 40,
            queries_per_intent: 25,
            products_per_catalog: 30,
            zipf_exponent: 1.1,
            overlap_fraction: 0.5,
            n_heads: 8,
            n_modifiers: 8,
            purchases_per_intent: 800,
            popularity_noise: 0.3,
            global_noise: 0.03,
            typo_rate: 0.3,
            n_audit_pairs: 400,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return bad("overlap_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.global_noise) || !(0.0..=1.0).contains(&self.typo_rate) {
            return bad("global_noise and typo_rate must lie in [0, 1]");
        }
        if self.n_intents < 2 || self.queries_per_intent < 2 || self.products_per_catalog == 0 {
            return bad("need at least 2 intents, 2 queries per intent and 1 product per catalog");
        }
        if self.n_heads == 0 || self.n_modifiers == 0 {
            return bad("need at least one head and one modifier concept");
        }
        if !(self.zipf_exponent > 0.0) || !(self.popularity_noise >= 0.0) {
            return bad("zipf_exponent must be positive and popularity_noise non-negative");
        }
        if self.purchases_per_intent < self.queries_per_intent {
            return bad("purchases_per_intent must cover one purchase per query");
        }
        let broad = self.n_broad();
        if self.n_intents - broad > self.n_heads * self.n_modifiers {
            return bad("more specific intents than head x modifier combinations");
        }
        Ok(())
    }

    fn n_broad(&self) -> usize {
        ((self.overlap_fraction * self.n_heads as f64).round() as usize).min(self.n_intents - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum IntentKind {
    /// A modifier + head combination.
    Specific { modifier: usize, head: usize },
    /// A head alone; its catalog contains every specific catalog of the head.
    Broad { head: usize },
}

impl IntentKind {
    pub fn head(self) -> usize {
        match self {
            IntentKind::Specific { head, .. } | IntentKind::Broad { head } => head,
        }
    }

    pub fn modifier(self) -> Option<usize> {
        match self {
            IntentKind::Specific { modifier, .. } => Some(modifier),
            IntentKind::Broad { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntentCluster {
    pub intent_id: usize,
    pub kind: IntentKind,
    /// Product ids with base popularity weights.
    pub catalog: Vec<(u32, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Relation {
    Same,
    Confusable,
    Unrelated,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthGroundTruth {
    pub query_intent: BTreeMap<String, usize>,
    pub intents: Vec<IntentKind>,
}

impl SynthGroundTruth {
    pub fn intent_relation(&self, a: usize, b: usize) -> Relation {
        if a == b {
            return Relation::Same;
        }
        match (self.intents[a], self.intents[b]) {
            (IntentKind::Broad { head: h1 }, IntentKind::Specific { head: h2, .. })
            | (IntentKind::Specific { head: h1, .. }, IntentKind::Broad { head: h2 })
                if h1 == h2 =>
            {
                Relation::Confusable
            }
            _ => Relation::Unrelated,
        }
    }

    /// Relation of two raw query texts; `None` if either is unknown.
    pub fn relation(&self, a: &str, b: &str) -> Option<Relation> {
        Some(self.intent_relation(*self.query_intent.get(a)?, *self.query_intent.get(b)?))
    }

    /// Intents that share a concept with `a` but are unrelated to it.
    fn lookalikes(&self, a: usize) -> Vec<usize> {
        let ka = self.intents[a];
        (0..self.intents.len())
            .filter(|&b| {
                let kb = self.intents[b];
                self.intent_relation(a, b) == Relation::Unrelated
                    && (ka.head() == kb.head() || (ka.modifier().is_some() && ka.modifier() == kb.modifier()))
            })
            .collect()
    }

    pub fn save(&self, queries_path: &Path, intents_path: &Path) -> Result<()> {
        write_lines(
            queries_path,
            &version_header(QUERIES_KIND),
            self.query_intent.iter().map(|(q, i)| format!("{q}\t{i}")),
        )?;
        write_lines(
            intents_path,
            &version_header(INTENTS_KIND),
            self.intents.iter().enumerate().map(|(i, k)| match k {
                IntentKind::Specific { modifier, head } => format!("{i}\tspecific\t{head}\t{modifier}"),
                IntentKind::Broad { head } => format!("{i}\tbroad\t{head}\t-"),
            }),
        )
    }

    pub fn load(queries_path: &Path, intents_path: &Path) -> Result<Self> {
        let mut truth = SynthGroundTruth::default();
        for (line_no, line) in read_versioned(intents_path, INTENTS_KIND)? {
            let f = split_fields(intents_path, line_no, &line, 4)?;
            let id: usize = parse_field(intents_path, line_no, f[0], "intent id")?;
            if id != truth.intents.len() {
                return Err(Error::parse(intents_path, line_no, "intent ids must be consecutive"));
            }
            let head = parse_field(intents_path, line_no, f[2], "head")?;
            truth.intents.push(match f[1] {
                "specific" => IntentKind::Specific {
                    modifier: parse_field(intents_path, line_no, f[3], "modifier")?,
                    head,
                },
                "broad" => IntentKind::Broad { head },
                other => return Err(Error::parse(intents_path, line_no, format!("unknown intent kind `{other}`"))),
            });
        }
        for (line_no, line) in read_versioned(queries_path, QUERIES_KIND)? {
            let f = split_fields(queries_path, line_no, &line, 2)?;
            let intent: usize = parse_field(queries_path, line_no, f[1], "intent")?;
            if intent >= truth.intents.len() {
                return Err(Error::parse(queries_path, line_no, "unknown intent id"));
            }
            truth.query_intent.insert(f[0].to_string(), intent);
        }
        Ok(truth)
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub rows: Vec<LogRow>,
    pub truth: SynthGroundTruth,
    pub intents: Vec<IntentCluster>,
    pub audit: Vec<AuditRecord>,
    pub normalization: NormalizationConfig,
    /// Per-query purchase totals, for tier and tail analysis.
    pub traffic: BTreeMap<String, u64>,
}

/// One spelling of a concept: a Latin word and its katakana twin.
#[derive(Clone, Debug)]
struct Spelling {
    latin: String,
    kana: String,
}

fn vocabulary(rng: &mut ChaCha8Rng, n_concepts: usize) -> Vec<[Spelling; 2]> {
    let mut used = BTreeSet::new();
    let mut word = |rng: &mut ChaCha8Rng| loop {
        let n = rng.random_range(2..=3);
        let picks: Vec<&(&str, &str)> = (0..n).map(|_| SYLLABLES.choose(rng).expect("non-empty")).collect();
        let latin: String = picks.iter().map(|p| p.0).collect();
        if used.insert(latin.clone()) {
            return Spelling {
                latin,
                kana: picks.iter().map(|p| p.1).collect(),
            };
        }
    };
    (0..n_concepts).map(|_| [word(rng), word(rng)]).collect()
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|r| 1.0 / (r as f64).powf(s)).collect()
}

/// Distinct surface forms of an intent.
fn surfaces(rng: &mut ChaCha8Rng, kind: IntentKind, vocab: &[[Spelling; 2]], n_heads: usize, count: usize) -> Vec<String> {
    let mut out = BTreeSet::new();
    let mut attempts = 0;
    while out.len() < count && attempts < count * 200 {
        attempts += 1;
        let kana = rng.random_bool(0.5);
        let spell = |rng: &mut ChaCha8Rng, concept: usize| -> String {
            let s = &vocab[concept][rng.random_range(0..2)];
            // Scripts mix within one query now and then.
            let k = if rng.random_bool(0.2) { !kana } else { kana };
            if k { s.kana.clone() } else { s.latin.clone() }
        };
        let mut head = spell(rng, kind.head());
        if rng.random_bool(0.3) && head.is_ascii() {
            head.push('s');
        }
        let mut tokens = vec![head];
        if let Some(m) = kind.modifier() {
            tokens.push(spell(rng, n_heads + m));
        }
        if rng.random_bool(0.3) {
            tokens.push(GENERIC.choose(rng).expect("non-empty").to_string());
        }
        if rng.random_bool(0.3) {
            tokens.push(STOPWORDS.choose(rng).expect("non-empty").to_string());
        }
        tokens.shuffle(rng);
        out.insert(tokens.join(" "));
    }
    let mut out: Vec<String> = out.into_iter().collect();
    out.shuffle(rng);
    out
}

fn typo(rng: &mut ChaCha8Rng, text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let letters: Vec<usize> = (0..chars.len()).filter(|&i| chars[i].is_alphabetic()).collect();
    let Some(&i) = letters.choose(rng) else {
        return text.to_string();
    };
    let mut out = chars.clone();
    if rng.random_bool(0.5) && letters.len() > 3 {
        out.remove(i);
    } else {
        out.insert(i, chars[i]);
    }
    out.into_iter().collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = vocabulary(&mut rng, config.n_heads + config.n_modifiers);

    // Intents: specific combinations first, then broad heads.
    let n_broad = config.n_broad();
    let mut combos: Vec<(usize, usize)> = (0..config.n_modifiers)
        .flat_map(|m| (0..config.n_heads).map(move |h| (m, h)))
        .collect();
    combos.shuffle(&mut rng);
    combos.truncate(config.n_intents - n_broad);
    combos.sort_unstable();
    let mut kinds: Vec<IntentKind> = combos
        .iter()
        .map(|&(modifier, head)| IntentKind::Specific { modifier, head })
        .collect();
    let mut heads_by_use: Vec<usize> = (0..config.n_heads).collect();
    heads_by_use.sort_by_key(|h| std::cmp::Reverse(combos.iter().filter(|c| c.1 == *h).count()));
    kinds.extend(heads_by_use.into_iter().take(n_broad).map(|head| IntentKind::Broad { head }));

    // Catalogs: specific intents own disjoint ranges; broad ones nest them.
    let p = config.products_per_catalog;
    let mut next_product = GLOBAL_PRODUCTS as u32;
    let mut catalogs: Vec<Vec<u32>> = Vec::new();
    for kind in &kinds {
        let mut own: Vec<u32> = (next_product..next_product + p as u32).collect();
        next_product += p as u32;
        if let IntentKind::Broad { head } = kind {
            own.truncate(p.div_ceil(3));
            next_product -= (p - own.len()) as u32;
            for (other, k) in kinds.iter().enumerate() {
                if matches!(k, IntentKind::Specific { head: h, .. } if h == head) {
                    own.extend(&catalogs[other]);
                }
            }
        }
        catalogs.push(own);
    }
    let intents: Vec<IntentCluster> = catalogs
        .iter()
        .enumerate()
        .map(|(i, cat)| {
            let mut order = cat.clone();
            order.shuffle(&mut rng);
            let w = zipf_weights(order.len(), 1.0);
            let mut catalog: Vec<(u32, f64)> = order.into_iter().zip(w).collect();
            catalog.sort_unstable_by_key(|c| c.0);
            IntentCluster {
                intent_id: i,
                kind: kinds[i],
                catalog,
            }
        })
        .collect();

    let noise = LogNormal::new(0.0, config.popularity_noise)
        .map_err(|e| Error::Config(format!("popularity_noise: {e}")))?;
    let traffic_weights = zipf_weights(config.queries_per_intent, config.zipf_exponent);
    let mut truth = SynthGroundTruth {
        intents: kinds.clone(),
        ..Default::default()
    };
    let mut counts: BTreeMap<(String, u32), u64> = BTreeMap::new();
    let mut traffic: BTreeMap<String, u64> = BTreeMap::new();
    for intent in &intents {
        let mut texts = surfaces(&mut rng, intent.kind, &vocab, config.n_heads, config.queries_per_intent);
        let tail_start = texts.len() * 2 / 3;
        for text in texts.iter_mut().skip(tail_start) {
            if rng.random_bool(config.typo_rate) {
                let t = typo(&mut rng, text);
                if !truth.query_intent.contains_key(&t) {
                    *text = t;
                }
            }
        }
        let mut seen = BTreeSet::new();
        texts.retain(|t| !truth.query_intent.contains_key(t) && seen.insert(t.clone()));
        let mut per_query = vec![1u64; texts.len()];
        let pick = WeightedIndex::new(&traffic_weights[..texts.len()]).map_err(|e| Error::Config(e.to_string()))?;
        for _ in texts.len()..config.purchases_per_intent {
            per_query[pick.sample(&mut rng)] += 1;
        }
        for (text, &n) in texts.iter().zip(&per_query) {
            truth.query_intent.insert(text.clone(), intent.intent_id);
            traffic.insert(text.clone(), n);
            let weights: Vec<f64> = intent.catalog.iter().map(|c| c.1 * noise.sample(&mut rng)).collect();
            let products = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
            for _ in 0..n {
                let product = if rng.random_bool(config.global_noise) {
                    rng.random_range(0..GLOBAL_PRODUCTS as u32)
                } else {
                    intent.catalog[products.sample(&mut rng)].0
                };
                *counts.entry((text.clone(), product)).or_insert(0) += 1;
            }
        }
    }
    let rows: Vec<LogRow> = counts
        .into_iter()
        .map(|((query, product), purchases)| LogRow {
            query,
            product: format!("p{product:05}"),
            purchases,
        })
        .collect();

    let audit = audit_pairs(&mut rng, &truth, config.n_audit_pairs);
    let mut normalization = NormalizationConfig {
        stopwords: STOPWORDS.iter().map(|s| s.to_string()).collect(),
        stemmer_rules: vec![("s".into(), String::new())],
        sort_tokens: true,
        ..Default::default()
    };
    for pair in &vocab {
        for s in pair {
            normalization.script_map.insert(s.kana.clone(), s.latin.clone());
        }
    }
    Ok(SynthOutput {
        rows,
        truth,
        intents,
        audit,
        normalization,
        traffic,
    })
}

/// Ordered pairs labeled 2 (same intent), 1 (confusable) or 0 (unrelated
/// but sharing a concept), cycling through the labels.
fn audit_pairs(rng: &mut ChaCha8Rng, truth: &SynthGroundTruth, n: usize) -> Vec<AuditRecord> {
    let mut by_intent: Vec<Vec<&str>> = vec![Vec::new(); truth.intents.len()];
    for (q, &i) in &truth.query_intent {
        by_intent[i].push(q);
    }
    let queries: Vec<(&str, usize)> = truth.query_intent.iter().map(|(q, i)| (q.as_str(), *i)).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut attempts = 0;
    while out.len() < n && attempts < n * 100 {
        attempts += 1;
        let &(source, si) = queries.choose(rng).expect("non-empty");
        let label = [AuditLabel::StrictlyRelevant, AuditLabel::PartiallyRelevant, AuditLabel::NotRelevant][out.len() % 3];
        let candidates: Vec<usize> = match label {
            AuditLabel::StrictlyRelevant => vec![si],
            AuditLabel::PartiallyRelevant => (0..truth.intents.len())
                .filter(|&j| truth.intent_relation(si, j) == Relation::Confusable)
                .collect(),
            AuditLabel::NotRelevant => truth.lookalikes(si),
        };
        let Some(&ti) = candidates.choose(rng) else { continue };
        let Some(&target) = by_intent[ti].choose(rng) else { continue };
        if target == source || !seen.insert((source, target)) {
            continue;
        }
        out.push(AuditRecord {
            source: source.to_string(),
            target: target.to_string(),
            label,
        });
    }
    out
}

/// Files written by [`write_output`], relative to the output directory.
pub const LOG_FILE: &str = "log.tsv";
pub const TRUTH_QUERIES_FILE: &str = "truth_queries.tsv";
pub const TRUTH_INTENTS_FILE: &str = "truth_intents.tsv";
pub const AUDIT_FILE: &str = "audit_labels.tsv";
pub const NORMALIZER_FILE: &str = "normalizer/normalizer.toml";

pub fn write_output(output: &SynthOutput, dir: &Path) -> Result<()> {
    write_log(&dir.join(LOG_FILE), &output.rows)?;
    output
        .truth
        .save(&dir.join(TRUTH_QUERIES_FILE), &dir.join(TRUTH_INTENTS_FILE))?;
    write_audit_labels(&dir.join(AUDIT_FILE), &output.audit)?;
    let norm = dir.join("normalizer");
    let plain = |path: &Path, lines: Vec<String>| -> Result<()> {
        write_lines(path, "# generated resource", lines)
    };
    let n = &output.normalization;
    plain(&norm.join("stopwords.txt"), n.stopwords.iter().cloned().collect())?;
    plain(
        &norm.join("script_map.tsv"),
        n.script_map.iter().map(|(k, v)| format!("{k}\t{v}")).collect(),
    )?;
    plain(
        &norm.join("stemmer_rules.tsv"),
        n.stemmer_rules.iter().map(|(k, v)| format!("{k}\t{v}")).collect(),
    )?;
    write_lines(
        &dir.join(NORMALIZER_FILE),
        "# generated normalizer config",
        [
            "stopwords = \"stopwords.txt\"",
            "script_map = \"script_map.tsv\"",
            "stemmer_rules = \"stemmer_rules.tsv\"",
            "sort_tokens = true",
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::{importance, legacy_score, BehaviorDistribution};
    use crate::normalizer::Normalizer;

    fn small() -> SynthConfig {
        SynthConfig {
            n_intents: 10,
            queries_per_intent: 10,
            n_heads: 3,
            n_modifiers: 3,
            purchases_per_intent: 300,
            n_audit_pairs: 30,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.audit, b.audit);
        let c = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn rejects_inconsistent_config() {
        assert!(generate(&SynthConfig { overlap_fraction: 1.5, ..small() }).is_err());
        assert!(generate(&SynthConfig { n_intents: 50, ..small() }).is_err());
    }

    #[test]
    fn every_query_has_one_intent_and_purchases() {
        let out = generate(&small()).unwrap();
        let logged: BTreeSet<&str> = out.rows.iter().map(|r| r.query.as_str()).collect();
        assert_eq!(logged.len(), out.truth.query_intent.len());
        assert!(out.traffic.values().all(|n| *n >= 1));
        assert!(out.truth.query_intent.len() >= 90);
    }

    #[test]
    fn broad_catalogs_nest_specific_ones() {
        let out = generate(&small()).unwrap();
        let broad: Vec<&IntentCluster> = out.intents.iter().filter(|i| matches!(i.kind, IntentKind::Broad { .. })).collect();
        assert!(!broad.is_empty());
        for b in broad {
            let outer: BTreeSet<u32> = b.catalog.iter().map(|c| c.0).collect();
            for s in &out.intents {
                if out.truth.intent_relation(b.intent_id, s.intent_id) == Relation::Confusable {
                    assert!(s.catalog.iter().all(|c| outer.contains(&c.0)));
                }
            }
        }
    }

    #[test]
    fn disjoint_catalogs_have_zero_importance() {
        let out = generate(&SynthConfig { global_noise: 0.0, ..small() }).unwrap();
        let mut behavior: BTreeMap<&str, BTreeMap<crate::corpus::ProductId, u64>> = BTreeMap::new();
        for r in &out.rows {
            let id: u32 = r.product[1..].parse().unwrap();
            *behavior.entry(&r.query).or_default().entry(crate::corpus::ProductId(id)).or_insert(0) += r.purchases;
        }
        let mut checked = 0;
        for (a, ia) in &out.truth.query_intent {
            for (b, ib) in &out.truth.query_intent {
                if out.truth.intent_relation(*ia, *ib) == Relation::Unrelated && checked < 200 {
                    let da = BehaviorDistribution::from_counts(&behavior[a.as_str()]).unwrap();
                    let db = BehaviorDistribution::from_counts(&behavior[b.as_str()]).unwrap();
                    assert_eq!(importance(&da, &db), 0.0);
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, 200);
    }

    #[test]
    fn containment_pathology_is_realized() {
        let out = generate(&SynthConfig { seed: 3, ..SynthConfig::default() }).unwrap();
        let mut support: BTreeMap<usize, BTreeMap<crate::corpus::ProductId, u64>> = BTreeMap::new();
        for r in &out.rows {
            let id: u32 = r.product[1..].parse().unwrap();
            let intent = out.truth.query_intent[&r.query];
            *support.entry(intent).or_default().entry(crate::corpus::ProductId(id)).or_insert(0) += r.purchases;
        }
        let mut found = false;
        for a in support.keys() {
            for b in support.keys() {
                if out.truth.intent_relation(*a, *b) != Relation::Confusable {
                    continue;
                }
                let (sa, sb) = (&support[a], &support[b]);
                let legacy = legacy_score(&sa.keys().copied().collect(), &sb.keys().copied().collect()).unwrap();
                let imp = importance(
                    &BehaviorDistribution::from_counts(sa).unwrap(),
                    &BehaviorDistribution::from_counts(sb).unwrap(),
                );
                if legacy > imp {
                    found = true;
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn script_map_links_spellings() {
        let out = generate(&small()).unwrap();
        let normalizer = Normalizer::new(out.normalization.clone()).unwrap();
        let (kana, latin) = out.normalization.script_map.iter().next().unwrap();
        assert_eq!(normalizer.normalize(kana), normalizer.normalize(latin));
        assert_eq!(normalizer.normalize(&format!("{latin}s")), normalizer.normalize(latin));
    }

    #[test]
    fn audit_labels_follow_intents() {
        let out = generate(&small()).unwrap();
        assert_eq!(out.audit.len(), 30);
        for r in &out.audit {
            let rel = out.truth.relation(&r.source, &r.target).unwrap();
            let expected = match rel {
                Relation::Same => AuditLabel::StrictlyRelevant,
                Relation::Confusable => AuditLabel::PartiallyRelevant,
                Relation::Unrelated => AuditLabel::NotRelevant,
            };
            assert_eq!(r.label, expected);
        }
        for label in [AuditLabel::NotRelevant, AuditLabel::PartiallyRelevant, AuditLabel::StrictlyRelevant] {
            assert!(out.audit.iter().any(|r| r.label == label));
        }
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(&small()).unwrap();
        write_output(&out, dir.path()).unwrap();
        let rows = crate::corpus::parse_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(rows.len(), out.rows.len());
        let truth = SynthGroundTruth::load(&dir.path().join(TRUTH_QUERIES_FILE), &dir.path().join(TRUTH_INTENTS_FILE)).unwrap();
        assert_eq!(truth, out.truth);
        let config = NormalizationConfig::load(&dir.path().join(NORMALIZER_FILE)).unwrap();
        assert_eq!(config, out.normalization);
    }
}
