//! Query text canonicalization and behavior grouping.
//!
//! The pipeline runs in a fixed order: lowercase, protected-entity masking,
//! script mapping, tokenization (whitespace, `_`, punctuation and script
//! boundaries), stop-word removal, suffix stemming, code-point token sort,
//! join with `_`. The pass is repeated until it reaches a fixed point, which
//! makes `normalize` idempotent even when one stage exposes work for an
//! earlier one (a stem that is also a stop word, say).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::corpus::{Corpus, ProductId, QueryId};
use crate::error::{Error, Result};

pub const SEPARATOR: char = '_';
const MAX_PASSES: usize = 16;
const MIN_STEM_CHARS: usize = 2;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormalizationConfig {
    pub stopwords: BTreeSet<String>,
    pub script_map: BTreeMap<String, String>,
    pub protected_entities: BTreeSet<String>,
    /// `(suffix, replacement)`; applied longest suffix first.
    pub stemmer_rules: Vec<(String, String)>,
    pub sort_tokens: bool,
    /// Optional dictionary used to split same-script runs into words.
    pub lexicon: BTreeSet<String>,
}

/// On-disk form: paths are resolved relative to the config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    stopwords: Option<PathBuf>,
    script_map: Option<PathBuf>,
    entities: Option<PathBuf>,
    stemmer_rules: Option<PathBuf>,
    lexicon: Option<PathBuf>,
    #[serde(default = "default_true")]
    sort_tokens: bool,
}

fn default_true() -> bool {
    true
}

fn resource_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn read_word_list(path: &Path) -> Result<BTreeSet<String>> {
    Ok(resource_lines(path)?
        .into_iter()
        .map(|(_, l)| l.trim().to_string())
        .collect())
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    resource_lines(path)?
        .into_iter()
        .map(|(line_no, l)| match l.split_once('\t') {
            Some((a, b)) => Ok((a.trim().to_string(), b.trim().to_string())),
            None => Err(Error::parse(path, line_no, "expected `from<TAB>to`")),
        })
        .collect()
}

impl NormalizationConfig {
    pub fn load(path: &Path) -> Result<NormalizationConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ConfigFile =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Option<PathBuf>| p.as_ref().map(|p| base.join(p));
        let mut config = NormalizationConfig {
            sort_tokens: file.sort_tokens,
            ..Default::default()
        };
        if let Some(p) = resolve(&file.stopwords) {
            config.stopwords = read_word_list(&p)?;
        }
        if let Some(p) = resolve(&file.entities) {
            config.protected_entities = read_word_list(&p)?;
        }
        if let Some(p) = resolve(&file.lexicon) {
            config.lexicon = read_word_list(&p)?;
        }
        if let Some(p) = resolve(&file.script_map) {
            config.script_map = read_pairs(&p)?.into_iter().collect();
        }
        if let Some(p) = resolve(&file.stemmer_rules) {
            config.stemmer_rules = read_pairs(&p)?;
        }
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Normalized {
    pub text: String,
    /// Input had tokens but every one was removed as a stop word.
    pub all_stopwords: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Script {
    Han,
    Hiragana,
    Katakana,
    Hangul,
    Devanagari,
    Other,
}

fn script_of(c: char) -> Script {
    match c as u32 {
        0x3040..=0x309F => Script::Hiragana,
        0x30A0..=0x30FF | 0x31F0..=0x31FF | 0xFF66..=0xFF9D => Script::Katakana,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x3005 | 0x3007 => Script::Han,
        0x1100..=0x11FF | 0x3130..=0x318F | 0xAC00..=0xD7AF => Script::Hangul,
        0x0900..=0x097F => Script::Devanagari,
        _ => Script::Other,
    }
}

fn is_separator(c: char) -> bool {
    c == SEPARATOR || c.is_whitespace() || !c.is_alphanumeric()
}

#[derive(Clone, Debug, PartialEq)]
enum Segment {
    Text(String),
    Entity(String),
}

#[derive(Clone, Debug)]
struct Token {
    text: String,
    protected: bool,
}

/// Compiled normalizer. Cheap to share across threads.
#[derive(Clone, Debug)]
pub struct Normalizer {
    config: NormalizationConfig,
    /// Longest first.
    entities: Vec<String>,
    map_keys: Vec<String>,
    stem_rules: Vec<(String, String)>,
    lexicon_max_chars: usize,
}

impl Normalizer {
    pub fn new(mut config: NormalizationConfig) -> Result<Normalizer> {
        config.stopwords = config.stopwords.iter().map(|s| s.to_lowercase()).collect();
        config.protected_entities = config
            .protected_entities
            .iter()
            .map(|s| s.to_lowercase())
            .filter(|s| !s.trim().is_empty())
            .collect();
        config.lexicon = config.lexicon.iter().map(|s| s.to_lowercase()).collect();
        for e in &config.protected_entities {
            if e.contains(SEPARATOR) {
                return Err(Error::Config(format!("protected entity `{e}` contains `_`")));
            }
        }
        for (k, v) in &config.script_map {
            if k.is_empty() || k.chars().any(is_separator) || v.chars().any(is_separator) {
                return Err(Error::Config(format!(
                    "script map entry `{k}` -> `{v}` must be a non-empty run of word characters"
                )));
            }
        }
        let mut entities: Vec<String> = config.protected_entities.iter().cloned().collect();
        entities.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let mut map_keys: Vec<String> = config.script_map.keys().cloned().collect();
        map_keys.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let mut stem_rules = config.stemmer_rules.clone();
        stem_rules.sort_by(|a, b| b.0.chars().count().cmp(&a.0.chars().count()).then(a.cmp(b)));
        let lexicon_max_chars = config.lexicon.iter().map(|w| w.chars().count()).max().unwrap_or(0);
        let normalizer = Normalizer {
            config,
            entities,
            map_keys,
            stem_rules,
            lexicon_max_chars,
        };
        for v in normalizer.config.script_map.values() {
            if normalizer.map_script(v) != *v {
                return Err(Error::Config(format!(
                    "script map output `{v}` is not a fixed point of the map"
                )));
            }
        }
        Ok(normalizer)
    }

    pub fn config(&self) -> &NormalizationConfig {
        &self.config
    }

    pub fn normalize(&self, raw: &str) -> String {
        self.normalize_detailed(raw).text
    }

    pub fn normalize_detailed(&self, raw: &str) -> Normalized {
        let (mut text, all_stopwords) = self.pass(raw);
        for _ in 0..MAX_PASSES {
            let (next, _) = self.pass(&text);
            if next == text {
                break;
            }
            text = next;
        }
        Normalized { text, all_stopwords }
    }

    fn pass(&self, raw: &str) -> (String, bool) {
        let lower = raw.to_lowercase();
        let mut tokens = Vec::new();
        for segment in self.mask_entities(&lower) {
            match segment {
                Segment::Entity(e) => tokens.push(Token {
                    text: e,
                    protected: true,
                }),
                Segment::Text(t) => {
                    let mapped = self.map_script(&t);
                    for tok in self.tokenize(&mapped) {
                        tokens.push(Token {
                            text: tok,
                            protected: false,
                        });
                    }
                }
            }
        }
        let had_tokens = !tokens.is_empty();
        let mut kept: Vec<String> = tokens
            .into_iter()
            .filter(|t| t.protected || !self.config.stopwords.contains(&t.text))
            .map(|t| if t.protected { t.text } else { self.stem(&t.text) })
            .filter(|t| !t.is_empty())
            .collect();
        if self.config.sort_tokens {
            kept.sort();
        }
        let all_stopwords = had_tokens && kept.is_empty();
        (kept.join(&SEPARATOR.to_string()), all_stopwords)
    }

    fn mask_entities(&self, text: &str) -> Vec<Segment> {
        if self.entities.is_empty() {
            return vec![Segment::Text(text.to_string())];
        }
        let mut segments = Vec::new();
        let mut plain_start = 0;
        let mut i = 0;
        while i < text.len() {
            let rest = &text[i..];
            if let Some(e) = self.entities.iter().find(|e| rest.starts_with(e.as_str())) {
                if plain_start < i {
                    segments.push(Segment::Text(text[plain_start..i].to_string()));
                }
                segments.push(Segment::Entity(e.clone()));
                i += e.len();
                plain_start = i;
            } else {
                i += rest.chars().next().map_or(1, char::len_utf8);
            }
        }
        if plain_start < text.len() {
            segments.push(Segment::Text(text[plain_start..].to_string()));
        }
        segments
    }

    /// Leftmost-longest replacement of script-map keys.
    fn map_script(&self, text: &str) -> String {
        if self.map_keys.is_empty() {
            return text.to_string();
        }
        let mut out = String::with_capacity(text.len());
        let mut i = 0;
        while i < text.len() {
            let rest = &text[i..];
            if let Some(k) = self.map_keys.iter().find(|k| rest.starts_with(k.as_str())) {
                out.push_str(&self.config.script_map[k]);
                i += k.len();
            } else {
                let c = rest.chars().next().expect("non-empty remainder");
                out.push(c);
                i += c.len_utf8();
            }
        }
        out
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        let mut current = String::new();
        let mut current_script = None;
        for c in text.chars() {
            if is_separator(c) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                current_script = None;
                continue;
            }
            let script = script_of(c);
            if current_script.is_some_and(|s| s != script) && !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            current_script = Some(script);
            current.push(c);
        }
        if !current.is_empty() {
            tokens.push(current);
        }
        if self.config.lexicon.is_empty() {
            return tokens;
        }
        tokens.into_iter().flat_map(|t| self.segment(t)).collect()
    }

    /// Greedy longest-match split against the lexicon; tokens that do not
    /// decompose completely are left whole.
    fn segment(&self, token: String) -> Vec<String> {
        let chars: Vec<char> = token.chars().collect();
        let mut parts = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let longest = (1..=self.lexicon_max_chars.min(chars.len() - i))
                .rev()
                .map(|len| chars[i..i + len].iter().collect::<String>())
                .find(|w| self.config.lexicon.contains(w));
            match longest {
                Some(w) => {
                    i += w.chars().count();
                    parts.push(w);
                }
                None => return vec![token],
            }
        }
        parts
    }

    fn stem(&self, token: &str) -> String {
        let n = token.chars().count();
        for (suffix, replacement) in &self.stem_rules {
            let k = suffix.chars().count();
            if token.ends_with(suffix.as_str()) && n - k >= MIN_STEM_CHARS {
                let mut out = token[..token.len() - suffix.len()].to_string();
                out.push_str(replacement);
                return out;
            }
        }
        token.to_string()
    }
}

/// Queries sharing a normalized form, with summed (pre-filter) behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGroup {
    pub normalized_text: String,
    pub member_query_ids: Vec<QueryId>,
    pub aggregated_behavior: BTreeMap<ProductId, u64>,
}

impl QueryGroup {
    /// Group behavior after re-applying the purchase filter.
    pub fn behavior(&self, min_purchase: u64) -> BTreeMap<ProductId, u64> {
        self.aggregated_behavior
            .iter()
            .filter(|(_, &n)| n >= min_purchase)
            .map(|(&p, &n)| (p, n))
            .collect()
    }
}

/// Normalize every query, record the text on the corpus and group queries by
/// normalized form. Queries that normalize to nothing stay in singleton groups.
pub fn group_queries(corpus: &mut Corpus, normalizer: &Normalizer) -> Vec<QueryGroup> {
    use rayon::prelude::*;
    let normalized: Vec<String> = corpus
        .queries()
        .par_iter()
        .map(|q| normalizer.normalize(&q.raw_text))
        .collect();
    for (i, text) in normalized.into_iter().enumerate() {
        corpus.set_normalized_text(QueryId(i as u32), text);
    }
    groups_from_normalized(corpus)
}

/// Group queries by the normalized text already stored on the corpus.
pub fn groups_from_normalized(corpus: &Corpus) -> Vec<QueryGroup> {
    let mut by_text: BTreeMap<&str, Vec<QueryId>> = BTreeMap::new();
    let mut singletons = Vec::new();
    for q in corpus.queries() {
        if q.normalized_text.is_empty() {
            singletons.push(q.id);
        } else {
            by_text.entry(&q.normalized_text).or_default().push(q.id);
        }
    }
    let mut groups: Vec<QueryGroup> = by_text
        .into_iter()
        .map(|(text, members)| make_group(corpus, text.to_string(), members))
        .collect();
    groups.extend(
        singletons
            .into_iter()
            .map(|id| make_group(corpus, String::new(), vec![id])),
    );
    groups
}

/// One group per query: the ungrouped baseline.
pub fn singleton_groups(corpus: &Corpus) -> Vec<QueryGroup> {
    corpus
        .queries()
        .iter()
        .map(|q| make_group(corpus, q.normalized_text.clone(), vec![q.id]))
        .collect()
}

fn make_group(corpus: &Corpus, normalized_text: String, members: Vec<QueryId>) -> QueryGroup {
    let mut aggregated_behavior = BTreeMap::new();
    for id in &members {
        for (p, n) in corpus.raw_behavior(*id) {
            *aggregated_behavior.entry(*p).or_insert(0) += n;
        }
    }
    QueryGroup {
        normalized_text,
        member_query_ids: members,
        aggregated_behavior,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LogRow;
    use proptest::prelude::*;

    fn cfg() -> NormalizationConfig {
        NormalizationConfig {
            stopwords: ["for", "the", "with"].iter().map(|s| s.to_string()).collect(),
            script_map: [("こども", "子供"), ("colour", "color")]
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            protected_entities: ["tp-link", "pixel watch"].iter().map(|s| s.to_string()).collect(),
            stemmer_rules: vec![("es".into(), "".into()), ("s".into(), "".into()), ("ies".into(), "y".into())],
            sort_tokens: true,
            lexicon: BTreeSet::new(),
        }
    }

    fn normalizer() -> Normalizer {
        Normalizer::new(cfg()).unwrap()
    }

    #[test]
    fn japanese_tokens_sorted_by_code_point() {
        let n = normalizer();
        assert_eq!(n.normalize("子供 マスク 不織布"), "マスク_不織布_子供");
        assert_eq!(n.normalize("子供マスク不織布"), "マスク_不織布_子供");
    }

    #[test]
    fn script_map_unifies_spellings() {
        let n = normalizer();
        assert_eq!(n.normalize("こども マスク"), n.normalize("子供 マスク"));
    }

    #[test]
    fn already_normalized_is_unchanged() {
        let n = normalizer();
        let once = n.normalize("Red Colour Boxes for the kids");
        assert_eq!(once, "box_color_kid_red");
        assert_eq!(n.normalize(&once), once);
    }

    #[test]
    fn stemming_prefers_longest_suffix() {
        let n = normalizer();
        assert_eq!(n.normalize("puppies"), "puppy");
    }

    #[test]
    fn entities_survive_verbatim() {
        let n = normalizer();
        let out = n.normalize("TP-Link adapters for pixel watches");
        assert!(out.contains("tp-link"), "{out}");
        assert!(out.contains("pixel watch"), "{out}");
    }

    #[test]
    fn all_stopwords_is_flagged() {
        let n = normalizer();
        let r = n.normalize_detailed("for the");
        assert_eq!(r.text, "");
        assert!(r.all_stopwords);
        assert!(!n.normalize_detailed("").all_stopwords);
    }

    #[test]
    fn lexicon_splits_same_script_runs() {
        let mut c = cfg();
        c.lexicon = ["マスク", "ガーゼ"].iter().map(|s| s.to_string()).collect();
        let n = Normalizer::new(c).unwrap();
        assert_eq!(n.normalize("ガーゼマスク"), "ガーゼ_マスク");
        assert_eq!(n.normalize("ガーゼマスクx"), "x_ガーゼ_マスク");
        assert_eq!(n.normalize("マスクガ"), "マスクガ");
    }

    #[test]
    fn config_rejects_non_fixed_point_map() {
        let mut c = cfg();
        c.script_map.insert("a".into(), "b".into());
        c.script_map.insert("b".into(), "c".into());
        assert!(Normalizer::new(c).is_err());
        let mut c = cfg();
        c.protected_entities.insert("a_b".into());
        assert!(Normalizer::new(c).is_err());
    }

    #[test]
    fn config_file_loads_resources() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(d.join("stop.txt"), "# stop words\nfor\n").unwrap();
        fs::write(d.join("map.tsv"), "こども\t子供\n").unwrap();
        fs::write(d.join("ent.txt"), "ACME\n").unwrap();
        fs::write(d.join("stem.tsv"), "s\t\n").unwrap();
        fs::write(
            d.join("norm.toml"),
            "stopwords = \"stop.txt\"\nscript_map = \"map.tsv\"\nentities = \"ent.txt\"\nstemmer_rules = \"stem.tsv\"\n",
        )
        .unwrap();
        let n = Normalizer::new(NormalizationConfig::load(&d.join("norm.toml")).unwrap()).unwrap();
        assert_eq!(n.normalize("ACMEs masks for こども"), "acme_mask_s_子供");
    }

    #[test]
    fn grouping_sums_behavior_across_the_threshold() {
        let rows = [
            LogRow { query: "kid masks".into(), product: "pA".into(), purchases: 1 },
            LogRow { query: "masks kid".into(), product: "pA".into(), purchases: 1 },
            LogRow { query: "solo".into(), product: "pB".into(), purchases: 3 },
        ];
        let mut corpus = Corpus::from_rows(&rows, 2, 20).unwrap();
        let groups = group_queries(&mut corpus, &normalizer());
        assert_eq!(groups.len(), 2);
        let kid = groups.iter().find(|g| g.member_query_ids.len() == 2).unwrap();
        let pa = corpus.products().iter().position(|p| p == "pA").unwrap();
        assert_eq!(kid.behavior(2), BTreeMap::from([(ProductId(pa as u32), 2)]));
        for id in &kid.member_query_ids {
            assert!(corpus.behavior(*id).is_empty());
        }
        let solo = groups.iter().find(|g| g.member_query_ids.len() == 1).unwrap();
        assert_eq!(solo.aggregated_behavior, *corpus.raw_behavior(solo.member_query_ids[0]));
    }

    #[test]
    fn idempotent_on_random_fuzz_corpus() {
        use rand::{Rng, SeedableRng};
        let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz ABCS_-.,éİßこどもマスク子供不織布ー 1234"
            .chars()
            .collect();
        let n = normalizer();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10_000 {
            let len = rng.random_range(0..24);
            let s: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
            let once = n.normalize(&s);
            assert_eq!(n.normalize(&once), once, "input {s:?}");
        }
    }

    proptest! {
        #[test]
        fn idempotent_on_arbitrary_strings(s in "\\PC{0,30}") {
            let n = normalizer();
            let once = n.normalize(&s);
            prop_assert_eq!(n.normalize(&once), once);
        }

        #[test]
        fn protected_entity_is_kept(prefix in "[a-z ]{0,8}", suffix in "[a-z ]{0,8}") {
            let n = normalizer();
            let raw = format!("{prefix}tp-link{suffix}");
            prop_assert!(n.normalize(&raw).contains("tp-link"));
        }

        #[test]
        fn grouping_is_a_partition(queries in prop::collection::btree_set("[a-c ]{1,6}", 1..30)) {
            let rows: Vec<LogRow> = queries
                .iter()
                .map(|q| LogRow { query: q.trim().to_string(), product: "p".into(), purchases: 1 })
                .filter(|r| !r.query.is_empty())
                .collect();
            prop_assume!(!rows.is_empty());
            let mut corpus = Corpus::from_rows(&rows, 1, 20).unwrap();
            let groups = group_queries(&mut corpus, &normalizer());
            let mut seen: Vec<QueryId> = groups.iter().flat_map(|g| g.member_query_ids.clone()).collect();
            prop_assert_eq!(seen.len(), corpus.len());
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), corpus.len());
            for g in &groups {
                for m in &g.member_query_ids {
                    prop_assert_eq!(&corpus.query(*m).normalized_text, &g.normalized_text);
                }
            }
        }
    }
}
