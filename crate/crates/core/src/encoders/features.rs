use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::util::{fnv1a, fnv1a_from};

pub const BOS: char = '^';
pub const EOS: char = '$';

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureConfig {
    pub ngram_sizes: Vec<usize>,
    pub feature_dim: usize,
    /// Wrap the text in `^`/`$` before extracting n-grams.
    pub boundary_markers: bool,
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.ngram_sizes.is_empty() || self.ngram_sizes.contains(&0) {
            return Err(Error::Config("ngram_sizes must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Hashed bag of n-grams: `(bucket, count)` sorted by bucket, no duplicates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseFeatures {
    pub entries: Vec<(u32, f64)>,
}

impl SparseFeatures {
    pub fn from_buckets(buckets: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut raw: Vec<(u32, f64)> = buckets.into_iter().collect();
        raw.sort_by_key(|e| e.0);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(raw.len());
        for (b, v) in raw {
            match entries.last_mut() {
                Some(last) if last.0 == b => last.1 += v,
                _ => entries.push((b, v)),
            }
        }
        entries.retain(|e| e.1 != 0.0);
        Self { entries }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, bucket: u32) -> f64 {
        self.entries
            .binary_search_by_key(&bucket, |e| e.0)
            .map_or(0.0, |i| self.entries[i].1)
    }
}

/// Whitespace tokens of `text`, each wrapped in boundary markers when
/// enabled, joined by single spaces.
pub(crate) fn marked(text: &str, boundary_markers: bool) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    for token in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        if boundary_markers {
            out.push(BOS);
        }
        out.push_str(token);
        if boundary_markers {
            out.push(EOS);
        }
    }
    out
}

/// Character n-grams within each token of an already marked text, with
/// their counts, sorted.
pub(crate) fn ngram_counts<'a>(marked: &'a str, ngram_sizes: &[usize]) -> Vec<(&'a str, u32)> {
    let mut grams: Vec<&str> = Vec::new();
    let mut bounds: Vec<usize> = Vec::new();
    for token in marked.split(' ') {
        bounds.clear();
        bounds.extend(token.char_indices().map(|(i, _)| i));
        bounds.push(token.len());
        let n_chars = bounds.len() - 1;
        for &n in ngram_sizes {
            if n == 0 || n > n_chars {
                continue;
            }
            grams.extend((0..=n_chars - n).map(|i| &token[bounds[i]..bounds[i + n]]));
        }
    }
    grams.sort_unstable();
    let mut out: Vec<(&str, u32)> = Vec::with_capacity(grams.len());
    for g in grams {
        match out.last_mut() {
            Some(last) if last.0 == g => last.1 += 1,
            _ => out.push((g, 1)),
        }
    }
    out
}

/// Character n-gram counts of the tokens of `text`; n-grams never span a space.
pub fn ngram_bag(text: &str, ngram_sizes: &[usize], boundary_markers: bool) -> BTreeMap<String, u32> {
    let text = marked(text, boundary_markers);
    ngram_counts(&text, ngram_sizes)
        .into_iter()
        .map(|(g, c)| (g.to_string(), c))
        .collect()
}

pub(crate) fn bucket_of(salt: u8, ngram: &str, dim: usize) -> u32 {
    (fnv1a_from(fnv1a(&[salt]), ngram.as_bytes()) % dim as u64) as u32
}

pub(crate) fn hash_counts<'a>(
    counts: impl IntoIterator<Item = (&'a str, u32)> + 'a,
    salt: u8,
    dim: usize,
) -> impl Iterator<Item = (u32, f64)> + 'a {
    counts
        .into_iter()
        .map(move |(g, c)| (bucket_of(salt, g, dim), f64::from(c)))
}

/// Hashed character n-gram counts of `text` (with per-token boundary markers).
pub fn featurize(text: &str, ngram_sizes: &[usize], feature_dim: usize) -> Result<SparseFeatures> {
    featurize_with(
        text,
        &FeatureConfig {
            ngram_sizes: ngram_sizes.to_vec(),
            feature_dim,
            boundary_markers: true,
        },
    )
}

pub fn featurize_with(text: &str, config: &FeatureConfig) -> Result<SparseFeatures> {
    if text.trim().is_empty() {
        return Err(Error::Empty("cannot featurize empty text".into()));
    }
    let text = marked(text, config.boundary_markers);
    let counts = ngram_counts(&text, &config.ngram_sizes);
    Ok(SparseFeatures::from_buckets(hash_counts(counts, 0, config.feature_dim)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bigram_without_markers() {
        let cfg = FeatureConfig {
            ngram_sizes: vec![2],
            feature_dim: 1 << 16,
            boundary_markers: false,
        };
        let f = featurize_with("ab", &cfg).unwrap();
        assert_eq!(f.nnz(), 1);
        assert_eq!(f.entries[0].1, 1.0);
    }

    #[test]
    fn repeated_bigram_counts_with_markers() {
        let bag = ngram_bag("abab", &[2], true);
        let expected: BTreeMap<String, u32> = [("^a", 1), ("ab", 2), ("ba", 1), ("b$", 1)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        assert_eq!(bag, expected);
        let dim = 1 << 20;
        let f = featurize("abab", &[2], dim).unwrap();
        assert_eq!(f.get(bucket_of(0, "ab", dim)), 2.0);
        assert_eq!(f.get(bucket_of(0, "^a", dim)), 1.0);
        assert_eq!(f.get(bucket_of(0, "b$", dim)), 1.0);
        assert_eq!(f.entries.iter().map(|e| e.1).sum::<f64>(), 5.0);
    }

    #[test]
    fn deterministic_and_rejects_empty() {
        let a = featurize("kids mask", &[2, 3, 4], 4096).unwrap();
        assert_eq!(a, featurize("kids mask", &[2, 3, 4], 4096).unwrap());
        assert!(featurize("   ", &[2], 16).is_err());
    }

    #[test]
    fn ngrams_stay_within_tokens() {
        let bag = ngram_bag("ab  cd", &[2, 3], true);
        assert!(bag.keys().all(|g| !g.contains(' ')));
        assert_eq!(bag.get("^ab"), Some(&1));
        assert_eq!(bag.get("cd$"), Some(&1));
        let f = |t| featurize(t, &[2, 3, 4], 4096).unwrap();
        assert_eq!(f("kids mask"), f("mask kids"));
    }

    #[test]
    fn multibyte_text_uses_characters() {
        let bag = ngram_bag("子供", &[2], false);
        assert_eq!(bag.len(), 1);
        assert!(bag.contains_key("子供"));
    }
}
