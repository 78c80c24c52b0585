//! Lightweight query encoders with analytic gradients.
//!
//! Both models consume hashed character n-grams. The bi-encoder is a linear
//! projection followed by L2 normalization; the cross-encoder is a small
//! tanh MLP over position-aware joint features of an ordered query pair.
//! The [`QueryEmbedder`] and [`PairScorer`] traits are the seams where a
//! heavier model can be substituted.

mod bi;
mod cross;
mod features;

pub use bi::{BiEncoder, BiEncoderConfig, EmbedTrace};
pub use cross::{CrossEncoder, CrossEncoderConfig, ScoreTrace};
pub use features::{featurize, featurize_with, ngram_bag, FeatureConfig, SparseFeatures};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::version_header;

/// Unit-norm query embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalize `v`; fails for a zero or non-finite vector.
    pub fn from_unnormalized(v: Vec<f64>) -> Result<Embedding> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidArgument(
                "cannot normalize a zero or non-finite embedding".into(),
            ));
        }
        Ok(Embedding(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Anything that maps query text to a unit embedding.
pub trait QueryEmbedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding>;
}

/// Anything that scores an ordered `(source, target)` query pair.
pub trait PairScorer: Sync {
    fn score(&self, source: &str, target: &str) -> Result<f64>;
}

/// Row-sparse gradient for a `rows × width` row-major matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRows {
    pub width: usize,
    pub rows: BTreeMap<u32, Vec<f64>>,
}

impl SparseRows {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            rows: BTreeMap::new(),
        }
    }

    pub fn row_mut(&mut self, row: u32) -> &mut [f64] {
        let width = self.width;
        self.rows.entry(row).or_insert_with(|| vec![0.0; width])
    }

    /// `row += scale * v`
    pub fn add_scaled(&mut self, row: u32, scale: f64, v: &[f64]) {
        for (g, x) in self.row_mut(row).iter_mut().zip(v) {
            *g += scale * x;
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.rows.get(&(row as u32)).map_or(0.0, |r| r[col])
    }

    pub fn scale(&mut self, s: f64) {
        for r in self.rows.values_mut() {
            r.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn merge(&mut self, other: &SparseRows) {
        for (row, values) in &other.rows {
            self.add_scaled(*row, 1.0, values);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Gradient of a model: a row-sparse block for the hashed input table plus
/// a flat block for every remaining parameter, in [`Parameterized::dense_mut`] order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradient {
    pub table: SparseRows,
    pub dense: Vec<f64>,
}

impl Gradient {
    pub fn scale(&mut self, s: f64) {
        self.table.scale(s);
        self.dense.iter_mut().for_each(|x| *x *= s);
    }

    pub fn merge(&mut self, other: &Gradient) {
        self.table.merge(&other.table);
        for (a, b) in self.dense.iter_mut().zip(&other.dense) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.dense
            .iter()
            .fold(self.table.max_abs(), |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.dense.iter().all(|x| x.is_finite())
            && self.table.rows.values().flatten().all(|x| x.is_finite())
    }
}

/// Uniform access to trainable parameters for optimizers and gradient checks.
pub trait Parameterized {
    /// Row width of the hashed input table.
    fn table_width(&self) -> usize;
    /// Row-major `rows × table_width` input table.
    fn table(&self) -> &[f64];
    fn table_mut(&mut self) -> &mut [f64];
    /// All non-table parameters in a fixed order.
    fn dense_mut(&mut self) -> Vec<&mut f64>;
    fn dense_len(&self) -> usize;

    fn zero_grad(&self) -> Gradient {
        Gradient {
            table: SparseRows::new(self.table_width()),
            dense: vec![0.0; self.dense_len()],
        }
    }
}

pub(crate) fn parse_meta(path: &Path, meta: &str) -> Result<BTreeMap<String, String>> {
    meta.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::parse(path, 2, format!("malformed metadata `{kv}`")))
        })
        .collect()
}

pub(crate) fn meta_get<T: std::str::FromStr>(
    path: &Path,
    meta: &BTreeMap<String, String>,
    key: &str,
) -> Result<T> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::parse(path, 2, format!("missing `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::parse(path, 2, format!("invalid `{key}` value `{raw}`")))
}

pub(crate) fn parse_sizes(path: &Path, raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|s| {
            s.parse()
                .map_err(|_| Error::parse(path, 2, format!("invalid size list `{raw}`")))
        })
        .collect()
}

pub(crate) fn join_sizes(sizes: &[usize]) -> String {
    sizes
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Checkpoint bytes: version header, one metadata line, then little-endian f64s.
pub(crate) fn checkpoint_bytes(kind: &str, meta: &str, blocks: &[&[f64]]) -> Vec<u8> {
    let mut out = format!("{}\n{meta}\n", version_header(kind)).into_bytes();
    let total: usize = blocks.iter().map(|b| b.len()).sum();
    out.reserve(total * 8);
    for block in blocks {
        for x in *block {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub(crate) fn write_checkpoint(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Returns the metadata line and the f64 payload.
pub(crate) fn read_checkpoint(path: &Path, kind: &str) -> Result<(String, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut newlines = bytes
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'\n')
        .map(|(i, _)| i);
    let (Some(first), Some(second)) = (newlines.next(), newlines.next()) else {
        return Err(Error::parse(path, 1, "truncated checkpoint header"));
    };
    let header = String::from_utf8_lossy(&bytes[..first]);
    if header != version_header(kind) {
        return Err(Error::parse(
            path,
            1,
            format!("expected header `{}`, found `{header}`", version_header(kind)),
        ));
    }
    let meta = String::from_utf8(bytes[first + 1..second].to_vec())
        .map_err(|_| Error::parse(path, 2, "metadata is not utf-8"))?;
    let payload = &bytes[second + 1..];
    if payload.len() % 8 != 0 {
        return Err(Error::parse(path, 3, "payload length is not a multiple of 8"));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((meta, values))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fixed embeddings keyed by text, for contract tests and offline experiments.
#[derive(Clone, Debug, Default)]
pub struct TableEmbedder {
    pub dim: usize,
    pub table: BTreeMap<String, Embedding>,
}

impl QueryEmbedder for TableEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no embedding for `{text}`")))
    }
}
