//! Exact cosine k-nearest-neighbor index over behavior-rich query embeddings.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::QueryId;
use crate::encoders::{Embedding, QueryEmbedder};
use crate::error::{Error, Result};
use crate::util::version_header;

const KIND: &str = "knn-index";

/// Brute-force index. Entries are sorted by query id and unit-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnIndex {
    dim: usize,
    ids: Vec<QueryId>,
    vectors: Vec<f64>,
    model_checksum: String,
}

/// Ranking order: similarity descending, then query id ascending.
fn rank_order(a: &(QueryId, f64), b: &(QueryId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

impl KnnIndex {
    /// Build from precomputed embeddings in any order.
    pub fn from_embeddings(
        mut entries: Vec<(QueryId, Embedding)>,
        model_checksum: impl Into<String>,
    ) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::Empty("cannot build an index over no queries".into()));
        };
        let dim = first.1.dim();
        entries.sort_by_key(|e| e.0);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument(format!("query {} indexed twice", w[0].0)));
        }
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (id, e) in &entries {
            if e.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim.to_string(),
                    found: format!("{} for query {id}", e.dim()),
                });
            }
            vectors.extend_from_slice(e.as_slice());
        }
        Ok(Self {
            dim,
            ids: entries.into_iter().map(|e| e.0).collect(),
            vectors,
            model_checksum: model_checksum.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[QueryId] {
        &self.ids
    }

    pub fn model_checksum(&self) -> &str {
        &self.model_checksum
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact top-`k` by dot product; returns `min(k, len)` results.
    pub fn knn(&self, probe: &Embedding, k: usize) -> Result<Vec<(QueryId, f64)>> {
        if probe.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim.to_string(),
                found: probe.dim().to_string(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let p = probe.as_slice();
        let mut scored: Vec<(QueryId, f64)> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, self.vector(i).iter().zip(p).map(|(a, b)| a * b).sum()))
            .collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(scored)
    }

    /// `knn` for many probes in parallel, in probe order.
    pub fn knn_batch(&self, probes: &[Embedding], k: usize) -> Result<Vec<Vec<(QueryId, f64)>>> {
        probes.par_iter().map(|p| self.knn(p, k)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "{}\ndim={} count={} model_checksum={}\n",
            version_header(KIND),
            self.dim,
            self.len(),
            self.model_checksum
        )
        .into_bytes();
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&id.0.to_le_bytes());
            for x in self.vector(i) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Load an index; with `expected_checksum`, reject an index built by a
    /// different model checkpoint.
    pub fn load(path: &Path, expected_checksum: Option<&str>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cut = bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').map(|(i, _)| i);
        let (Some(h), Some(m)) = (cut.next(), cut.next()) else {
            return Err(Error::parse(path, 1, "truncated index header"));
        };
        if bytes[..h] != *version_header(KIND).as_bytes() {
            return Err(Error::parse(path, 1, format!("expected header `{}`", version_header(KIND))));
        }
        let meta = std::str::from_utf8(&bytes[h + 1..m])
            .map_err(|_| Error::parse(path, 2, "metadata is not utf-8"))?;
        let mut dim = None;
        let mut count = None;
        let mut checksum = None;
        for kv in meta.split_whitespace() {
            match kv.split_once('=') {
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("count", v)) => count = v.parse::<usize>().ok(),
                Some(("model_checksum", v)) => checksum = Some(v.to_string()),
                _ => return Err(Error::parse(path, 2, format!("unexpected metadata `{kv}`"))),
            }
        }
        let (Some(dim), Some(count), Some(checksum)) = (dim, count, checksum) else {
            return Err(Error::parse(path, 2, "index metadata needs dim, count and model_checksum"));
        };
        if let Some(expected) = expected_checksum {
            if expected != checksum {
                return Err(Error::Checksum {
                    expected: expected.to_string(),
                    found: checksum,
                });
            }
        }
        let payload = &bytes[m + 1..];
        let row = 4 + 8 * dim;
        if payload.len() != row * count {
            return Err(Error::DimensionMismatch {
                expected: format!("{} payload bytes", row * count),
                found: payload.len().to_string(),
            });
        }
        let mut ids = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count * dim);
        for chunk in payload.chunks_exact(row) {
            ids.push(QueryId(u32::from_le_bytes(chunk[..4].try_into().expect("4 bytes"))));
            vectors.extend(
                chunk[4..]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            );
        }
        Ok(Self {
            dim,
            ids,
            vectors,
            model_checksum: checksum,
        })
    }
}

/// Embed `queries` with `model` and index them.
pub fn build_index<E: QueryEmbedder>(
    model: &E,
    queries: &[(QueryId, &str)],
    model_checksum: &str,
) -> Result<KnnIndex> {
    if queries.is_empty() {
        return Err(Error::Empty("cannot build an index over no queries".into()));
    }
    let embedded = queries
        .par_iter()
        .map(|(id, text)| model.embed(text).map(|e| (*id, e)))
        .collect::<Result<Vec<_>>>()?;
    KnnIndex::from_embeddings(embedded, model_checksum)
}
