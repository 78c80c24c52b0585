use std::cmp::Ordering;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{hash_counts, marked, ngram_counts, FeatureConfig, SparseFeatures};
use super::{
    checkpoint_bytes, join_sizes, meta_get, parse_meta, parse_sizes, read_checkpoint,
    write_checkpoint, Gradient, PairScorer, Parameterized,
};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

const KIND: &str = "cross-encoder";

// Hash salts of the joint feature blocks.
const SALT_SOURCE: u8 = 1;
const SALT_TARGET: u8 = 2;
const SALT_BOTH: u8 = 3;
const SALT_SOURCE_ONLY: u8 = 4;
const SALT_TARGET_ONLY: u8 = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossEncoderConfig {
    pub joint_feature_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub ngram_sizes: Vec<usize>,
    pub boundary_markers: bool,
    pub seed: u64,
}

impl Default for CrossEncoderConfig {
    fn default() -> Self {
        Self {
            joint_feature_dim: 1 << 16,
            hidden_dims: vec![64, 16],
            ngram_sizes: vec![2, 3, 4],
            boundary_markers: true,
            seed: 0,
        }
    }
}

impl CrossEncoderConfig {
    fn validate(&self) -> Result<()> {
        FeatureConfig {
            ngram_sizes: self.ngram_sizes.clone(),
            feature_dim: self.joint_feature_dim,
            boundary_markers: self.boundary_markers,
        }
        .validate()?;
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Number of non-table parameters.
    fn dense_len(&self) -> usize {
        let h = &self.hidden_dims;
        let mut n = h[0];
        for l in 1..h.len() {
            n += h[l - 1] * h[l] + h[l];
        }
        n + h[h.len() - 1] + 1
    }
}

/// Position-aware pair scorer: a tanh MLP over hashed joint n-gram blocks of
/// source, target, their intersection and both one-sided differences.
///
/// Dense parameter layout: `b_0`, then `W_l` (row-major `h_{l-1} × h_l`) and
/// `b_l` for each further hidden layer, then the output weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossEncoder {
    config: CrossEncoderConfig,
    /// Row-major `joint_feature_dim × hidden_dims[0]`.
    input: Vec<f64>,
    dense: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ScoreTrace {
    pub features: SparseFeatures,
    /// tanh activations of each hidden layer.
    pub activations: Vec<Vec<f64>>,
    pub score: f64,
}

/// Joint features of the ordered pair `(source, target)`.
pub(crate) fn joint_features(
    source: &str,
    target: &str,
    config: &CrossEncoderConfig,
) -> Result<SparseFeatures> {
    if source.trim().is_empty() || target.trim().is_empty() {
        return Err(Error::Empty("cannot score a pair with empty text".into()));
    }
    let (source, target) = (
        marked(source, config.boundary_markers),
        marked(target, config.boundary_markers),
    );
    let s = ngram_counts(&source, &config.ngram_sizes);
    let t = ngram_counts(&target, &config.ngram_sizes);
    let (mut both, mut source_only, mut target_only) = (Vec::new(), Vec::new(), Vec::new());
    let (mut i, mut j) = (0, 0);
    while i < s.len() || j < t.len() {
        let order = match (s.get(i), t.get(j)) {
            (Some(a), Some(b)) => a.0.cmp(b.0),
            (Some(_), None) => Ordering::Less,
            _ => Ordering::Greater,
        };
        match order {
            Ordering::Less => {
                source_only.push(s[i]);
                i += 1;
            }
            Ordering::Greater => {
                target_only.push(t[j]);
                j += 1;
            }
            Ordering::Equal => {
                let ((g, cs), ct) = (s[i], t[j].1);
                both.push((g, cs.min(ct)));
                if cs > ct {
                    source_only.push((g, cs - ct));
                } else if ct > cs {
                    target_only.push((g, ct - cs));
                }
                i += 1;
                j += 1;
            }
        }
    }
    let dim = config.joint_feature_dim;
    Ok(SparseFeatures::from_buckets(
        hash_counts(s.iter().copied(), SALT_SOURCE, dim)
            .chain(hash_counts(t.iter().copied(), SALT_TARGET, dim))
            .chain(hash_counts(both, SALT_BOTH, dim))
            .chain(hash_counts(source_only, SALT_SOURCE_ONLY, dim))
            .chain(hash_counts(target_only, SALT_TARGET_ONLY, dim)),
    ))
}

impl CrossEncoder {
    pub fn new(config: CrossEncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let h = &config.hidden_dims;
        let input = uniform(config.joint_feature_dim * h[0], config.joint_feature_dim);
        let mut dense = uniform(h[0], config.joint_feature_dim);
        for l in 1..h.len() {
            dense.extend(uniform(h[l - 1] * h[l] + h[l], h[l - 1]));
        }
        dense.extend(uniform(h[h.len() - 1] + 1, h[h.len() - 1]));
        debug_assert_eq!(dense.len(), config.dense_len());
        Ok(Self {
            config,
            input,
            dense,
        })
    }

    pub fn config(&self) -> &CrossEncoderConfig {
        &self.config
    }

    pub fn forward(&self, source: &str, target: &str) -> Result<ScoreTrace> {
        let features = joint_features(source, target, &self.config)?;
        let h = &self.config.hidden_dims;
        let mut z = self.dense[..h[0]].to_vec();
        for &(b, x) in &features.entries {
            let row = &self.input[b as usize * h[0]..(b as usize + 1) * h[0]];
            for (acc, w) in z.iter_mut().zip(row) {
                *acc += x * w;
            }
        }
        let mut activations = vec![z.into_iter().map(f64::tanh).collect::<Vec<_>>()];
        let mut off = h[0];
        for l in 1..h.len() {
            let (rows, cols) = (h[l - 1], h[l]);
            let w = &self.dense[off..off + rows * cols];
            let bias = &self.dense[off + rows * cols..off + rows * cols + cols];
            let prev = &activations[l - 1];
            let mut z = bias.to_vec();
            for (i, a) in prev.iter().enumerate() {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj += a * w[i * cols + j];
                }
            }
            activations.push(z.into_iter().map(f64::tanh).collect());
            off += rows * cols + cols;
        }
        let last = &activations[h.len() - 1];
        let out_w = &self.dense[off..off + last.len()];
        let score = self.dense[off + last.len()]
            + last.iter().zip(out_w).map(|(a, w)| a * w).sum::<f64>();
        Ok(ScoreTrace {
            features,
            activations,
            score,
        })
    }

    /// Accumulate `dL/dθ` given `dL/ds` for the traced score `s`.
    pub fn backward(&self, trace: &ScoreTrace, d_score: f64, grad: &mut Gradient) {
        let h = &self.config.hidden_dims;
        let n = h.len();
        let mut offsets = vec![0; n];
        let mut off = h[0];
        for l in 1..n {
            offsets[l] = off;
            off += h[l - 1] * h[l] + h[l];
        }
        let last = &trace.activations[n - 1];
        let out_w = &self.dense[off..off + last.len()];
        for (i, a) in last.iter().enumerate() {
            grad.dense[off + i] += d_score * a;
        }
        grad.dense[off + last.len()] += d_score;
        let mut d_act: Vec<f64> = out_w.iter().map(|w| d_score * w).collect();
        for l in (0..n).rev() {
            let a = &trace.activations[l];
            let dz: Vec<f64> = a
                .iter()
                .zip(&d_act)
                .map(|(ai, di)| di * (1.0 - ai * ai))
                .collect();
            if l == 0 {
                for (i, d) in dz.iter().enumerate() {
                    grad.dense[i] += d;
                }
                for &(b, x) in &trace.features.entries {
                    grad.table.add_scaled(b, x, &dz);
                }
            } else {
                let (rows, cols) = (h[l - 1], h[l]);
                let o = offsets[l];
                let prev = &trace.activations[l - 1];
                let w = &self.dense[o..o + rows * cols];
                let mut d_prev = vec![0.0; rows];
                for i in 0..rows {
                    for j in 0..cols {
                        grad.dense[o + i * cols + j] += prev[i] * dz[j];
                        d_prev[i] += w[i * cols + j] * dz[j];
                    }
                }
                for j in 0..cols {
                    grad.dense[o + rows * cols + j] += dz[j];
                }
                d_act = d_prev;
            }
        }
    }

    fn meta(&self) -> String {
        let c = &self.config;
        format!(
            "joint_feature_dim={} hidden_dims={} ngram_sizes={} boundary_markers={} seed={}",
            c.joint_feature_dim,
            join_sizes(&c.hidden_dims),
            join_sizes(&c.ngram_sizes),
            u8::from(c.boundary_markers),
            c.seed
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint_bytes(KIND, &self.meta(), &[&self.input, &self.dense])
    }

    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, mut values) = read_checkpoint(path, KIND)?;
        let meta = parse_meta(path, &meta)?;
        let config = CrossEncoderConfig {
            joint_feature_dim: meta_get(path, &meta, "joint_feature_dim")?,
            hidden_dims: parse_sizes(path, &meta_get::<String>(path, &meta, "hidden_dims")?)?,
            ngram_sizes: parse_sizes(path, &meta_get::<String>(path, &meta, "ngram_sizes")?)?,
            boundary_markers: meta_get::<u8>(path, &meta, "boundary_markers")? == 1,
            seed: meta_get(path, &meta, "seed")?,
        };
        config.validate()?;
        let n_input = config.joint_feature_dim * config.hidden_dims[0];
        let expected = n_input + config.dense_len();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected: format!("{expected} parameters"),
                found: values.len().to_string(),
            });
        }
        let dense = values.split_off(n_input);
        Ok(Self {
            config,
            input: values,
            dense,
        })
    }

    pub fn load_expecting(path: &Path, expected: &CrossEncoderConfig) -> Result<Self> {
        let model = Self::load(path)?;
        let c = &model.config;
        if c.joint_feature_dim != expected.joint_feature_dim
            || c.hidden_dims != expected.hidden_dims
            || c.ngram_sizes != expected.ngram_sizes
            || c.boundary_markers != expected.boundary_markers
        {
            return Err(Error::DimensionMismatch {
                expected: format!(
                    "{} -> {}",
                    expected.joint_feature_dim,
                    join_sizes(&expected.hidden_dims)
                ),
                found: format!("{} -> {}", c.joint_feature_dim, join_sizes(&c.hidden_dims)),
            });
        }
        Ok(model)
    }
}

impl PairScorer for CrossEncoder {
    fn score(&self, source: &str, target: &str) -> Result<f64> {
        Ok(self.forward(source, target)?.score)
    }
}

impl Parameterized for CrossEncoder {
    fn table_width(&self) -> usize {
        self.config.hidden_dims[0]
    }

    fn table(&self) -> &[f64] {
        &self.input
    }

    fn table_mut(&mut self) -> &mut [f64] {
        &mut self.input
    }

    fn dense_mut(&mut self) -> Vec<&mut f64> {
        self.dense.iter_mut().collect()
    }

    fn dense_len(&self) -> usize {
        self.dense.len()
    }
}
