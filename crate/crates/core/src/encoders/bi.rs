use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{featurize_with, FeatureConfig, SparseFeatures};
use super::{
    checkpoint_bytes, join_sizes, meta_get, parse_meta, parse_sizes, read_checkpoint,
    write_checkpoint, Embedding, Gradient, Parameterized, QueryEmbedder,
};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

const KIND: &str = "bi-encoder";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiEncoderConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub ngram_sizes: Vec<usize>,
    pub boundary_markers: bool,
    pub seed: u64,
}

impl Default for BiEncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 1 << 16,
            embed_dim: 64,
            ngram_sizes: vec![2, 3, 4],
            boundary_markers: true,
            seed: 0,
        }
    }
}

impl BiEncoderConfig {
    fn features(&self) -> FeatureConfig {
        FeatureConfig {
            ngram_sizes: self.ngram_sizes.clone(),
            feature_dim: self.feature_dim,
            boundary_markers: self.boundary_markers,
        }
    }
}

/// Hashed n-gram features projected to `embed_dim` and L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct BiEncoder {
    config: BiEncoderConfig,
    /// Row-major `feature_dim × embed_dim`.
    projection: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct EmbedTrace {
    pub features: SparseFeatures,
    pub norm: f64,
    pub embedding: Embedding,
}

impl BiEncoder {
    pub fn new(config: BiEncoderConfig) -> Result<Self> {
        config.features().validate()?;
        if config.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        let bound = 1.0 / (config.feature_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let projection = (0..config.feature_dim * config.embed_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Ok(Self { config, projection })
    }

    pub fn config(&self) -> &BiEncoderConfig {
        &self.config
    }

    pub fn forward(&self, text: &str) -> Result<EmbedTrace> {
        let features = featurize_with(text, &self.config.features())?;
        let d = self.config.embed_dim;
        let mut h = vec![0.0; d];
        for &(b, x) in &features.entries {
            let row = &self.projection[b as usize * d..(b as usize + 1) * d];
            for (acc, w) in h.iter_mut().zip(row) {
                *acc += x * w;
            }
        }
        let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        let embedding = Embedding::from_unnormalized(h)
            .map_err(|_| Error::InvalidArgument(format!("degenerate projection for `{text}`")))?;
        Ok(EmbedTrace {
            features,
            norm,
            embedding,
        })
    }

    /// Accumulate `dL/dW` given `dL/de` for the traced embedding `e`.
    pub fn backward(&self, trace: &EmbedTrace, d_embedding: &[f64], grad: &mut Gradient) {
        let e = trace.embedding.as_slice();
        let eg: f64 = e.iter().zip(d_embedding).map(|(a, b)| a * b).sum();
        let dh: Vec<f64> = e
            .iter()
            .zip(d_embedding)
            .map(|(ei, gi)| (gi - ei * eg) / trace.norm)
            .collect();
        for &(b, x) in &trace.features.entries {
            grad.table.add_scaled(b, x, &dh);
        }
    }

    /// Embed many texts in parallel, preserving order.
    pub fn embed_all(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts.par_iter().map(|t| self.embed(t)).collect()
    }

    fn meta(&self) -> String {
        let c = &self.config;
        format!(
            "feature_dim={} embed_dim={} ngram_sizes={} boundary_markers={} seed={}",
            c.feature_dim,
            c.embed_dim,
            join_sizes(&c.ngram_sizes),
            u8::from(c.boundary_markers),
            c.seed
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint_bytes(KIND, &self.meta(), &[&self.projection])
    }

    /// sha256 of the serialized checkpoint.
    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, values) = read_checkpoint(path, KIND)?;
        let meta = parse_meta(path, &meta)?;
        let config = BiEncoderConfig {
            feature_dim: meta_get(path, &meta, "feature_dim")?,
            embed_dim: meta_get(path, &meta, "embed_dim")?,
            ngram_sizes: parse_sizes(path, &meta_get::<String>(path, &meta, "ngram_sizes")?)?,
            boundary_markers: meta_get::<u8>(path, &meta, "boundary_markers")? == 1,
            seed: meta_get(path, &meta, "seed")?,
        };
        let expected = config.feature_dim * config.embed_dim;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected: format!("{expected} projection weights"),
                found: values.len().to_string(),
            });
        }
        Ok(Self {
            config,
            projection: values,
        })
    }

    /// Load and reject checkpoints whose shape differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &BiEncoderConfig) -> Result<Self> {
        let model = Self::load(path)?;
        let c = &model.config;
        if c.feature_dim != expected.feature_dim
            || c.embed_dim != expected.embed_dim
            || c.ngram_sizes != expected.ngram_sizes
            || c.boundary_markers != expected.boundary_markers
        {
            return Err(Error::DimensionMismatch {
                expected: format!(
                    "{}x{} ngrams {}",
                    expected.feature_dim,
                    expected.embed_dim,
                    join_sizes(&expected.ngram_sizes)
                ),
                found: format!(
                    "{}x{} ngrams {}",
                    c.feature_dim,
                    c.embed_dim,
                    join_sizes(&c.ngram_sizes)
                ),
            });
        }
        Ok(model)
    }
}

impl QueryEmbedder for BiEncoder {
    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        Ok(self.forward(text)?.embedding)
    }
}

impl Parameterized for BiEncoder {
    fn table_width(&self) -> usize {
        self.config.embed_dim
    }

    fn table(&self) -> &[f64] {
        &self.projection
    }

    fn table_mut(&mut self) -> &mut [f64] {
        &mut self.projection
    }

    fn dense_mut(&mut self) -> Vec<&mut f64> {
        Vec::new()
    }

    fn dense_len(&self) -> usize {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::distr::{Alphanumeric, SampleString};

    fn small(seed: u64) -> BiEncoder {
        BiEncoder::new(BiEncoderConfig {
            feature_dim: 512,
            embed_dim: 8,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn norm_is_one_for_fuzzed_strings() {
        let model = small(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let alphabet: Vec<char> = "abcxyz マスク子供不織布 -_0123".chars().collect();
        for i in 0..10_000 {
            let len = 1 + i % 17;
            let mut text: String = (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect();
            if text.trim().is_empty() {
                text.push('a');
            }
            let e = model.embed(&text).unwrap();
            let n = e.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6, "{text:?}");
        }
    }

    #[test]
    fn self_similarity_and_bounds() {
        let model = small(5);
        let a = model.embed("kids mask").unwrap();
        let b = model.embed("mask for adults").unwrap();
        assert!((a.dot(&a) - 1.0).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&a.dot(&b)));
    }

    #[test]
    fn deterministic_across_constructions() {
        let a = small(9).embed("nonwoven").unwrap();
        let b = small(9).embed("nonwoven").unwrap();
        let bits = |e: &Embedding| e.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(small(10).embed("nonwoven").unwrap(), a);
    }

    #[test]
    fn empty_text_and_zero_projection_error() {
        let mut model = small(1);
        assert!(model.embed("  ").is_err());
        model.table_mut().iter_mut().for_each(|w| *w = 0.0);
        assert!(model.embed("mask").is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bi.ckpt");
        let model = small(4);
        model.save(&path).unwrap();
        let loaded = BiEncoder::load_expecting(&path, model.config()).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded.checksum(), model.checksum());
        let other = BiEncoderConfig {
            embed_dim: 16,
            ..model.config().clone()
        };
        assert!(matches!(
            BiEncoder::load_expecting(&path, &other),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Loss: dot(embed(text), v) for a fixed direction v.
        let mut model = small(8);
        let text = "cotton mask";
        let v: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let loss = |m: &BiEncoder| {
            m.embed(text)
                .unwrap()
                .as_slice()
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let trace = model.forward(text).unwrap();
        let mut grad = model.zero_grad();
        model.backward(&trace, &v, &mut grad);
        let h = 1e-5;
        let width = model.table_width();
        for (&row, g) in &grad.table.rows {
            for col in 0..width {
                let idx = row as usize * width + col;
                let orig = model.table()[idx];
                model.table_mut()[idx] = orig + h;
                let up = loss(&model);
                model.table_mut()[idx] = orig - h;
                let down = loss(&model);
                model.table_mut()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let err = (fd - g[col]).abs() / fd.abs().max(g[col].abs()).max(1e-6);
                assert!(err <= 1e-4, "row {row} col {col}: fd {fd} analytic {}", g[col]);
            }
        }
        // Buckets the text never hashes into receive no gradient.
        let touched: Vec<u32> = trace.features.entries.iter().map(|e| e.0).collect();
        assert!(grad.table.rows.keys().all(|r| touched.contains(r)));
    }

    proptest! {
        #[test]
        fn embeddings_are_unit_norm(text in "[a-z ]{0,12}[a-z]") {
            let model = small(2);
            let e = model.embed(&text).unwrap();
            prop_assert!((e.dot(&e) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn random_alphanumeric_embeds() {
        let model = small(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = Alphanumeric.sample_string(&mut rng, 6);
            assert!(model.embed(&t).is_ok());
        }
    }
}
