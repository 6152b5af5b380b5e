//! How the pre-trained encoder supplies embeddings to the downstream model.
//!
//! * `random`: a freshly initialized encoder seeded from the run seed;
//!   embeddings are computed once per sample and cached.
//! * `fe`: the pre-trained encoder, frozen; embeddings are cached.
//! * `ff`: the pre-trained encoder trained jointly with the UNet at its own
//!   learning rate; embeddings are recomputed on every call.
//!
//! Cached vectors are rounded to `f32` so that the on-disk cache is exact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{splitmix64, NormalizationStats};
use crate::error::{Error, Result};
use crate::model::{embed_node, init_encoder_params, ModelConfig, ENCODER_PREFIX};
use crate::ocean::LatentEmbedding;
use crate::params::ParamStore;
use crate::pretrain::load_checkpoint;
use crate::raster::MultispectralImage;
use crate::store::{load_arrays, save_arrays};
use crate::tensor::Tensor;

pub const CACHE_KIND: &str = "embedding_cache";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Random,
    /// Frozen pre-trained encoder.
    Fe,
    /// Fully fine-tuned pre-trained encoder.
    Ff,
}

impl StrategyKind {
    pub fn uses_checkpoint(self) -> bool {
        matches!(self, StrategyKind::Fe | StrategyKind::Ff)
    }

    pub fn is_fixed(self) -> bool {
        matches!(self, StrategyKind::Random | StrategyKind::Fe)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StrategyKind::Random => "random",
            StrategyKind::Fe => "fe",
            StrategyKind::Ff => "ff",
        })
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(StrategyKind::Random),
            "fe" => Ok(StrategyKind::Fe),
            "ff" => Ok(StrategyKind::Ff),
            other => Err(Error::config(
                "strategy",
                format!("unknown strategy `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Encoder learning rate. `None` means 0 for fixed strategies and the
    /// base learning rate for `ff`.
    pub encoder_lr: Option<f64>,
    /// Pre-training checkpoint directory (`fe`/`ff`).
    pub checkpoint: Option<PathBuf>,
    /// Embedding cache directory (`random`/`fe`).
    pub cache: Option<PathBuf>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Fe,
            encoder_lr: None,
            checkpoint: None,
            cache: None,
        }
    }
}

impl StrategyConfig {
    /// Checks the configuration and returns the effective encoder rate.
    pub fn resolve_encoder_lr(&self, base_lr: f64) -> Result<f64> {
        let eta = match (self.kind, self.encoder_lr) {
            (StrategyKind::Ff, None) => base_lr,
            (_, Some(v)) => v,
            (_, None) => 0.0,
        };
        if !eta.is_finite() || eta < 0.0 {
            return Err(Error::config(
                "encoder_lr",
                "must be finite and non-negative",
            ));
        }
        match self.kind {
            StrategyKind::Ff if eta <= 0.0 => Err(Error::config(
                "encoder_lr",
                "the ff strategy needs a positive encoder learning rate",
            )),
            k if k.is_fixed() && eta != 0.0 => Err(Error::config(
                "encoder_lr",
                format!("the {k} strategy keeps the encoder fixed; encoder_lr must be 0"),
            )),
            _ => Ok(eta),
        }
    }

    pub fn validate(&self, base_lr: f64) -> Result<()> {
        self.resolve_encoder_lr(base_lr)?;
        if self.kind.uses_checkpoint() && self.checkpoint.is_none() {
            return Err(Error::config(
                "checkpoint",
                format!("the {} strategy needs a pre-training checkpoint", self.kind),
            ));
        }
        if self.kind == StrategyKind::Ff && self.cache.is_some() {
            return Err(Error::config(
                "cache",
                "the ff strategy recomputes embeddings and takes no cache",
            ));
        }
        Ok(())
    }
}

/// Fingerprint of the `encoder.*` parameters of `params`.
pub fn encoder_fingerprint(params: &ParamStore) -> String {
    params.subset(ENCODER_PREFIX).fingerprint()
}

/// Seed of the randomly initialized encoder for a run seed.
pub fn random_encoder_seed(run_seed: u64) -> u64 {
    splitmix64(run_seed ^ 0x52_41_4E_44)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheMeta {
    fingerprint: String,
    embed_dim: usize,
}

/// Per-sample embeddings tied to the encoder that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub fingerprint: String,
    pub embed_dim: usize,
    pub entries: BTreeMap<String, Vec<f64>>,
    pub hits: usize,
    pub misses: usize,
}

impl EmbeddingCache {
    pub fn new(fingerprint: String, embed_dim: usize) -> Self {
        Self {
            fingerprint,
            embed_dim,
            entries: BTreeMap::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = CacheMeta {
            fingerprint: self.fingerprint.clone(),
            embed_dim: self.embed_dim,
        };
        let arrays = self
            .entries
            .iter()
            .map(|(id, v)| (id.clone(), Tensor::new(vec![v.len()], v.clone())))
            .collect();
        save_arrays(dir, CACHE_KIND, &meta, &arrays)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, arrays): (CacheMeta, BTreeMap<String, Tensor>) = load_arrays(dir, CACHE_KIND)?;
        let mut entries = BTreeMap::new();
        for (id, t) in arrays {
            if t.shape() != [meta.embed_dim] {
                return Err(Error::ArrayMismatch {
                    name: id,
                    expected: vec![meta.embed_dim],
                    actual: t.shape().to_vec(),
                });
            }
            entries.insert(id, t.into_data());
        }
        Ok(Self {
            fingerprint: meta.fingerprint,
            embed_dim: meta.embed_dim,
            entries,
            hits: 0,
            misses: 0,
        })
    }
}

/// CLS embedding of a fully visible, normalized image.
pub fn compute_embedding(
    model: &ModelConfig,
    encoder: &ParamStore,
    image: &MultispectralImage,
) -> Result<LatentEmbedding> {
    let mut g = Graph::new();
    let pv = encoder.bind(&mut g, false);
    let z = embed_node(&mut g, &pv, model, image)?;
    Ok(LatentEmbedding(g.value(z).data().to_vec()))
}

/// Source of downstream embeddings under one strategy.
#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    kind: StrategyKind,
    model: ModelConfig,
    encoder: ParamStore,
    encoder_lr: f64,
    cache: EmbeddingCache,
    normalization: Option<NormalizationStats>,
}

impl EmbeddingProvider {
    /// Low-level constructor. `encoder` must hold exactly the encoder
    /// parameters of `model`. Unlike [`StrategyConfig`], this accepts
    /// `encoder_lr == 0` for `ff`.
    pub fn new(
        kind: StrategyKind,
        model: ModelConfig,
        encoder: ParamStore,
        encoder_lr: f64,
        normalization: Option<NormalizationStats>,
    ) -> Result<Self> {
        model.validate()?;
        encoder.validate_shapes(&crate::model::encoder_param_shapes(&model))?;
        if kind.is_fixed() && encoder_lr != 0.0 {
            return Err(Error::Strategy(format!(
                "the {kind} strategy cannot train the encoder"
            )));
        }
        let cache = EmbeddingCache::new(encoder_fingerprint(&encoder), model.embed_dim);
        Ok(Self {
            kind,
            model,
            encoder,
            encoder_lr,
            cache,
            normalization,
        })
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn encoder(&self) -> &ParamStore {
        &self.encoder
    }

    /// Mutable encoder access, only for `ff`.
    pub fn encoder_mut(&mut self) -> Result<&mut ParamStore> {
        if self.kind != StrategyKind::Ff {
            return Err(Error::Strategy(format!(
                "the {} strategy keeps the encoder fixed",
                self.kind
            )));
        }
        Ok(&mut self.encoder)
    }

    pub fn encoder_lr(&self) -> f64 {
        self.encoder_lr
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    /// Statistics the encoder was pre-trained with, if any.
    pub fn normalization(&self) -> Option<&NormalizationStats> {
        self.normalization.as_ref()
    }

    /// Replaces the cache after checking it was produced by this encoder.
    pub fn attach_cache(&mut self, cache: EmbeddingCache) -> Result<()> {
        if !self.kind.is_fixed() {
            return Err(Error::Strategy(
                "the ff strategy does not use a cache".into(),
            ));
        }
        let current = encoder_fingerprint(&self.encoder);
        if cache.fingerprint != current {
            return Err(Error::Fingerprint {
                cached: cache.fingerprint,
                current,
            });
        }
        if cache.embed_dim != self.model.embed_dim {
            return Err(Error::shape(
                "cached embedding width",
                self.model.embed_dim,
                cache.embed_dim,
            ));
        }
        self.cache = cache;
        Ok(())
    }

    /// Embedding of sample `id` whose normalized image is `image`. Fixed
    /// strategies answer from the cache when possible; `ff` always runs the
    /// current encoder.
    pub fn get_embedding(
        &mut self,
        id: &str,
        image: &MultispectralImage,
    ) -> Result<LatentEmbedding> {
        if !self.kind.is_fixed() {
            return compute_embedding(&self.model, &self.encoder, image);
        }
        if let Some(v) = self.cache.entries.get(id) {
            self.cache.hits += 1;
            return Ok(LatentEmbedding(v.clone()));
        }
        let mut z = compute_embedding(&self.model, &self.encoder, image)?;
        for v in &mut z.0 {
            *v = *v as f32 as f64;
        }
        self.cache.misses += 1;
        self.cache.entries.insert(id.to_string(), z.0.clone());
        Ok(z)
    }
}

/// Builds the provider for `cfg`. `model` and `run_seed` configure the
/// random encoder; for `fe`/`ff` the model configuration and statistics come
/// from the checkpoint. A cache directory that already exists is loaded and
/// must match the encoder fingerprint.
pub fn build_provider(
    cfg: &StrategyConfig,
    model: &ModelConfig,
    run_seed: u64,
    base_lr: f64,
) -> Result<EmbeddingProvider> {
    cfg.validate(base_lr)?;
    let eta = cfg.resolve_encoder_lr(base_lr)?;
    let mut provider = match cfg.kind {
        StrategyKind::Random => EmbeddingProvider::new(
            cfg.kind,
            model.clone(),
            init_encoder_params(model, random_encoder_seed(run_seed)),
            eta,
            None,
        )?,
        StrategyKind::Fe | StrategyKind::Ff => {
            let path = cfg.checkpoint.as_ref().expect("validated");
            if !path.join(crate::store::MANIFEST).exists() {
                return Err(Error::MissingCheckpoint(path.clone()));
            }
            let ckpt = load_checkpoint(path)?;
            EmbeddingProvider::new(
                cfg.kind,
                ckpt.meta.model.clone(),
                ckpt.params.subset(ENCODER_PREFIX),
                eta,
                Some(ckpt.meta.normalization.clone()),
            )?
        }
    };
    if let Some(dir) = &cfg.cache {
        if dir.join(crate::store::MANIFEST).exists() {
            provider.attach_cache(EmbeddingCache::load(dir)?)?;
        }
    }
    Ok(provider)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::{save_checkpoint, PretrainConfig, Trainer};

    fn image(model: &ModelConfig, v: f64) -> MultispectralImage {
        let s = model.image_size;
        let data = (0..s * s * model.channels)
            .map(|i| v * (i as f64 * 0.37).sin())
            .collect();
        MultispectralImage::new(s, s, model.channels, data).unwrap()
    }

    #[test]
    fn eta_rules() {
        let mut cfg = StrategyConfig {
            kind: StrategyKind::Ff,
            ..Default::default()
        };
        assert_eq!(cfg.resolve_encoder_lr(1e-3).unwrap(), 1e-3);
        cfg.encoder_lr = Some(0.0);
        assert!(cfg.resolve_encoder_lr(1e-3).is_err());
        cfg.kind = StrategyKind::Fe;
        assert_eq!(cfg.resolve_encoder_lr(1e-3).unwrap(), 0.0);
        cfg.encoder_lr = Some(1e-4);
        assert!(cfg.resolve_encoder_lr(1e-3).is_err());
        assert!("zz".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = StrategyConfig {
            kind: StrategyKind::Fe,
            checkpoint: Some(dir.path().join("nope")),
            ..Default::default()
        };
        let err = build_provider(&cfg, &ModelConfig::tiny(), 0, 1e-3).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }

    #[test]
    fn random_provider_is_reproducible_and_cached() {
        let model = ModelConfig::tiny();
        let cfg = StrategyConfig {
            kind: StrategyKind::Random,
            ..Default::default()
        };
        let mut a = build_provider(&cfg, &model, 3, 1e-3).unwrap();
        let mut b = build_provider(&cfg, &model, 3, 1e-3).unwrap();
        let img = image(&model, 1.0);
        let za = a.get_embedding("x", &img).unwrap();
        assert_eq!(za, b.get_embedding("x", &img).unwrap());
        assert_eq!(za.width(), model.embed_dim);
        assert_eq!(a.get_embedding("x", &img).unwrap(), za);
        assert_eq!((a.cache().hits, a.cache().misses), (1, 1));
        assert_eq!(a.cache().entries, b.cache().entries);
    }

    #[test]
    fn cache_round_trip_and_fingerprint_guard() {
        let model = ModelConfig::tiny();
        let cfg = StrategyConfig {
            kind: StrategyKind::Random,
            ..Default::default()
        };
        let mut p = build_provider(&cfg, &model, 3, 1e-3).unwrap();
        p.get_embedding("a", &image(&model, 1.0)).unwrap();
        p.get_embedding("b", &image(&model, -2.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.cache().save(dir.path()).unwrap();
        let back = EmbeddingCache::load(dir.path()).unwrap();
        assert_eq!(back.entries, p.cache().entries);
        assert!(back
            .entries
            .values()
            .flatten()
            .zip(p.cache().entries.values().flatten())
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        let mut other = build_provider(&cfg, &model, 4, 1e-3).unwrap();
        assert!(matches!(
            other.attach_cache(back),
            Err(Error::Fingerprint { .. })
        ));
    }

    #[test]
    fn fe_provider_reads_checkpoint() {
        let model = ModelConfig::tiny();
        let stats = NormalizationStats {
            channel_mean: vec![0.0; model.channels],
            channel_std: vec![1.0; model.channels],
            ocean_mean: vec![0.0; 3],
            ocean_std: vec![1.0; 3],
        };
        let trainer =
            Trainer::new(model.clone(), PretrainConfig::default(), stats.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &trainer.checkpoint()).unwrap();
        let cfg = StrategyConfig {
            kind: StrategyKind::Fe,
            checkpoint: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let mut p = build_provider(&cfg, &ModelConfig::default(), 0, 1e-3).unwrap();
        assert_eq!(p.model(), &model);
        assert_eq!(p.normalization(), Some(&stats));
        assert_eq!(
            encoder_fingerprint(p.encoder()),
            encoder_fingerprint(&trainer.params)
        );
        let img = image(&model, 0.5);
        assert_eq!(
            p.get_embedding("s", &img).unwrap(),
            p.get_embedding("s", &img).unwrap()
        );
        assert!(p.encoder_mut().is_err());
    }
}
