//! Downstream training under a transfer strategy, checkpoints and
//! evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{splitmix64, Dataset, NormalizationStats};
use crate::downstream::{
    downstream_node, init_unet_params, predict_labels, task_loss_node, unet_param_shapes, Task,
    UNetConfig, UNET_PREFIX,
};
use crate::error::{Error, Result};
use crate::metrics::{regression_from_errors, ConfusionMatrix, MetricsReport};
use crate::model::{embed_node, encoder_param_shapes, ModelConfig, ENCODER_PREFIX};
use crate::ocean::LatentEmbedding;
use crate::params::{ParamStore, ParamVars};
use crate::pretrain::{
    clip_grad_norm, epoch_order, multistep_lr, optimizer_step, AdamState, AdamW, StepReport,
};
use crate::raster::{DepthMap, MultispectralImage, SegmentationMap};
use crate::store::{load_arrays, save_arrays};
use crate::strategies::{compute_embedding, encoder_fingerprint, EmbeddingProvider, StrategyKind};
use crate::tensor::Tensor;

pub const DOWNSTREAM_KIND: &str = "downstream_checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            lr: 1e-3,
            lr_milestones: Vec::new(),
            lr_factor: 0.1,
            weight_decay: 0.0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be finite and positive"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::config("lr_factor", "must lie in (0, 1)"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "lr_milestones",
                "must be strictly increasing",
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(
                "weight_decay",
                "must be finite and non-negative",
            ));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("betas", "each beta must lie in [0, 1)"));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("eps", "must be finite and positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("grad_clip", "must be finite and positive"));
            }
        }
        Ok(())
    }

    fn adamw(&self) -> AdamW {
        AdamW {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Scheduled UNet learning rate.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        multistep_lr(self.lr, &self.lr_milestones, self.lr_factor, epoch)
    }
}

/// Normalized downstream input with its targets.
#[derive(Debug, Clone)]
pub struct DownstreamSample {
    pub id: String,
    pub image: MultispectralImage,
    pub labels: SegmentationMap,
    pub depth: DepthMap,
}

/// Normalizes every image with `stats`, ordered by id.
pub fn prepare_downstream(
    ds: &Dataset,
    stats: &NormalizationStats,
) -> Result<Vec<DownstreamSample>> {
    let mut out = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        out.push(DownstreamSample {
            id: s.id.clone(),
            image: stats.normalize_image(&s.image)?,
            labels: s.labels.clone(),
            depth: s.depth.clone(),
        });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Seed of the UNet initialization for a run seed.
pub fn unet_seed(run_seed: u64) -> u64 {
    splitmix64(run_seed ^ 0x55_4E_45_54)
}

fn check_compatible(unet: &UNetConfig, model: &ModelConfig) -> Result<()> {
    unet.validate()?;
    if unet.embed_dim != model.embed_dim {
        return Err(Error::shape(
            "UNet embed_dim vs encoder embed_dim",
            model.embed_dim,
            unet.embed_dim,
        ));
    }
    if unet.image_size != model.image_size {
        return Err(Error::shape(
            "UNet image_size vs encoder image_size",
            model.image_size,
            unet.image_size,
        ));
    }
    if unet.in_channels != model.channels {
        return Err(Error::shape(
            "UNet in_channels vs encoder channels",
            model.channels,
            unet.in_channels,
        ));
    }
    Ok(())
}

/// Checks dataset geometry (and class count for segmentation) against the
/// UNet.
pub fn check_downstream_dataset(ds: &Dataset, unet: &UNetConfig) -> Result<()> {
    let g = ds.manifest.geometry;
    if [g.height, g.width, g.channels] != [unet.image_size, unet.image_size, unet.in_channels] {
        return Err(Error::shape(
            "dataset geometry vs UNet input",
            [unet.image_size, unet.image_size, unet.in_channels],
            [g.height, g.width, g.channels],
        ));
    }
    if unet.task == Task::Seg && ds.manifest.n_classes != unet.n_classes {
        return Err(Error::shape(
            "dataset n_classes vs UNet n_classes",
            unet.n_classes,
            ds.manifest.n_classes,
        ));
    }
    Ok(())
}

/// Stateful downstream training run.
#[derive(Debug, Clone)]
pub struct FineTuner {
    pub unet_cfg: UNetConfig,
    pub cfg: FinetuneConfig,
    pub unet: ParamStore,
    pub provider: EmbeddingProvider,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub normalization: NormalizationStats,
    unet_opt: AdamState,
    encoder_opt: AdamState,
}

impl FineTuner {
    pub fn new(
        unet_cfg: UNetConfig,
        cfg: FinetuneConfig,
        provider: EmbeddingProvider,
        normalization: NormalizationStats,
    ) -> Result<Self> {
        cfg.validate()?;
        check_compatible(&unet_cfg, provider.model())?;
        normalization.validate()?;
        let unet = init_unet_params(&unet_cfg, unet_seed(cfg.seed));
        Ok(Self {
            unet_cfg,
            cfg,
            unet,
            provider,
            epoch: 0,
            loss_history: Vec::new(),
            normalization,
            unet_opt: AdamState::default(),
            encoder_opt: AdamState::default(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    fn live_encoder(&self) -> bool {
        self.unet_cfg.use_embedding && self.provider.kind() == StrategyKind::Ff
    }

    /// Loss and gradients of one sample. `z` is the cached embedding for
    /// fixed strategies; the live encoder is bound into the graph otherwise.
    fn sample_grads(
        &self,
        s: &DownstreamSample,
        z: Option<&LatentEmbedding>,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let mut pv = ParamVars::default();
        self.unet.bind_into(&mut g, &mut pv, |_| true);
        let zv: Option<Var> = if self.live_encoder() {
            self.provider.encoder().bind_into(&mut g, &mut pv, |_| true);
            Some(embed_node(&mut g, &pv, self.provider.model(), &s.image)?)
        } else {
            z.map(|z| g.constant(Tensor::row_vector(z.0.clone())))
        };
        let x = g.constant(s.image.to_tensor());
        let out = downstream_node(&mut g, &pv, &self.unet_cfg, x, zv)?;
        let loss = task_loss_node(&mut g, &self.unet_cfg, out, &s.labels, &s.depth)?;
        let grads = g.backward(loss);
        Ok((g.value(loss).data()[0], pv.collect_grads(&g, &grads)))
    }

    /// Runs one epoch and returns the mean per-sample loss.
    pub fn run_epoch(
        &mut self,
        samples: &[DownstreamSample],
        observer: &mut dyn FnMut(&StepReport),
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::config("dataset", "no samples to train on"));
        }
        let epoch = self.epoch;
        let lr = self.cfg.lr_at(epoch);
        let eta = self.provider.encoder_lr() * lr / self.cfg.lr;
        let opt = self.cfg.adamw();
        let order = epoch_order(samples.len(), self.cfg.seed, epoch);
        let fixed = self.unet_cfg.use_embedding && !self.live_encoder();
        let mut epoch_total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let zs: Vec<Option<LatentEmbedding>> = if fixed {
                batch
                    .iter()
                    .map(|&i| {
                        self.provider
                            .get_embedding(&samples[i].id, &samples[i].image)
                            .map(Some)
                    })
                    .collect::<Result<_>>()?
            } else {
                vec![None; batch.len()]
            };
            let this = &*self;
            let per_sample: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = batch
                .par_iter()
                .zip(zs.par_iter())
                .map(|(&i, z)| this.sample_grads(&samples[i], z.as_ref()))
                .collect();
            let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for (r, &i) in per_sample.into_iter().zip(batch) {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss of sample `{}` at epoch {epoch}",
                        samples[i].id
                    )));
                }
                batch_loss += loss;
                for (name, g) in grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.add_scaled(&g, 1.0),
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
            }
            let k = 1.0 / batch.len() as f64;
            for g in sum.values_mut() {
                g.scale(k);
            }
            if let Some(c) = self.cfg.grad_clip {
                clip_grad_norm(&mut sum, c);
            }
            let (enc, unet): (BTreeMap<_, _>, BTreeMap<_, _>) = sum
                .clone()
                .into_iter()
                .partition(|(n, _)| n.starts_with(ENCODER_PREFIX));
            optimizer_step(&mut self.unet, &unet, &mut self.unet_opt, lr, &opt)?;
            self.unet.round_to_f32();
            self.unet_opt.round_to_f32();
            if !enc.is_empty() {
                let encoder = self.provider.encoder_mut()?;
                optimizer_step(encoder, &enc, &mut self.encoder_opt, eta, &opt)?;
                encoder.round_to_f32();
                self.encoder_opt.round_to_f32();
            }
            observer(&StepReport {
                epoch,
                step: self.unet_opt.step,
                lr,
                loss: batch_loss * k,
                grads: &sum,
            });
            epoch_total += batch_loss;
        }
        let mean = epoch_total / samples.len() as f64;
        self.loss_history.push(mean);
        self.epoch += 1;
        Ok(mean)
    }

    pub fn run(
        &mut self,
        samples: &[DownstreamSample],
        observer: &mut dyn FnMut(&StepReport),
    ) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(samples, observer)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> DownstreamCheckpoint {
        DownstreamCheckpoint {
            meta: DownstreamMeta {
                model: self.provider.model().clone(),
                unet: self.unet_cfg.clone(),
                finetune: self.cfg.clone(),
                strategy: self.provider.kind(),
                encoder_lr: self.provider.encoder_lr(),
                epoch: self.epoch,
                loss_history: self.loss_history.clone(),
                normalization: self.normalization.clone(),
                encoder_fingerprint: encoder_fingerprint(self.provider.encoder()),
            },
            unet: self.unet.clone(),
            encoder: self.provider.encoder().clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamMeta {
    pub model: ModelConfig,
    pub unet: UNetConfig,
    pub finetune: FinetuneConfig,
    pub strategy: StrategyKind,
    pub encoder_lr: f64,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub normalization: NormalizationStats,
    pub encoder_fingerprint: String,
}

/// Trained UNet plus the encoder that feeds it.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamCheckpoint {
    pub meta: DownstreamMeta,
    pub unet: ParamStore,
    pub encoder: ParamStore,
}

pub fn save_downstream(path: &Path, ckpt: &DownstreamCheckpoint) -> Result<()> {
    let mut arrays = ckpt.unet.as_map().clone();
    arrays.extend(ckpt.encoder.as_map().clone());
    save_arrays(path, DOWNSTREAM_KIND, &ckpt.meta, &arrays)
}

pub fn load_downstream(path: &Path) -> Result<DownstreamCheckpoint> {
    let (meta, arrays): (DownstreamMeta, BTreeMap<String, Tensor>) =
        load_arrays(path, DOWNSTREAM_KIND)?;
    meta.model.validate()?;
    check_compatible(&meta.unet, &meta.model)?;
    meta.normalization.validate()?;
    let (encoder, unet): (BTreeMap<_, _>, BTreeMap<_, _>) = arrays
        .into_iter()
        .partition(|(n, _)| n.starts_with(ENCODER_PREFIX));
    let unet = ParamStore::from_map(unet);
    let encoder = ParamStore::from_map(encoder);
    unet.validate_shapes(&unet_param_shapes(&meta.unet))?;
    encoder.validate_shapes(&encoder_param_shapes(&meta.model))?;
    if encoder_fingerprint(&encoder) != meta.encoder_fingerprint {
        return Err(Error::Fingerprint {
            cached: meta.encoder_fingerprint.clone(),
            current: encoder_fingerprint(&encoder),
        });
    }
    debug_assert!(unet.names().all(|n| n.starts_with(UNET_PREFIX)));
    Ok(DownstreamCheckpoint {
        meta,
        unet,
        encoder,
    })
}

/// Prediction for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Labels(SegmentationMap),
    Depth(DepthMap),
}

/// Embedding the trained model saw for `image` (normalized): fixed
/// strategies used `f32`-rounded cache entries.
pub fn checkpoint_embedding(
    ckpt: &DownstreamCheckpoint,
    image: &MultispectralImage,
) -> Result<LatentEmbedding> {
    let mut z = compute_embedding(&ckpt.meta.model, &ckpt.encoder, image)?;
    if ckpt.meta.strategy.is_fixed() {
        for v in &mut z.0 {
            *v = *v as f32 as f64;
        }
    }
    Ok(z)
}

/// Runs the model on one raw (unnormalized) image.
pub fn predict(ckpt: &DownstreamCheckpoint, raw_image: &MultispectralImage) -> Result<Prediction> {
    let image = ckpt.meta.normalization.normalize_image(raw_image)?;
    let mut g = Graph::new();
    let pv = ckpt.unet.bind(&mut g, false);
    let z = if ckpt.meta.unet.use_embedding {
        let z = checkpoint_embedding(ckpt, &image)?;
        Some(g.constant(Tensor::row_vector(z.0)))
    } else {
        None
    };
    let x = g.constant(image.to_tensor());
    let out = downstream_node(&mut g, &pv, &ckpt.meta.unet, x, z)?;
    let t = g.value(out).clone();
    Ok(match ckpt.meta.unet.task {
        Task::Seg => Prediction::Labels(predict_labels(&t)?),
        Task::Bathy => Prediction::Depth(DepthMap::all_valid(
            image.height,
            image.width,
            t.into_data(),
        )?),
    })
}

/// Metrics of `ckpt` over `ds`, plus the per-sample predictions in dataset
/// order.
pub fn evaluate(
    ckpt: &DownstreamCheckpoint,
    ds: &Dataset,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    check_downstream_dataset(ds, &ckpt.meta.unet)?;
    let preds: Vec<Prediction> = ds
        .samples
        .par_iter()
        .map(|s| predict(ckpt, &s.image))
        .collect::<Result<_>>()?;
    let report = match ckpt.meta.unet.task {
        Task::Seg => {
            let mut cm = ConfusionMatrix::new(ckpt.meta.unet.n_classes);
            for (s, p) in ds.samples.iter().zip(&preds) {
                let Prediction::Labels(p) = p else {
                    unreachable!()
                };
                cm.accumulate(&s.labels.labels, &p.labels, ds.manifest.ignore_label)?;
            }
            MetricsReport::segmentation(&cm)?
        }
        Task::Bathy => {
            let mut errors = Vec::new();
            for (s, p) in ds.samples.iter().zip(&preds) {
                let Prediction::Depth(p) = p else {
                    unreachable!()
                };
                for (((pd, pv), td), tv) in p
                    .depth
                    .iter()
                    .zip(&p.valid)
                    .zip(&s.depth.depth)
                    .zip(&s.depth.valid)
                {
                    if *pv && *tv {
                        errors.push(pd - td);
                    }
                }
            }
            MetricsReport::regression(&regression_from_errors(&errors)?)
        }
    };
    Ok((report, preds))
}

/// Copy of `ds` whose targets are replaced by `preds`.
pub fn predictions_dataset(ds: &Dataset, preds: &[Prediction]) -> Result<Dataset> {
    if preds.len() != ds.len() {
        return Err(Error::shape("prediction count", ds.len(), preds.len()));
    }
    let mut out = ds.clone();
    for (s, p) in out.samples.iter_mut().zip(preds) {
        match p {
            Prediction::Labels(l) => s.labels = l.clone(),
            Prediction::Depth(d) => {
                let mut d = d.clone();
                for v in &mut d.depth {
                    *v = *v as f32 as f64;
                }
                s.depth = d;
            }
        }
    }
    Ok(out)
}
