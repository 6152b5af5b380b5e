//! Stage-one objective, optimizer, learning-rate schedule, training loop and
//! checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{splitmix64, Dataset, NormalizationStats};
use crate::error::{Error, Result};
use crate::model::{
    init_mae_params, mae_loss_and_grads, mae_param_shapes, patchify, sample_mask, MaskPlan,
    ModelConfig, PatchSequence,
};
use crate::ocean::{OceanFeatureVector, PROJ_BIAS, PROJ_WEIGHT};
use crate::params::ParamStore;
use crate::store::{load_arrays, save_arrays};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "pretrain_checkpoint";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    /// Lower bound on the scheduled rate; `None` disables the clamp.
    pub lr_floor: Option<f64>,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Zero the ocean input and the fusion projection (plain-MAE arm).
    pub no_ocean: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            initial_lr: 1e-3,
            lr_milestones: vec![5, 10, 15],
            lr_factor: 0.1,
            lr_floor: None,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip: None,
            no_ocean: false,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr >= 0.0) {
            return Err(Error::config(
                "initial_lr",
                "must be finite and non-negative",
            ));
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
        if let Some(f) = self.lr_floor {
            if !(f.is_finite() && f >= 0.0) {
                return Err(Error::config("lr_floor", "must be finite and non-negative"));
            }
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

    pub fn adamw(&self) -> AdamW {
        AdamW {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Mean over masked patches of the per-patch mean squared error. Visible
/// patches are never read.
pub fn mse_masked(targets: &PatchSequence, recon: &PatchSequence, plan: &MaskPlan) -> Result<f64> {
    if targets.patch_vectors.shape() != recon.patch_vectors.shape() {
        return Err(Error::shape(
            "reconstruction shape",
            targets.patch_vectors.shape(),
            recon.patch_vectors.shape(),
        ));
    }
    if plan.n_patches() != targets.n_patches() {
        return Err(Error::shape(
            "mask plan size",
            targets.n_patches(),
            plan.n_patches(),
        ));
    }
    if plan.masked_indices.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut total = 0.0;
    for &i in &plan.masked_indices {
        let (t, r) = (targets.patch(i), recon.patch(i));
        let sq: f64 = t.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / t.len() as f64;
    }
    Ok(total / plan.masked_indices.len() as f64)
}

/// `initial_lr * lr_factor^(milestones <= epoch)`, optionally clamped from
/// below by `lr_floor`.
pub fn lr_at(epoch: usize, cfg: &PretrainConfig) -> f64 {
    let lr = multistep_lr(cfg.initial_lr, &cfg.lr_milestones, cfg.lr_factor, epoch);
    match cfg.lr_floor {
        Some(floor) => lr.max(floor.min(cfg.initial_lr)),
        None => lr,
    }
}

/// `initial * factor^(milestones <= epoch)`.
pub fn multistep_lr(initial: f64, milestones: &[usize], factor: f64, epoch: usize) -> f64 {
    let drops = milestones.iter().filter(|&&m| m <= epoch).count();
    initial * factor.powi(drops as i32)
}

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// First/second moments per parameter and the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn round_to_f32(&mut self) {
        for t in self.m.values_mut().chain(self.v.values_mut()) {
            t.round_to_f32();
        }
    }
}

/// One AdamW update with a single learning rate.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    optimizer_step_grouped(params, grads, state, |_| lr, opt)
}

/// One AdamW update where each parameter's rate comes from `lr_of(name)`.
/// Only parameters present in `grads` move. Decay is decoupled: `p *= 1 -
/// lr * wd` before the adaptive step. Non-finite gradients reject the whole
/// step before anything is modified.
pub fn optimizer_step_grouped(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr_of: impl Fn(&str) -> f64,
    opt: &AdamW,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::MissingArray(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::ArrayMismatch {
                name: name.clone(),
                expected: p.shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = opt.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let lr = lr_of(name);
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let decay = 1.0 - lr * opt.weight_decay;
        for (((pi, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi *= decay;
            *pi -= lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.scale(k);
        }
    }
    norm
}

/// Normalized, tokenized pre-training input.
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub id: String,
    pub patches: PatchSequence,
    pub ocean: OceanFeatureVector,
}

/// Normalizes every sample with the dataset statistics and tokenizes it.
/// Samples are ordered by id so that training does not depend on the order
/// of the dataset on disk.
pub fn prepare_samples(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    no_ocean: bool,
) -> Result<Vec<PretrainSample>> {
    let stats = ds.stats();
    let mut out = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let image = stats.normalize_image(&s.image)?;
        let ocean = if no_ocean {
            OceanFeatureVector::zeros(model_cfg.n_ocean)
        } else {
            stats.standardize_ocean(&s.ocean)?
        };
        out.push(PretrainSample {
            id: s.id.clone(),
            patches: patchify(&image, model_cfg)?,
            ocean,
        });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Mask seed for one sample in one epoch.
pub fn mask_seed(seed: u64, epoch: usize, id: &str) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(id.as_bytes())) ^ epoch as u64)
}

/// Sample visiting order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed.wrapping_add(0xA5A5)) ^ epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// What one optimizer step saw, handed to training observers.
#[derive(Debug)]
pub struct StepReport<'a> {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Batch-mean gradients, after clipping.
    pub grads: &'a BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub normalization: NormalizationStats,
    pub optimizer_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub optimizer: AdamState,
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    let mut arrays = ckpt.params.as_map().clone();
    for (name, t) in &ckpt.optimizer.m {
        arrays.insert(format!("{ADAM_M}{name}"), t.clone());
    }
    for (name, t) in &ckpt.optimizer.v {
        arrays.insert(format!("{ADAM_V}{name}"), t.clone());
    }
    let mut meta = ckpt.meta.clone();
    meta.optimizer_step = ckpt.optimizer.step;
    save_arrays(path, CHECKPOINT_KIND, &meta, &arrays)
}

/// Loads a checkpoint, validating every array against the shapes implied
/// by the manifest's model configuration.
pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let (meta, arrays): (CheckpointMeta, BTreeMap<String, Tensor>) =
        load_arrays(path, CHECKPOINT_KIND)?;
    meta.model.validate()?;
    meta.pretrain.validate()?;
    meta.normalization.validate()?;
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, t) in arrays {
        if let Some(p) = name.strip_prefix(ADAM_M) {
            m.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix(ADAM_V) {
            v.insert(p.to_string(), t);
        } else {
            params.insert(name, t);
        }
    }
    let params = ParamStore::from_map(params);
    let expected = mae_param_shapes(&meta.model);
    params.validate_shapes(&expected)?;
    for (prefix, moments) in [(ADAM_M, &m), (ADAM_V, &v)] {
        for (name, t) in moments {
            let shape = expected
                .get(name)
                .ok_or_else(|| Error::UnexpectedArray(format!("{prefix}{name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ArrayMismatch {
                    name: format!("{prefix}{name}"),
                    expected: shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
    }
    if meta.loss_history.len() != meta.epoch {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!(
                "loss history has {} entries for {} completed epochs",
                meta.loss_history.len(),
                meta.epoch
            ),
        });
    }
    let optimizer = AdamState {
        step: meta.optimizer_step,
        m,
        v,
    };
    Ok(ModelCheckpoint {
        meta,
        params,
        optimizer,
    })
}

/// Stateful pre-training run. Everything needed to continue lives in the
/// checkpoint: the shuffle order and mask draws are pure functions of the
/// seed, epoch and sample id.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelConfig,
    pub cfg: PretrainConfig,
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub normalization: NormalizationStats,
}

impl Trainer {
    pub fn new(
        model: ModelConfig,
        cfg: PretrainConfig,
        normalization: NormalizationStats,
    ) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        normalization.validate()?;
        let mut params = init_mae_params(&model, cfg.seed);
        if cfg.no_ocean {
            for name in [PROJ_WEIGHT, PROJ_BIAS] {
                let t = params.get_mut(name).expect("fusion parameters exist");
                t.data_mut().fill(0.0);
            }
        }
        Ok(Self {
            model,
            cfg,
            params,
            optimizer: AdamState::default(),
            epoch: 0,
            loss_history: Vec::new(),
            normalization,
        })
    }

    pub fn from_checkpoint(ckpt: ModelCheckpoint) -> Self {
        Self {
            model: ckpt.meta.model,
            cfg: ckpt.meta.pretrain,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            epoch: ckpt.meta.epoch,
            loss_history: ckpt.meta.loss_history,
            normalization: ckpt.meta.normalization,
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    fn trainable(&self, name: &str) -> bool {
        !(self.cfg.no_ocean && name == PROJ_BIAS)
    }

    /// Runs one epoch over `samples` (from [`prepare_samples`]) and returns
    /// its mean per-sample loss.
    pub fn run_epoch(
        &mut self,
        samples: &[PretrainSample],
        observer: &mut dyn FnMut(&StepReport),
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::config("dataset", "no samples to train on"));
        }
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.cfg);
        let opt = self.cfg.adamw();
        let order = epoch_order(samples.len(), self.cfg.seed, epoch);
        let mut epoch_total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let params = &self.params;
            let model = &self.model;
            let cfg = &self.cfg;
            let per_sample: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let plan = sample_mask(
                        s.patches.n_patches(),
                        model.mask_ratio,
                        mask_seed(cfg.seed, epoch, &s.id),
                    )?;
                    mae_loss_and_grads(model, params, &s.patches, &s.ocean, &plan, |n| {
                        !(cfg.no_ocean && n == PROJ_BIAS)
                    })
                })
                .collect();
            // Reduce in batch order so the sum does not depend on threading.
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
            debug_assert!(sum.keys().all(|n| self.trainable(n)));
            optimizer_step(&mut self.params, &sum, &mut self.optimizer, lr, &opt)?;
            self.params.round_to_f32();
            self.optimizer.round_to_f32();
            observer(&StepReport {
                epoch,
                step: self.optimizer.step,
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

    /// Trains until the configured epoch count.
    pub fn run(
        &mut self,
        samples: &[PretrainSample],
        observer: &mut dyn FnMut(&StepReport),
    ) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(samples, observer)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            meta: CheckpointMeta {
                model: self.model.clone(),
                pretrain: self.cfg.clone(),
                epoch: self.epoch,
                loss_history: self.loss_history.clone(),
                normalization: self.normalization.clone(),
                optimizer_step: self.optimizer.step,
            },
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }
}

/// Full pre-training run from scratch, using the dataset's statistics.
pub fn train(
    ds: &Dataset,
    cfg: &PretrainConfig,
    model_cfg: &ModelConfig,
) -> Result<ModelCheckpoint> {
    check_dataset(ds, model_cfg)?;
    let samples = prepare_samples(ds, model_cfg, cfg.no_ocean)?;
    let mut trainer = Trainer::new(model_cfg.clone(), cfg.clone(), ds.stats().clone())?;
    trainer.run(&samples, &mut |_| {})?;
    Ok(trainer.checkpoint())
}

/// Rejects datasets whose geometry disagrees with the model.
pub fn check_dataset(ds: &Dataset, model_cfg: &ModelConfig) -> Result<()> {
    let g = ds.manifest.geometry;
    if g.height != model_cfg.image_size || g.width != model_cfg.image_size {
        return Err(Error::shape(
            "dataset image size vs model image_size",
            [model_cfg.image_size, model_cfg.image_size],
            [g.height, g.width],
        ));
    }
    if g.channels != model_cfg.channels {
        return Err(Error::shape(
            "dataset channels vs model channels",
            model_cfg.channels,
            g.channels,
        ));
    }
    if ds.manifest.n_ocean() != model_cfg.n_ocean {
        return Err(Error::shape(
            "dataset ocean descriptors vs model n_ocean",
            model_cfg.n_ocean,
            ds.manifest.n_ocean(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenerateConfig};
    use proptest::prelude::*;

    fn seq(rows: Vec<Vec<f64>>) -> PatchSequence {
        let n = rows.len();
        PatchSequence {
            patch_vectors: Tensor::from_rows(&rows),
            grid_shape: (n, 1),
        }
    }

    #[test]
    fn identical_reconstruction_has_zero_loss() {
        let t = seq(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let plan = MaskPlan::from_masked(2, &[0, 1]).unwrap();
        assert_eq!(mse_masked(&t, &t, &plan).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset_of_three_gives_nine() {
        let t = seq(vec![vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]);
        let r = seq(vec![vec![4.0, 5.0, 6.0], vec![7.0, 7.0, 7.0]]);
        let plan = MaskPlan::from_masked(2, &[0]).unwrap();
        assert_eq!(mse_masked(&t, &r, &plan).unwrap(), 9.0);
    }

    #[test]
    fn visible_patches_are_ignored() {
        let t = seq(vec![vec![1.0], vec![2.0], vec![3.0]]);
        let mut r = seq(vec![vec![0.0], vec![0.0], vec![0.0]]);
        let plan = MaskPlan::from_masked(3, &[1]).unwrap();
        let before = mse_masked(&t, &r, &plan).unwrap();
        r.patch_vectors.data_mut()[0] = 1e9;
        r.patch_vectors.data_mut()[2] = -5.0;
        assert_eq!(
            mse_masked(&t, &r, &plan).unwrap().to_bits(),
            before.to_bits()
        );
    }

    #[test]
    fn empty_mask_is_rejected() {
        let t = seq(vec![vec![1.0]]);
        assert!(matches!(
            mse_masked(&t, &t, &MaskPlan::unmasked(1)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn schedule_values() {
        let cfg = PretrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert!((lr_at(5, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_at(20, &cfg) - 1e-6).abs() < 1e-20);
        let floored = PretrainConfig {
            lr_floor: Some(1e-4),
            ..cfg
        };
        assert!((lr_at(20, &floored) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn invalid_schedule_is_rejected() {
        let cfg = PretrainConfig {
            lr_milestones: vec![5, 5],
            ..Default::default()
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("lr_milestones"));
        let cfg = PretrainConfig {
            lr_factor: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn scalar(v: f64) -> (ParamStore, BTreeMap<String, Tensor>) {
        let mut p = ParamStore::new();
        p.insert("p", Tensor::filled(&[1], 1.0));
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), Tensor::filled(&[1], v));
        (p, g)
    }

    fn opt(wd: f64) -> AdamW {
        AdamW {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut p, g) = scalar(0.0);
        let before = p.clone();
        optimizer_step(&mut p, &g, &mut AdamState::default(), 0.1, &opt(0.0)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_has_unit_direction() {
        let (mut p, g) = scalar(1.0);
        optimizer_step(&mut p, &g, &mut AdamState::default(), 0.1, &opt(0.0)).unwrap();
        // mhat = 1, vhat = 1: step = 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled() {
        let (mut p, g) = scalar(0.0);
        optimizer_step(&mut p, &g, &mut AdamState::default(), 0.1, &opt(0.1)).unwrap();
        assert!((p.get("p").unwrap().data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let (mut p, g) = scalar(f64::NAN);
        let before = p.clone();
        let mut st = AdamState::default();
        let err = optimizer_step(&mut p, &g, &mut st, 0.1, &opt(0.0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::new(vec![2], vec![3.0, 4.0]));
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].sum_sq().sqrt() - 1.0).abs() < 1e-12);
    }

    fn tiny_setup() -> (Dataset, ModelConfig, PretrainConfig) {
        let ds = generate_dataset(&GenerateConfig {
            n_samples: 3,
            image_size: 8,
            channels: 3,
            n_classes: 2,
            seed: 4,
        })
        .unwrap();
        let model = ModelConfig {
            image_size: 8,
            ..ModelConfig::tiny()
        };
        let cfg = PretrainConfig {
            epochs: 3,
            batch_size: 2,
            lr_milestones: vec![2],
            seed: 9,
            ..Default::default()
        };
        (ds, model, cfg)
    }

    #[test]
    fn training_is_deterministic_and_records_history() {
        let (ds, model, cfg) = tiny_setup();
        let a = train(&ds, &cfg, &model).unwrap();
        let b = train(&ds, &cfg, &model).unwrap();
        assert_eq!(a.meta.loss_history.len(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn training_ignores_sample_order() {
        let (ds, model, cfg) = tiny_setup();
        let mut rev = ds.clone();
        rev.samples.reverse();
        rev.manifest.sample_ids.reverse();
        assert_eq!(
            train(&ds, &cfg, &model).unwrap(),
            train(&rev, &cfg, &model).unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let (ds, model, cfg) = tiny_setup();
        let ckpt = train(&ds, &cfg, &model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ckpt);

        let manifest = dir.path().join(crate::store::MANIFEST);
        let text = std::fs::read_to_string(&manifest).unwrap();
        let edited = text.replacen("\"decoder_dim\": 8", "\"decoder_dim\": 12", 1);
        assert_ne!(text, edited);
        std::fs::write(&manifest, edited).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(
            matches!(err, Error::ArrayMismatch { ref name, .. } if name.starts_with("decoder.")),
            "{err}"
        );
    }

    #[test]
    fn dataset_geometry_mismatch_is_rejected() {
        let (ds, model, cfg) = tiny_setup();
        let model = ModelConfig {
            channels: 4,
            ..model
        };
        assert!(train(&ds, &cfg, &model)
            .unwrap_err()
            .to_string()
            .contains("channels"));
    }

    proptest! {
        #[test]
        fn schedule_is_non_increasing(e in 0usize..100) {
            let cfg = PretrainConfig::default();
            prop_assert!(lr_at(e + 1, &cfg) <= lr_at(e, &cfg));
        }

        #[test]
        fn zero_gradient_decay_is_exact(lr in 0.0f64..1.0, wd in 0.0f64..0.5, p0 in -10.0f64..10.0) {
            let mut p = ParamStore::new();
            p.insert("p", Tensor::filled(&[1], p0));
            let mut g = BTreeMap::new();
            g.insert("p".to_string(), Tensor::zeros(&[1]));
            optimizer_step(&mut p, &g, &mut AdamState::default(), lr, &opt(wd)).unwrap();
            prop_assert_eq!(p.get("p").unwrap().data()[0], p0 * (1.0 - lr * wd));
        }
    }
}
