//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use oceanmae::data::{generate_dataset, Dataset, GenerateConfig};
use oceanmae::downstream::{Task, UNetConfig};
use oceanmae::finetune::{evaluate, prepare_downstream, FineTuner, FinetuneConfig};
use oceanmae::metrics::MetricsReport;
use oceanmae::model::{init_encoder_params, ModelConfig};
use oceanmae::params::ParamStore;
use oceanmae::pretrain::{prepare_samples, PretrainConfig, Trainer};
use oceanmae::strategies::{EmbeddingProvider, StrategyKind};
use oceanmae::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dataset(n: usize, size: usize, channels: usize, classes: usize, seed: u64) -> Dataset {
    generate_dataset(&GenerateConfig {
        n_samples: n,
        image_size: size,
        channels,
        n_classes: classes,
        seed,
    })
    .unwrap()
}

pub fn tiny_model(size: usize, channels: usize) -> ModelConfig {
    ModelConfig {
        image_size: size,
        channels,
        ..ModelConfig::tiny()
    }
}

pub fn tiny_unet(model: &ModelConfig, task: Task, n_classes: usize) -> UNetConfig {
    UNetConfig {
        image_size: model.image_size,
        in_channels: model.channels,
        embed_dim: model.embed_dim,
        task,
        n_classes,
        ..UNetConfig::tiny()
    }
}

/// Every parameter shifted by independent N(0, std) noise, snapped to f32.
pub fn jitter(params: &ParamStore, std: f64, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    let names: Vec<String> = out.names().cloned().collect();
    for n in names {
        let t = out.get_mut(&n).unwrap();
        let noise = Tensor::randn(t.shape(), std, &mut rng);
        t.add_scaled(&noise, 1.0);
    }
    out.round_to_f32();
    out
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub const FD_STEP: f64 = 1e-5;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates whose step straddled a ReLU, max-pool or L1 kink.
    pub kinks: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_at = other.worst_at;
        }
    }
}

/// Compares `grads` against central differences of `loss` at `coords`
/// random coordinates of every tensor, or at all of them when the tensor is
/// no larger than `coords`.
///
/// A coordinate is set aside as a kink when the one-sided differences
/// disagree by more than the central difference disagrees with the
/// analytic value: the loss is not differentiable there.
pub fn fd_check(
    params: &ParamStore,
    grads: &BTreeMap<String, Tensor>,
    coords: usize,
    seed: u64,
    loss: impl Fn(&ParamStore) -> f64,
) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = loss(params);
    let mut report = FdReport::default();
    for (name, g) in grads {
        let n = g.len();
        let picks: Vec<usize> = if coords >= n {
            (0..n).collect()
        } else {
            (0..coords).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let at = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += delta;
                loss(&p)
            };
            let (plus, minus) = (at(FD_STEP), at(-FD_STEP));
            let central = (plus - minus) / (2.0 * FD_STEP);
            let analytic = g.data()[i];
            let e = rel_err(analytic, central);
            if e >= 1e-4 {
                let one_sided_gap = ((plus - base) - (base - minus)).abs() / FD_STEP;
                if one_sided_gap > (central - analytic).abs() {
                    report.kinks += 1;
                    continue;
                }
            }
            report.checked += 1;
            if e > report.worst {
                report.worst = e;
                report.worst_at =
                    format!("{name}[{i}]: analytic {analytic:e}, numeric {central:e}");
            }
        }
    }
    report
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Tiny pre-training run on one sample; returns the per-epoch losses.
pub fn pretrain_overfit_history(epochs: usize) -> Vec<f64> {
    let ds = dataset(1, 8, 3, 2, 21);
    let model = ModelConfig {
        mask_ratio: 0.5,
        decoder_dim: 16,
        ..tiny_model(8, 3)
    };
    let cfg = PretrainConfig {
        epochs,
        batch_size: 1,
        initial_lr: 3e-3,
        lr_milestones: Vec::new(),
        weight_decay: 0.0,
        seed: 1,
        ..Default::default()
    };
    let samples = prepare_samples(&ds, &model, false).unwrap();
    let mut trainer = Trainer::new(model, cfg, ds.stats().clone()).unwrap();
    trainer.run(&samples, &mut |_| {}).unwrap();
    trainer.loss_history
}

/// Trains a tiny UNet with random-encoder embeddings on a small set and
/// returns the training-set metrics after each `every` epochs.
pub fn downstream_overfit(
    task: Task,
    n: usize,
    epochs: usize,
    lr: f64,
    milestones: Vec<usize>,
    every: usize,
) -> Vec<(usize, MetricsReport)> {
    let ds = dataset(n, 16, 3, 3, 33);
    let model = tiny_model(16, 3);
    let unet = UNetConfig {
        stage_channels: vec![16, 32],
        c_init: 4,
        c_embed: 4,
        ..tiny_unet(&model, task, 3)
    };
    let cfg = FinetuneConfig {
        epochs,
        batch_size: 1,
        lr,
        lr_milestones: milestones,
        seed: 2,
        ..Default::default()
    };
    let provider = EmbeddingProvider::new(
        StrategyKind::Random,
        model.clone(),
        init_encoder_params(&model, 7),
        0.0,
        None,
    )
    .unwrap();
    let stats = ds.stats().clone();
    let samples = prepare_downstream(&ds, &stats).unwrap();
    let mut tuner = FineTuner::new(unet, cfg, provider, stats).unwrap();
    let mut out = Vec::new();
    while !tuner.is_done() {
        tuner.run_epoch(&samples, &mut |_| {}).unwrap();
        if tuner.epoch.is_multiple_of(every) || tuner.is_done() {
            let (report, _) = evaluate(&tuner.checkpoint(), &ds).unwrap();
            out.push((tuner.epoch, report));
        }
    }
    out
}
