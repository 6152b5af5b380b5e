//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use oceanmae::data::{generate_dataset, read_dataset, write_dataset, Dataset};
use oceanmae::downstream::Task;
use oceanmae::finetune::{
    check_downstream_dataset, evaluate as evaluate_model, load_downstream, predictions_dataset,
    prepare_downstream, save_downstream, FineTuner,
};
use oceanmae::metrics::MetricsReport;
use oceanmae::model::ModelConfig;
use oceanmae::ocean::PROJ_WEIGHT;
use oceanmae::pretrain::{load_checkpoint, prepare_samples, save_checkpoint, Trainer};
use oceanmae::strategies::{build_provider, encoder_fingerprint, StrategyKind};
use serde_json::json;

use crate::config::RunConfig;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EMBEDDINGS_DIR: &str = "embeddings";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const LOSS_HISTORY: &str = "loss_history.csv";
pub const METRIC_HISTORY: &str = "metric_history.csv";
pub const SUMMARY: &str = "summary.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_summary(out: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write(&out.join(SUMMARY), &text)?;
    eprint!("{text}");
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.dataset()?;
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

/// Copies the data-defined dimensions of `ds` into `model`.
fn fit_model_to_dataset(model: &mut ModelConfig, ds: &Dataset) -> Result<()> {
    let g = ds.manifest.geometry;
    ensure!(
        g.height == g.width,
        "the encoder needs square images, dataset is {}x{}",
        g.height,
        g.width
    );
    model.image_size = g.height;
    model.channels = g.channels;
    model.n_ocean = ds.manifest.n_ocean();
    Ok(())
}

fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{e},{l}");
    }
    s
}

pub fn gen_data(cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let ds = generate_dataset(&cfg.data.generate)?;
    cfg.echo(&out)?;
    write_dataset(&out, &ds)?;
    let back = read_dataset(&out)?;
    ensure!(
        back.manifest == ds.manifest,
        "dataset manifest did not round-trip"
    );

    let k = ds.manifest.n_classes;
    let mut hist = vec![0usize; k];
    let (mut dmin, mut dmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &ds.samples {
        for &l in &s.labels.labels {
            if (l as usize) < k {
                hist[l as usize] += 1;
            }
        }
        for &d in &s.depth.depth {
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
    }
    write_summary(
        &out,
        &json!({
            "n_samples": ds.len(),
            "geometry": ds.manifest.geometry,
            "class_pixel_counts": hist,
            "depth_min": dmin,
            "depth_max": dmax,
            "channel_mean": ds.stats().channel_mean,
            "channel_std": ds.stats().channel_std,
            "ocean_mean": ds.stats().ocean_mean,
            "ocean_std": ds.stats().ocean_std,
        }),
    )
}

pub fn pretrain(mut cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let ds = load_dataset(&cfg)?;
    fit_model_to_dataset(&mut cfg.model, &ds)?;
    cfg.model.validate()?;
    cfg.pretrain.validate()?;
    cfg.echo(&out)?;

    let samples = prepare_samples(&ds, &cfg.model, cfg.pretrain.no_ocean)?;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.pretrain.clone(), ds.stats().clone())?;
    let mut max_proj_grad = 0.0f64;
    while !trainer.is_done() {
        let epoch = trainer.epoch;
        let loss = trainer.run_epoch(&samples, &mut |r| {
            if let Some(g) = r.grads.get(PROJ_WEIGHT) {
                let m = g.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                max_proj_grad = max_proj_grad.max(m);
            }
        })?;
        eprintln!("epoch {epoch}: loss {loss:.6}");
    }
    if cfg.pretrain.no_ocean {
        ensure!(
            max_proj_grad == 0.0,
            "ablation wiring broken: gradient w.r.t. {PROJ_WEIGHT} reached {max_proj_grad}"
        );
    }

    let ckpt = trainer.checkpoint();
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    save_checkpoint(&ckpt_dir, &ckpt)?;
    ensure!(
        load_checkpoint(&ckpt_dir)? == ckpt,
        "checkpoint did not round-trip"
    );
    write(&out.join(LOSS_HISTORY), &loss_csv(&ckpt.meta.loss_history))?;
    write_summary(
        &out,
        &json!({
            "epochs": ckpt.meta.epoch,
            "initial_loss": ckpt.meta.loss_history.first(),
            "final_loss": ckpt.meta.loss_history.last(),
            "no_ocean": cfg.pretrain.no_ocean,
            "max_abs_proj_weight_grad": max_proj_grad,
            "encoder_fingerprint": encoder_fingerprint(&ckpt.params),
        }),
    )
}

fn metric_row(epoch: usize, loss: f64, r: &MetricsReport) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{epoch},{loss},{},{},{},{},{},{}\n",
        cell(r.pa),
        cell(r.miou),
        cell(r.macro_f1),
        cell(r.mae),
        cell(r.rmse),
        cell(r.stddev)
    )
}

pub fn finetune(mut cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let ds = load_dataset(&cfg)?;
    cfg.finetune.validate()?;
    if cfg.strategy.kind == StrategyKind::Random {
        fit_model_to_dataset(&mut cfg.model, &ds)?;
    }
    let mut provider = build_provider(
        &cfg.strategy,
        &cfg.model,
        cfg.finetune.seed,
        cfg.finetune.lr,
    )
    .context("building the embedding provider")?;
    cfg.model = provider.model().clone();
    let stats = provider
        .normalization()
        .cloned()
        .unwrap_or_else(|| ds.stats().clone());
    let g = ds.manifest.geometry;
    cfg.unet.image_size = g.height;
    cfg.unet.in_channels = g.channels;
    cfg.unet.embed_dim = cfg.model.embed_dim;
    if cfg.unet.task == Task::Seg {
        cfg.unet.n_classes = ds.manifest.n_classes;
    }
    check_downstream_dataset(&ds, &cfg.unet)?;
    if cfg.strategy.kind == StrategyKind::Ff && cfg.strategy.encoder_lr.is_none() {
        // make the effective rate explicit in the echo
        cfg.strategy.encoder_lr = Some(provider.encoder_lr());
    }
    cfg.echo(&out)?;

    let fingerprint_before = encoder_fingerprint(provider.encoder());
    let samples = prepare_downstream(&ds, &stats)?;
    let mut tuner = FineTuner::new(cfg.unet.clone(), cfg.finetune.clone(), provider, stats)?;
    let mut history = String::from("epoch,loss,pa,miou,macro_f1,mae,rmse,stddev\n");
    let mut last = None;
    while !tuner.is_done() {
        let epoch = tuner.epoch;
        let loss = tuner.run_epoch(&samples, &mut |_| {})?;
        let (report, _) = evaluate_model(&tuner.checkpoint(), &ds)?;
        history.push_str(&metric_row(epoch, loss, &report));
        eprintln!("epoch {epoch}: loss {loss:.6}");
        last = Some(report);
    }
    provider = tuner.provider.clone();

    let ckpt = tuner.checkpoint();
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    save_downstream(&ckpt_dir, &ckpt)?;
    ensure!(
        load_downstream(&ckpt_dir)? == ckpt,
        "checkpoint did not round-trip"
    );
    write(&out.join(LOSS_HISTORY), &loss_csv(&tuner.loss_history))?;
    write(&out.join(METRIC_HISTORY), &history)?;
    if provider.kind().is_fixed() && cfg.unet.use_embedding {
        let dir = cfg
            .strategy
            .cache
            .clone()
            .unwrap_or_else(|| out.join(EMBEDDINGS_DIR));
        provider.cache().save(&dir)?;
    }
    let fingerprint_after = encoder_fingerprint(provider.encoder());
    if provider.kind().is_fixed() && fingerprint_before != fingerprint_after {
        bail!("the {} strategy modified the encoder", provider.kind());
    }
    write_summary(
        &out,
        &json!({
            "strategy": provider.kind(),
            "task": cfg.unet.task,
            "epochs": tuner.epoch,
            "final_loss": tuner.loss_history.last(),
            "encoder_fingerprint_before": fingerprint_before,
            "encoder_fingerprint_after": fingerprint_after,
            "cache_hits": provider.cache().hits,
            "cache_misses": provider.cache().misses,
            "train_metrics": last,
        }),
    )
}

pub fn evaluate(mut cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let ckpt_dir = cfg
        .evaluate
        .checkpoint
        .clone()
        .context("no checkpoint: pass --checkpoint or set `evaluate.checkpoint`")?;
    let ckpt = load_downstream(&ckpt_dir)
        .with_context(|| format!("loading downstream checkpoint {}", ckpt_dir.display()))?;
    let ds = load_dataset(&cfg)?;
    cfg.model = ckpt.meta.model.clone();
    cfg.unet = ckpt.meta.unet.clone();
    cfg.finetune = ckpt.meta.finetune.clone();
    cfg.strategy.kind = ckpt.meta.strategy;
    cfg.echo(&out)?;

    let (report, preds) = evaluate_model(&ckpt, &ds)?;
    write(&out.join(REPORT_JSON), &report.to_json())?;
    write(&out.join(REPORT_CSV), &report.to_csv())?;
    if cfg.evaluate.dump_predictions {
        let dir = out.join(PREDICTIONS_DIR);
        write_dataset(&dir, &predictions_dataset(&ds, &preds)?)?;
        read_dataset(&dir).context("re-reading prediction dump")?;
    }
    eprint!("{}", report.to_json());
    Ok(())
}

pub fn embed(mut cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let ds = load_dataset(&cfg)?;
    ensure!(
        cfg.strategy.kind.is_fixed(),
        "embed writes caches for fixed strategies (random, fe), not {}",
        cfg.strategy.kind
    );
    if cfg.strategy.kind == StrategyKind::Random {
        fit_model_to_dataset(&mut cfg.model, &ds)?;
    }
    cfg.strategy.cache = None;
    let mut provider = build_provider(
        &cfg.strategy,
        &cfg.model,
        cfg.finetune.seed,
        cfg.finetune.lr,
    )?;
    cfg.model = provider.model().clone();
    let stats = provider
        .normalization()
        .cloned()
        .unwrap_or_else(|| ds.stats().clone());
    cfg.echo(&out)?;
    for s in &ds.samples {
        let image = stats.normalize_image(&s.image)?;
        provider.get_embedding(&s.id, &image)?;
    }
    provider.cache().save(&out)?;
    write_summary(
        &out,
        &json!({
            "strategy": provider.kind(),
            "n_embeddings": provider.cache().len(),
            "embed_dim": provider.cache().embed_dim,
            "encoder_fingerprint": provider.cache().fingerprint,
        }),
    )
}
