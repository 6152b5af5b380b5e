//! UNet and Bathy-UNet with an embedding projection path fused at the
//! bottleneck.
//!
//! Feature maps are `[H, W, C]`. The encoder runs `stage_channels.len()`
//! stages of two 3x3 convolutions + ReLU followed by 2x2 max pooling; the
//! pre-pool activations are kept as skips. The latent embedding is mapped
//! linearly to `H_b * W_b * C_init` values, reshaped row-major into a
//! `[H_b, W_b, C_init]` map and refined by two 3x3 convolutions + ReLU to
//! `C_b'` channels, then concatenated after the conv features. Each decoder
//! stage upsamples (nearest) and convolves, concatenates its skip and applies
//! two more convolutions; a 1x1 head produces logits or depth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::ocean::LatentEmbedding;
use crate::params::{init_params, shapes_of, Init, ParamSpec, ParamStore, ParamVars};
use crate::raster::{DepthMap, MultispectralImage, SegmentationMap};
use crate::tensor::Tensor;

pub const UNET_PREFIX: &str = "unet.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Bathy,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Seg => "seg",
            Task::Bathy => "bathy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Encoder widths per stage; the last one is `C_b`.
    pub stage_channels: Vec<usize>,
    /// Width of the reshaped embedding map.
    pub c_init: usize,
    /// Width of the refined embedding map (`C_b'`).
    pub c_embed: usize,
    /// Width of the latent embedding `z`.
    pub embed_dim: usize,
    pub task: Task,
    /// Class count for segmentation; ignored for bathymetry.
    pub n_classes: usize,
    /// Multiplier on the bathymetry head output, in meters.
    pub depth_scale: f64,
    /// `false` drops the embedding path entirely (plain UNet).
    pub use_embedding: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 11,
            stage_channels: vec![16, 32, 64],
            c_init: 64,
            c_embed: 64,
            embed_dim: 64,
            task: Task::Seg,
            n_classes: 4,
            depth_scale: 10.0,
            use_embedding: true,
        }
    }
}

impl UNetConfig {
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            in_channels: 3,
            stage_channels: vec![4, 6],
            c_init: 3,
            c_embed: 2,
            embed_dim: 8,
            task: Task::Seg,
            n_classes: 3,
            depth_scale: 10.0,
            use_embedding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::config("stage_channels", "need at least one stage"));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::config("stage_channels", "widths must be at least 1"));
        }
        let div = 1usize << self.stage_channels.len();
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return Err(Error::config(
                "image_size",
                format!(
                    "{} is not divisible by 2^{} = {div}",
                    self.image_size,
                    self.stage_channels.len()
                ),
            ));
        }
        for (field, v) in [
            ("in_channels", self.in_channels),
            ("c_init", self.c_init),
            ("c_embed", self.c_embed),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.task == Task::Seg && self.n_classes < 2 {
            return Err(Error::config(
                "n_classes",
                "segmentation needs at least 2 classes",
            ));
        }
        if !(self.depth_scale.is_finite() && self.depth_scale > 0.0) {
            return Err(Error::config("depth_scale", "must be finite and positive"));
        }
        Ok(())
    }

    /// `H_b = W_b = image_size / 2^stages`.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.stage_channels.len()
    }

    pub fn c_b(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }

    /// Channels entering the decoder.
    pub fn fused_channels(&self) -> usize {
        if self.use_embedding {
            self.c_b() + self.c_embed
        } else {
            self.c_b()
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.task {
            Task::Seg => self.n_classes,
            Task::Bathy => 1,
        }
    }
}

fn conv_specs(prefix: &str, k: usize, cin: usize, cout: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(
            format!("{prefix}.weight"),
            &[k, k, cin, cout],
            Init::He {
                fan_in: k * k * cin,
            },
        ),
        ParamSpec::new(format!("{prefix}.bias"), &[cout], Init::Zeros),
    ]
}

pub fn unet_param_specs(cfg: &UNetConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut cin = cfg.in_channels;
    for (k, &c) in cfg.stage_channels.iter().enumerate() {
        specs.extend(conv_specs(&format!("unet.enc.{k}.conv1"), 3, cin, c));
        specs.extend(conv_specs(&format!("unet.enc.{k}.conv2"), 3, c, c));
        cin = c;
    }
    if cfg.use_embedding {
        let hb = cfg.bottleneck_size();
        let flat = hb * hb * cfg.c_init;
        specs.push(ParamSpec::new(
            "unet.embed.linear.weight",
            &[cfg.embed_dim, flat],
            Init::Xavier {
                fan_in: cfg.embed_dim,
                fan_out: flat,
            },
        ));
        specs.push(ParamSpec::new(
            "unet.embed.linear.bias",
            &[flat],
            Init::Zeros,
        ));
        specs.extend(conv_specs("unet.embed.conv1", 3, cfg.c_init, cfg.c_embed));
        specs.extend(conv_specs("unet.embed.conv2", 3, cfg.c_embed, cfg.c_embed));
    }
    let mut cin = cfg.fused_channels();
    for (k, &c) in cfg.stage_channels.iter().enumerate().rev() {
        specs.extend(conv_specs(&format!("unet.dec.{k}.up"), 3, cin, c));
        specs.extend(conv_specs(&format!("unet.dec.{k}.conv1"), 3, 2 * c, c));
        specs.extend(conv_specs(&format!("unet.dec.{k}.conv2"), 3, c, c));
        cin = c;
    }
    specs.extend(conv_specs(
        "unet.head",
        1,
        cfg.stage_channels[0],
        cfg.out_channels(),
    ));
    specs
}

pub fn unet_param_shapes(cfg: &UNetConfig) -> std::collections::BTreeMap<String, Vec<usize>> {
    shapes_of(&unet_param_specs(cfg))
}

pub fn init_unet_params(cfg: &UNetConfig, seed: u64) -> ParamStore {
    init_params(&unet_param_specs(cfg), &mut ChaCha8Rng::seed_from_u64(seed))
}

fn conv_relu(g: &mut Graph, pv: &ParamVars, prefix: &str, x: Var) -> Var {
    let w = pv.get(&format!("{prefix}.weight"));
    let b = pv.get(&format!("{prefix}.bias"));
    let y = g.conv2d(x, w, b);
    g.relu(y)
}

fn check_image(cfg: &UNetConfig, shape: &[usize]) -> Result<()> {
    let expected = [cfg.image_size, cfg.image_size, cfg.in_channels];
    if shape != expected {
        return Err(Error::shape("UNet input [H, W, C]", expected, shape));
    }
    Ok(())
}

/// Returns the pooled bottleneck map `F_conv` and the pre-pool skips in
/// stage order.
pub fn unet_encode_node(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &UNetConfig,
    image: Var,
) -> Result<(Var, Vec<Var>)> {
    check_image(cfg, g.shape(image))?;
    let mut x = image;
    let mut skips = Vec::with_capacity(cfg.stage_channels.len());
    for k in 0..cfg.stage_channels.len() {
        x = conv_relu(g, pv, &format!("unet.enc.{k}.conv1"), x);
        x = conv_relu(g, pv, &format!("unet.enc.{k}.conv2"), x);
        skips.push(x);
        x = g.max_pool2(x);
    }
    Ok((x, skips))
}

/// Maps `z` (`[1, D]`) to the `[H_b, W_b, C_b']` embedding map.
pub fn project_embedding_node(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &UNetConfig,
    z: Var,
) -> Result<Var> {
    if g.shape(z) != [1, cfg.embed_dim] {
        return Err(Error::shape(
            "embedding width",
            [1, cfg.embed_dim],
            g.shape(z),
        ));
    }
    let hb = cfg.bottleneck_size();
    let flat = g.linear(
        z,
        pv.get("unet.embed.linear.weight"),
        pv.get("unet.embed.linear.bias"),
    );
    let map = g.reshape(flat, &[hb, hb, cfg.c_init]);
    let map = conv_relu(g, pv, "unet.embed.conv1", map);
    Ok(conv_relu(g, pv, "unet.embed.conv2", map))
}

/// Channel concatenation, conv features first.
pub fn fuse_bottleneck_node(g: &mut Graph, conv: Var, embed: Var) -> Result<Var> {
    let (a, b) = (g.shape(conv), g.shape(embed));
    if a.len() != 3 || b.len() != 3 || a[..2] != b[..2] {
        return Err(Error::shape("bottleneck spatial dims", a, b));
    }
    Ok(g.concat_cols(&[conv, embed]))
}

pub fn unet_decode_node(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &UNetConfig,
    fused: Var,
    skips: &[Var],
) -> Result<Var> {
    let n = cfg.stage_channels.len();
    if skips.len() != n {
        return Err(Error::shape("skip count", n, skips.len()));
    }
    let hb = cfg.bottleneck_size();
    if g.shape(fused) != [hb, hb, cfg.fused_channels()] {
        return Err(Error::shape(
            "fused bottleneck",
            [hb, hb, cfg.fused_channels()],
            g.shape(fused),
        ));
    }
    let mut x = fused;
    for k in (0..n).rev() {
        let side = cfg.image_size >> k;
        let c = cfg.stage_channels[k];
        if g.shape(skips[k]) != [side, side, c] {
            return Err(Error::shape(
                format!("skip {k}"),
                [side, side, c],
                g.shape(skips[k]),
            ));
        }
        let up = g.upsample2(x);
        let up = conv_relu(g, pv, &format!("unet.dec.{k}.up"), up);
        let cat = g.concat_cols(&[up, skips[k]]);
        x = conv_relu(g, pv, &format!("unet.dec.{k}.conv1"), cat);
        x = conv_relu(g, pv, &format!("unet.dec.{k}.conv2"), x);
    }
    let out = g.conv2d(x, pv.get("unet.head.weight"), pv.get("unet.head.bias"));
    Ok(match cfg.task {
        Task::Seg => out,
        Task::Bathy => g.scale(out, cfg.depth_scale),
    })
}

/// Full model: `[H, W, C]` image and `[1, D]` embedding to `[H, W, K]`
/// logits (segmentation) or `[H, W, 1]` depth. `z` is ignored when the
/// embedding path is disabled.
pub fn downstream_node(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &UNetConfig,
    image: Var,
    z: Option<Var>,
) -> Result<Var> {
    let (conv, skips) = unet_encode_node(g, pv, cfg, image)?;
    let fused = if cfg.use_embedding {
        let z = z.ok_or_else(|| Error::config("use_embedding", "the embedding path needs z"))?;
        let embed = project_embedding_node(g, pv, cfg, z)?;
        fuse_bottleneck_node(g, conv, embed)?
    } else {
        conv
    };
    unet_decode_node(g, pv, cfg, fused, &skips)
}

/// Cross-entropy node over non-sentinel pixels.
pub fn segmentation_loss_node(g: &mut Graph, logits: Var, labels: &SegmentationMap) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[..2] != [labels.height, labels.width] {
        return Err(Error::shape(
            "logits [H, W, K] vs labels",
            [labels.height, labels.width],
            s,
        ));
    }
    labels.validate(s[2])?;
    let targets = labels.as_targets();
    if targets.iter().all(Option::is_none) {
        return Err(Error::NoValidPixels {
            what: "segmentation loss".into(),
        });
    }
    Ok(g.cross_entropy(logits, &targets))
}

/// Mean absolute error node over valid pixels.
pub fn bathymetry_loss_node(g: &mut Graph, pred: Var, truth: &DepthMap) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    if s != [truth.height, truth.width, 1] {
        return Err(Error::shape(
            "depth prediction [H, W, 1]",
            [truth.height, truth.width, 1],
            s,
        ));
    }
    if truth.n_valid() == 0 {
        return Err(Error::NoValidPixels {
            what: "bathymetry loss".into(),
        });
    }
    Ok(g.masked_l1(pred, &truth.depth, &truth.valid))
}

/// Loss of `output` against the target appropriate for `cfg.task`.
pub fn task_loss_node(
    g: &mut Graph,
    cfg: &UNetConfig,
    output: Var,
    labels: &SegmentationMap,
    depth: &DepthMap,
) -> Result<Var> {
    match cfg.task {
        Task::Seg => segmentation_loss_node(g, output, labels),
        Task::Bathy => bathymetry_loss_node(g, output, depth),
    }
}

pub fn segmentation_loss(logits: &Tensor, labels: &SegmentationMap) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = segmentation_loss_node(&mut g, l, labels)?;
    Ok(g.value(loss).data()[0])
}

pub fn bathymetry_loss(pred: &DepthMap, truth: &DepthMap) -> Result<f64> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::shape(
            "depth map dims",
            (truth.height, truth.width),
            (pred.height, pred.width),
        ));
    }
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(
        vec![pred.height, pred.width, 1],
        pred.depth.clone(),
    ));
    let loss = bathymetry_loss_node(&mut g, p, truth)?;
    Ok(g.value(loss).data()[0])
}

/// Encoder pass on plain tensors.
pub fn unet_encode(
    image: &MultispectralImage,
    params: &ParamStore,
    cfg: &UNetConfig,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let x = g.constant(image.to_tensor());
    let (conv, skips) = unet_encode_node(&mut g, &pv, cfg, x)?;
    Ok((
        g.value(conv).clone(),
        skips.iter().map(|s| g.value(*s).clone()).collect(),
    ))
}

pub fn project_embedding(
    z: &LatentEmbedding,
    params: &ParamStore,
    cfg: &UNetConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let zv = g.constant(Tensor::row_vector(z.0.clone()));
    let out = project_embedding_node(&mut g, &pv, cfg, zv)?;
    Ok(g.value(out).clone())
}

pub fn fuse_bottleneck(conv: &Tensor, embed: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(conv.clone());
    let b = g.constant(embed.clone());
    let out = fuse_bottleneck_node(&mut g, a, b)?;
    Ok(g.value(out).clone())
}

pub fn unet_decode(
    fused: &Tensor,
    skips: &[Tensor],
    params: &ParamStore,
    cfg: &UNetConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let f = g.constant(fused.clone());
    let s: Vec<Var> = skips.iter().map(|t| g.constant(t.clone())).collect();
    let out = unet_decode_node(&mut g, &pv, cfg, f, &s)?;
    Ok(g.value(out).clone())
}

/// Model output for one image.
#[derive(Debug, Clone, PartialEq)]
pub enum DownstreamOutput {
    /// `[H, W, n_classes]`.
    Logits(Tensor),
    Depth(DepthMap),
}

impl DownstreamOutput {
    pub fn tensor(&self) -> Tensor {
        match self {
            DownstreamOutput::Logits(t) => t.clone(),
            DownstreamOutput::Depth(d) => Tensor::new(vec![d.height, d.width, 1], d.depth.clone()),
        }
    }
}

pub fn forward_downstream(
    image: &MultispectralImage,
    z: &LatentEmbedding,
    params: &ParamStore,
    cfg: &UNetConfig,
) -> Result<DownstreamOutput> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let x = g.constant(image.to_tensor());
    let zv = g.constant(Tensor::row_vector(z.0.clone()));
    let out = downstream_node(&mut g, &pv, cfg, x, Some(zv))?;
    let t = g.value(out).clone();
    Ok(match cfg.task {
        Task::Seg => DownstreamOutput::Logits(t),
        Task::Bathy => DownstreamOutput::Depth(DepthMap::all_valid(
            cfg.image_size,
            cfg.image_size,
            t.into_data(),
        )?),
    })
}

/// Per-pixel argmax of `[H, W, K]` logits.
pub fn predict_labels(logits: &Tensor) -> Result<SegmentationMap> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::shape("logits rank", 3, s.len()));
    }
    let labels = logits
        .data()
        .chunks(s[2])
        .map(|row| argmax(row) as u32)
        .collect();
    SegmentationMap::new(s[0], s[1], labels)
}
