//! Masked autoencoder with ocean-conditioned reconstruction.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::transformer::{block, block_specs, linear, linear_specs};
use crate::model::{patchify, sample_mask, unpatchify, MaskPlan, ModelConfig, PatchSequence};
use crate::ocean::{fuse_node, fusion_specs, OceanFeatureVector, TokenSequence};
use crate::params::{init_params, shapes_of, Init, ParamSpec, ParamStore, ParamVars};
use crate::raster::MultispectralImage;
use crate::tensor::Tensor;

pub const ENCODER_PREFIX: &str = "encoder.";

/// Every parameter of the model, in initialization order.
pub fn mae_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = encoder_param_specs(cfg);
    specs.extend(fusion_specs(cfg.n_ocean, cfg.embed_dim));
    let (d, dd, n) = (cfg.embed_dim, cfg.decoder_dim, cfg.n_patches());
    specs.extend(linear_specs("decoder.embed", d, dd));
    specs.extend(linear_specs("decoder.cls_map", 2 * d, dd));
    specs.push(ParamSpec::new(
        "decoder.mask_token",
        &[1, dd],
        Init::Normal(0.02),
    ));
    specs.push(ParamSpec::new(
        "decoder.pos_embed",
        &[n + 1, dd],
        Init::Normal(0.02),
    ));
    for i in 0..cfg.decoder_depth {
        specs.extend(block_specs(
            &format!("decoder.blocks.{i}"),
            dd,
            cfg.mlp_ratio,
        ));
    }
    specs.extend(linear_specs("decoder.pred", dd, cfg.patch_dim()));
    specs
}

/// Parameters of the ViT encoder alone (all prefixed `encoder.`).
pub fn encoder_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, n) = (cfg.embed_dim, cfg.n_patches());
    let mut specs = Vec::new();
    specs.extend(linear_specs("encoder.patch_embed", cfg.patch_dim(), d));
    specs.push(ParamSpec::new(
        "encoder.cls_token",
        &[1, d],
        Init::Normal(0.02),
    ));
    specs.push(ParamSpec::new(
        "encoder.pos_embed",
        &[n + 1, d],
        Init::Normal(0.02),
    ));
    for i in 0..cfg.encoder_depth {
        specs.extend(block_specs(
            &format!("encoder.blocks.{i}"),
            d,
            cfg.mlp_ratio,
        ));
    }
    specs
}

pub fn mae_param_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    shapes_of(&mae_param_specs(cfg))
}

pub fn encoder_param_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    shapes_of(&encoder_param_specs(cfg))
}

pub fn init_mae_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    init_params(&mae_param_specs(cfg), &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn init_encoder_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    init_params(
        &encoder_param_specs(cfg),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

/// Encodes visible patches. `visible` is `[n_vis, patch_dim]` and row `r`
/// belongs to grid position `indices[r]`. Returns `[1 + n_vis, D]` with the
/// CLS token in row 0.
pub fn encode_node(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    visible: Var,
    indices: &[usize],
) -> Result<Var> {
    let n = cfg.n_patches();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::shape("patch index within positional table", n, bad));
    }
    if g.shape(visible) != [indices.len(), cfg.patch_dim()] {
        return Err(Error::shape(
            "visible patches [n_vis, patch_dim]",
            [indices.len(), cfg.patch_dim()],
            g.shape(visible),
        ));
    }
    let x = linear(g, pv, "encoder.patch_embed", visible);
    let cls = pv.get("encoder.cls_token");
    let tokens = g.concat_rows(&[cls, x]);
    let rows: Vec<usize> = std::iter::once(0)
        .chain(indices.iter().map(|i| i + 1))
        .collect();
    let pos = g.gather_rows(pv.get("encoder.pos_embed"), &rows);
    let mut tokens = g.add(tokens, pos);
    for i in 0..cfg.encoder_depth {
        tokens = block(
            g,
            pv,
            &format!("encoder.blocks.{i}"),
            tokens,
            cfg.encoder_heads,
        );
    }
    Ok(tokens)
}

/// Reconstructs every patch. `encoded` is the encoder output for
/// `plan.visible_indices`; `combined` is the fused `[1, 2D]` embedding,
/// mapped into the decoder's CLS slot. Returns `[n_patches, patch_dim]` in
/// grid order.
pub fn decode_node(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    encoded: Var,
    plan: &MaskPlan,
    combined: Var,
) -> Result<Var> {
    let n = cfg.n_patches();
    let n_vis = plan.visible_indices.len();
    if plan.n_patches() != n {
        return Err(Error::shape("mask plan size", n, plan.n_patches()));
    }
    if g.shape(encoded) != [n_vis + 1, cfg.embed_dim] {
        return Err(Error::shape(
            "encoder output [1 + n_vis, D]",
            [n_vis + 1, cfg.embed_dim],
            g.shape(encoded),
        ));
    }
    if g.shape(combined) != [1, 2 * cfg.embed_dim] {
        return Err(Error::shape(
            "combined CLS width",
            2 * cfg.embed_dim,
            g.shape(combined),
        ));
    }
    let body_rows: Vec<usize> = (1..=n_vis).collect();
    let body = g.gather_rows(encoded, &body_rows);
    let body = linear(g, pv, "decoder.embed", body);
    let cls = linear(g, pv, "decoder.cls_map", combined);
    let pool = g.concat_rows(&[cls, body, pv.get("decoder.mask_token")]);

    // pool rows: 0 = cls, 1..=n_vis = visible tokens, n_vis + 1 = mask token
    let mut order = vec![n_vis + 1; n + 1];
    order[0] = 0;
    for (k, &i) in plan.visible_indices.iter().enumerate() {
        order[i + 1] = k + 1;
    }
    let seq = g.gather_rows(pool, &order);
    let mut seq = g.add(seq, pv.get("decoder.pos_embed"));
    for i in 0..cfg.decoder_depth {
        seq = block(
            g,
            pv,
            &format!("decoder.blocks.{i}"),
            seq,
            cfg.decoder_heads,
        );
    }
    let patch_rows: Vec<usize> = (1..=n).collect();
    let patches = g.gather_rows(seq, &patch_rows);
    Ok(linear(g, pv, "decoder.pred", patches))
}

/// Graph handles of one masked-reconstruction pass.
#[derive(Debug, Clone, Copy)]
pub struct MaeNodes {
    pub encoded: Var,
    pub combined: Var,
    pub recon: Var,
    /// `None` when the plan masks nothing (loss undefined).
    pub loss: Option<Var>,
}

/// patchify-free forward over an already tokenized image.
pub fn mae_graph(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    patches: &PatchSequence,
    ocean: &OceanFeatureVector,
    plan: &MaskPlan,
) -> Result<MaeNodes> {
    if ocean.values.len() != cfg.n_ocean {
        return Err(Error::shape(
            "ocean descriptor count",
            cfg.n_ocean,
            ocean.values.len(),
        ));
    }
    let visible = g.constant(patches.select(&plan.visible_indices));
    let encoded = encode_node(g, pv, cfg, visible, &plan.visible_indices)?;
    let cls = g.gather_rows(encoded, &[0]);
    let f = g.constant(Tensor::row_vector(ocean.values.clone()));
    let combined = fuse_node(g, pv, cls, f);
    let recon = decode_node(g, pv, cfg, encoded, plan, combined)?;
    let loss = if plan.masked_indices.is_empty() {
        None
    } else {
        Some(g.masked_mse(recon, &patches.patch_vectors, &plan.masked_indices))
    };
    Ok(MaeNodes {
        encoded,
        combined,
        recon,
        loss,
    })
}

#[derive(Debug, Clone)]
pub struct MaeOutput {
    pub reconstruction: MultispectralImage,
    pub loss: f64,
    pub mask_plan: MaskPlan,
}

/// patchify -> sample_mask -> encode -> fuse -> decode -> masked MSE.
pub fn forward_mae(
    cfg: &ModelConfig,
    params: &ParamStore,
    image: &MultispectralImage,
    ocean: &OceanFeatureVector,
    seed: u64,
) -> Result<MaeOutput> {
    cfg.validate()?;
    let patches = patchify(image, cfg)?;
    let plan = sample_mask(patches.n_patches(), cfg.mask_ratio, seed)?;
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let nodes = mae_graph(&mut g, &pv, cfg, &patches, ocean, &plan)?;
    let loss = nodes.loss.ok_or(Error::EmptyMask)?;
    let recon = PatchSequence {
        patch_vectors: g.value(nodes.recon).clone(),
        grid_shape: patches.grid_shape,
    };
    Ok(MaeOutput {
        reconstruction: unpatchify(&recon, cfg)?,
        loss: g.value(loss).data()[0],
        mask_plan: plan,
    })
}

/// Loss and gradients for every parameter accepted by `trainable`.
pub fn mae_loss_and_grads(
    cfg: &ModelConfig,
    params: &ParamStore,
    patches: &PatchSequence,
    ocean: &OceanFeatureVector,
    plan: &MaskPlan,
    trainable: impl Fn(&str) -> bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let mut pv = ParamVars::default();
    params.bind_into(&mut g, &mut pv, trainable);
    let nodes = mae_graph(&mut g, &pv, cfg, patches, ocean, plan)?;
    let loss = nodes.loss.ok_or(Error::EmptyMask)?;
    let grads = g.backward(loss);
    Ok((g.value(loss).data()[0], pv.collect_grads(&g, &grads)))
}

/// Encoder output for the visible patches of `plan`, without gradients.
pub fn encode(
    cfg: &ModelConfig,
    params: &ParamStore,
    patches: &PatchSequence,
    plan: &MaskPlan,
) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let visible = g.constant(patches.select(&plan.visible_indices));
    let out = encode_node(&mut g, &pv, cfg, visible, &plan.visible_indices)?;
    Ok(TokenSequence {
        tokens: g.value(out).clone(),
    })
}

/// Encoder output with every patch visible (transfer-time embedding).
pub fn embed_node(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    image: &MultispectralImage,
) -> Result<Var> {
    let patches = patchify(image, cfg)?;
    let all: Vec<usize> = (0..patches.n_patches()).collect();
    let x = g.constant(patches.patch_vectors);
    let tokens = encode_node(g, pv, cfg, x, &all)?;
    Ok(g.gather_rows(tokens, &[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocean::extract_transfer_embedding;
    use rand::Rng;

    fn random_image(cfg: &ModelConfig, seed: u64) -> MultispectralImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        let data = (0..s * s * cfg.channels)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        MultispectralImage::new(s, s, cfg.channels, data).unwrap()
    }

    fn ocean(v: [f64; 3]) -> OceanFeatureVector {
        OceanFeatureVector::standardized(v.to_vec())
    }

    #[test]
    fn spec_names_are_unique() {
        let specs = mae_param_specs(&ModelConfig::default());
        assert_eq!(specs.len(), shapes_of(&specs).len());
    }

    #[test]
    fn depth_zero_identity_encoder_passes_tokens_through() {
        let cfg = ModelConfig {
            image_size: 4,
            patch_size: 2,
            channels: 2,
            embed_dim: 8,
            encoder_depth: 0,
            encoder_heads: 1,
            ..ModelConfig::tiny()
        };
        let mut params = init_encoder_params(&cfg, 0);
        params.insert("encoder.patch_embed.weight", Tensor::eye(8));
        params.insert("encoder.pos_embed", Tensor::zeros(&[5, 8]));
        let img = random_image(&cfg, 1);
        let patches = patchify(&img, &cfg).unwrap();
        let plan = sample_mask(4, 0.5, 3).unwrap();
        let out = encode(&cfg, &params, &patches, &plan).unwrap();
        let cls = params.get("encoder.cls_token").unwrap();
        assert_eq!(out.tokens.row(0), cls.data());
        for (r, &i) in plan.visible_indices.iter().enumerate() {
            assert_eq!(out.tokens.row(r + 1), patches.patch(i));
        }
        assert_eq!(extract_transfer_embedding(&out).unwrap().0, cls.data());
    }

    #[test]
    fn encoder_rejects_out_of_range_index() {
        let cfg = ModelConfig::tiny();
        let params = init_mae_params(&cfg, 0);
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, cfg.patch_dim()]));
        assert!(encode_node(&mut g, &pv, &cfg, x, &[cfg.n_patches()]).is_err());
    }

    #[test]
    fn decode_shape_contract() {
        let cfg = ModelConfig::tiny();
        let params = init_mae_params(&cfg, 5);
        let patches = patchify(&random_image(&cfg, 2), &cfg).unwrap();
        for ratio in [0.0, 0.5, 0.9] {
            let plan = sample_mask(cfg.n_patches(), ratio, 9).unwrap();
            let mut g = Graph::new();
            let pv = params.bind(&mut g, false);
            let nodes =
                mae_graph(&mut g, &pv, &cfg, &patches, &ocean([0.1, 0.2, 0.3]), &plan).unwrap();
            assert_eq!(g.shape(nodes.recon), &[cfg.n_patches(), cfg.patch_dim()]);
            assert_eq!(nodes.loss.is_none(), ratio == 0.0);
        }
    }

    #[test]
    fn decode_rejects_wrong_combined_width() {
        let cfg = ModelConfig::tiny();
        let params = init_mae_params(&cfg, 5);
        let patches = patchify(&random_image(&cfg, 2), &cfg).unwrap();
        let plan = sample_mask(cfg.n_patches(), 0.5, 1).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let vis = g.constant(patches.select(&plan.visible_indices));
        let enc = encode_node(&mut g, &pv, &cfg, vis, &plan.visible_indices).unwrap();
        let bad = g.constant(Tensor::zeros(&[1, cfg.embed_dim]));
        let err = decode_node(&mut g, &pv, &cfg, enc, &plan, bad).unwrap_err();
        assert!(err.to_string().contains("combined CLS width"));
    }

    #[test]
    fn masked_positions_decode_identically_without_positions() {
        let cfg = ModelConfig {
            decoder_depth: 0,
            decoder_dim: 48,
            decoder_heads: 1,
            ..ModelConfig::tiny()
        };
        let mut params = init_mae_params(&cfg, 3);
        params.insert("decoder.pred.weight", Tensor::eye(48));
        params.insert("decoder.pos_embed", Tensor::zeros(&[17, 48]));
        let patches = patchify(&random_image(&cfg, 4), &cfg).unwrap();
        let plan = sample_mask(cfg.n_patches(), 0.75, 2).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let nodes =
            mae_graph(&mut g, &pv, &cfg, &patches, &ocean([1.0, 0.0, -1.0]), &plan).unwrap();
        let recon = g.value(nodes.recon);
        let first = recon.row(plan.masked_indices[0]);
        for &i in &plan.masked_indices[1..] {
            assert_eq!(recon.row(i), first);
        }
    }

    #[test]
    fn forward_is_deterministic_and_nonnegative() {
        let cfg = ModelConfig::tiny();
        let params = init_mae_params(&cfg, 1);
        let img = random_image(&cfg, 1);
        let o = ocean([0.3, -0.2, 1.0]);
        let a = forward_mae(&cfg, &params, &img, &o, 17).unwrap();
        let b = forward_mae(&cfg, &params, &img, &o, 17).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert!(a.loss >= 0.0);
        assert_eq!(a.reconstruction.dims(), img.dims());
    }

    #[test]
    fn visible_pixel_changes_do_not_move_zero_decoder_loss() {
        let cfg = ModelConfig::tiny();
        let mut params = init_mae_params(&cfg, 1);
        for (name, t) in mae_param_shapes(&cfg) {
            if name.starts_with("decoder.") {
                params.insert(name, Tensor::zeros(&t));
            }
        }
        let img = random_image(&cfg, 8);
        let o = ocean([0.0, 1.0, 2.0]);
        let base = forward_mae(&cfg, &params, &img, &o, 4).unwrap();
        let mut perturbed = img.clone();
        let p = cfg.patch_size;
        let g = cfg.grid_size();
        for &vi in &base.mask_plan.visible_indices {
            let (gy, gx) = (vi / g, vi % g);
            for c in 0..cfg.channels {
                let y = gy * p + 1;
                let x = gx * p + 2;
                perturbed.set(y, x, c, perturbed.get(y, x, c) + 3.5);
            }
        }
        let after = forward_mae(&cfg, &params, &perturbed, &o, 4).unwrap();
        assert_eq!(after.mask_plan, base.mask_plan);
        assert_eq!(after.loss.to_bits(), base.loss.to_bits());
    }

    #[test]
    fn empty_mask_has_no_loss() {
        let cfg = ModelConfig {
            mask_ratio: 0.0,
            ..ModelConfig::tiny()
        };
        let params = init_mae_params(&cfg, 1);
        let err = forward_mae(&cfg, &params, &random_image(&cfg, 0), &ocean([0.0; 3]), 0);
        assert!(matches!(err, Err(Error::EmptyMask)));
    }
}
