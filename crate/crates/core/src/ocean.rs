//! Fusion of physical ocean descriptors with the encoder's CLS token.
//!
//! Per-image descriptors (bathymetry, chlorophyll, Secchi depth) are
//! standardized, projected linearly to the visual embedding width and
//! concatenated after `E_CLS`. The combined vector conditions the decoder
//! during pre-training only; the representation transferred downstream is
//! `E_CLS` alone.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec, ParamStore, ParamVars};
use crate::tensor::Tensor;

pub const PROJ_WEIGHT: &str = "fusion.proj.weight";
pub const PROJ_BIAS: &str = "fusion.proj.bias";

/// Names of the default descriptors, in storage order.
pub const DEFAULT_DESCRIPTORS: [&str; 3] = ["bathymetry_m", "chlorophyll_mg_m3", "secchi_depth_m"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationState {
    Raw,
    Standardized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OceanFeatureVector {
    pub values: Vec<f64>,
    pub state: NormalizationState,
    /// `true` where the raw descriptor was missing and the corpus mean was
    /// substituted.
    pub imputed: Vec<bool>,
}

impl OceanFeatureVector {
    /// Raw descriptors; `NaN` marks a missing value.
    pub fn raw(values: Vec<f64>) -> Self {
        let imputed = vec![false; values.len()];
        Self {
            values,
            state: NormalizationState::Raw,
            imputed,
        }
    }

    pub fn standardized(values: Vec<f64>) -> Self {
        let imputed = vec![false; values.len()];
        Self {
            values,
            state: NormalizationState::Standardized,
            imputed,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::standardized(vec![0.0; n])
    }

    /// `(v - mean) / std` per descriptor. Missing (`NaN`) values become the
    /// mean, i.e. 0 after standardization, and are flagged.
    pub fn standardize(&self, mean: &[f64], std: &[f64]) -> Result<Self> {
        if self.state == NormalizationState::Standardized {
            return Ok(self.clone());
        }
        if mean.len() != self.values.len() || std.len() != self.values.len() {
            return Err(Error::shape(
                "ocean normalization stats",
                self.values.len(),
                (mean.len(), std.len()),
            ));
        }
        let mut values = Vec::with_capacity(self.values.len());
        let mut imputed = Vec::with_capacity(self.values.len());
        for ((v, m), s) in self.values.iter().zip(mean).zip(std) {
            if *s == 0.0 {
                return Err(Error::config("ocean_std", "standard deviation is zero"));
            }
            if v.is_nan() {
                values.push(0.0);
                imputed.push(true);
            } else {
                values.push((v - m) / s);
                imputed.push(false);
            }
        }
        let out = Self {
            values,
            state: NormalizationState::Standardized,
            imputed,
        };
        out.check_finite()?;
        Ok(out)
    }

    fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("ocean feature vector".into()))
        }
    }
}

/// Linear map from `N_ocean` descriptors to the embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `[N_ocean, D_embed]`
    pub weight: Tensor,
    /// `[D_embed]`
    pub bias: Tensor,
}

impl FusionParams {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let weight = store
            .get(PROJ_WEIGHT)
            .ok_or_else(|| Error::MissingArray(PROJ_WEIGHT.into()))?
            .clone();
        let bias = store
            .get(PROJ_BIAS)
            .ok_or_else(|| Error::MissingArray(PROJ_BIAS.into()))?
            .clone();
        Ok(Self { weight, bias })
    }

    pub fn n_ocean(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub(crate) fn fusion_specs(n_ocean: usize, embed_dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            PROJ_WEIGHT,
            &[n_ocean, embed_dim],
            Init::Xavier {
                fan_in: n_ocean,
                fan_out: embed_dim,
            },
        ),
        ParamSpec::new(PROJ_BIAS, &[embed_dim], Init::Zeros),
    ]
}

/// `E_CLS` followed by the projected descriptors; width `2 * D_embed`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedEmbedding {
    values: Vec<f64>,
}

impl CombinedEmbedding {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }

    /// `(E_CLS, projected ocean features)`.
    pub fn split(&self) -> (&[f64], &[f64]) {
        self.values.split_at(self.values.len() / 2)
    }
}

/// The `D_embed`-wide representation `z` handed to downstream models.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEmbedding(pub Vec<f64>);

impl LatentEmbedding {
    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Encoder output: CLS token in row 0 followed by one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
}

impl TokenSequence {
    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.rows().saturating_sub(1)
    }
}

/// `f_hat = f W_proj + b_proj`.
pub fn project_ocean(f: &OceanFeatureVector, p: &FusionParams) -> Result<Vec<f64>> {
    if f.state != NormalizationState::Standardized {
        return Err(Error::config(
            "ocean",
            "descriptors must be standardized before projection",
        ));
    }
    f.check_finite()?;
    if !p.weight.all_finite() || !p.bias.all_finite() {
        return Err(Error::NonFinite("fusion parameters".into()));
    }
    let (n, d) = (p.n_ocean(), p.embed_dim());
    if f.values.len() != n {
        return Err(Error::shape("ocean descriptor count", n, f.values.len()));
    }
    let mut out = p.bias.data().to_vec();
    for (i, fv) in f.values.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(&p.weight.data()[i * d..(i + 1) * d]) {
            *o += fv * w;
        }
    }
    Ok(out)
}

/// Concatenation `[e_cls | f_hat]` with no mixing.
pub fn fuse(e_cls: &[f64], f_hat: &[f64]) -> Result<CombinedEmbedding> {
    if e_cls.len() != f_hat.len() {
        return Err(Error::shape(
            "fuse: projected ocean width must equal CLS width",
            e_cls.len(),
            f_hat.len(),
        ));
    }
    let mut values = Vec::with_capacity(2 * e_cls.len());
    values.extend_from_slice(e_cls);
    values.extend_from_slice(f_hat);
    Ok(CombinedEmbedding { values })
}

/// Row 0 of the encoder output.
pub fn extract_transfer_embedding(encoder_out: &TokenSequence) -> Result<LatentEmbedding> {
    if encoder_out.tokens.is_empty() {
        return Err(Error::shape("encoder output", "at least the CLS row", 0));
    }
    Ok(LatentEmbedding(encoder_out.tokens.row(0).to_vec()))
}

/// Graph form of [`project_ocean`] followed by [`fuse`]: returns `[1, 2D]`.
pub(crate) fn fuse_node(g: &mut Graph, pv: &ParamVars, cls: Var, ocean: Var) -> Var {
    let w = pv.get(PROJ_WEIGHT);
    let b = pv.get(PROJ_BIAS);
    let f_hat = g.linear(ocean, w, b);
    g.concat_cols(&[cls, f_hat])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn params(w: Tensor, b: Vec<f64>) -> FusionParams {
        FusionParams {
            weight: w,
            bias: Tensor::new(vec![b.len()], b),
        }
    }

    #[test]
    fn zero_projection_is_zero() {
        let p = params(Tensor::zeros(&[3, 4]), vec![0.0; 4]);
        let f = OceanFeatureVector::standardized(vec![1.0, -2.0, 0.5]);
        assert_eq!(project_ocean(&f, &p).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn identity_projection() {
        let p = params(Tensor::eye(3), vec![0.0; 3]);
        let f = OceanFeatureVector::standardized(vec![1.0, 2.0, 3.0]);
        assert_eq!(project_ocean(&f, &p).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let (n, d) = (3, 7);
        let w: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut oracle = vec![0.0; d];
        for j in 0..d {
            let mut acc = b[j];
            for i in 0..n {
                acc += f[i] * w[i * d + j];
            }
            oracle[j] = acc;
        }
        let got = project_ocean(
            &OceanFeatureVector::standardized(f),
            &params(Tensor::new(vec![n, d], w), b),
        )
        .unwrap();
        for (a, o) in got.iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_rejects_raw_and_non_finite() {
        let p = params(Tensor::eye(3), vec![0.0; 3]);
        assert!(project_ocean(&OceanFeatureVector::raw(vec![1.0, 2.0, 3.0]), &p).is_err());
        let bad = OceanFeatureVector::standardized(vec![1.0, f64::INFINITY, 3.0]);
        assert!(matches!(project_ocean(&bad, &p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn fuse_concatenates() {
        let c = fuse(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(c.values(), &[1.0, 2.0, 3.0, 4.0]);
        let (e, f) = c.split();
        assert_eq!((e, f), (&[1.0, 2.0][..], &[3.0, 4.0][..]));
        assert!(fuse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn fuse_width_under_vit_base() {
        let e = vec![0.5; 768];
        let f = vec![-0.5; 768];
        let c = fuse(&e, &f).unwrap();
        assert_eq!(c.width(), 1536);
        let (a, b) = c.split();
        assert!(a.iter().zip(&e).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b.iter().zip(&f).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn standardize_imputes_missing() {
        let raw = OceanFeatureVector::raw(vec![-10.0, f64::NAN, 4.0]);
        let s = raw
            .standardize(&[-5.0, 1.0, 2.0], &[5.0, 1.0, 2.0])
            .unwrap();
        assert_eq!(s.values, vec![-1.0, 0.0, 1.0]);
        assert_eq!(s.imputed, vec![false, true, false]);
        assert!(raw.standardize(&[0.0; 3], &[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn extract_requires_cls_row() {
        let empty = TokenSequence {
            tokens: Tensor::zeros(&[0, 4]),
        };
        assert!(extract_transfer_embedding(&empty).is_err());
    }
}
