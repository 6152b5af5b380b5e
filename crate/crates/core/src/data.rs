//! Synthetic ocean scenes, normalization statistics and the dataset
//! directory format.
//!
//! A dataset directory is an array store (see [`crate::store`]) of kind
//! `dataset`. Every sample `<id>` owns five arrays:
//!
//! | array          | shape       | content                                 |
//! |----------------|-------------|-----------------------------------------|
//! | `<id>.image`   | `[H, W, C]` | raw band values                          |
//! | `<id>.labels`  | `[H, W]`    | class index, or the ignore label        |
//! | `<id>.depth`   | `[H, W]`    | depth in meters, negative below surface |
//! | `<id>.valid`   | `[H, W]`    | 1 where the depth is valid, else 0      |
//! | `<id>.ocean`   | `[N_ocean]` | raw descriptors, `NaN` if missing       |

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocean::{OceanFeatureVector, DEFAULT_DESCRIPTORS};
use crate::raster::{DepthMap, MultispectralImage, SegmentationMap, IGNORE_LABEL};
use crate::store::{load_arrays, save_arrays};
use crate::tensor::Tensor;

pub const DATASET_KIND: &str = "dataset";

/// Deepest synthetic depth in meters.
pub const MIN_DEPTH: f64 = -30.3;
pub const MAX_DEPTH: f64 = 0.0;

/// Band whose mean drives the chlorophyll descriptor (clamped to the last
/// band for narrow images).
pub const CHLOROPHYLL_BAND: usize = 2;
/// Band whose mean drives the Secchi-depth descriptor.
pub const SECCHI_BAND: usize = 0;
const CHLOROPHYLL_AFFINE: (f64, f64) = (0.05, 10.0);
const SECCHI_AFFINE: (f64, f64) = (0.5, 20.0);
const NOISE_STD: f64 = 0.005;
const SIGNATURE_SEED: u64 = 0x0CEA_4AE5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Geometry {
    pub fn square(size: usize, channels: usize) -> Self {
        Self {
            height: size,
            width: size,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Per-channel and per-descriptor standardization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationStats {
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub ocean_mean: Vec<f64>,
    pub ocean_std: Vec<f64>,
}

impl NormalizationStats {
    /// Population mean/std over every pixel (bands) and every sample
    /// (descriptors, skipping missing values). A zero spread is replaced by 1
    /// so that degenerate corpora (e.g. a single sample) stay usable.
    pub fn compute(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| {
            Error::config("samples", "cannot compute statistics of an empty corpus")
        })?;
        let c = first.image.channels;
        let k = first.ocean.values.len();
        let mut ch = vec![(0.0, 0.0, 0usize); c];
        let mut oc = vec![(0.0, 0.0, 0usize); k];
        for s in samples {
            for px in s.image.data.chunks(c) {
                for (acc, v) in ch.iter_mut().zip(px) {
                    acc.0 += v;
                    acc.2 += 1;
                }
            }
            for (acc, v) in oc.iter_mut().zip(&s.ocean.values) {
                if !v.is_nan() {
                    acc.0 += v;
                    acc.2 += 1;
                }
            }
        }
        let means = |acc: &[(f64, f64, usize)]| -> Vec<f64> {
            acc.iter()
                .map(|a| if a.2 == 0 { 0.0 } else { a.0 / a.2 as f64 })
                .collect()
        };
        let channel_mean = means(&ch);
        let ocean_mean = means(&oc);
        for s in samples {
            for px in s.image.data.chunks(c) {
                for ((acc, v), m) in ch.iter_mut().zip(px).zip(&channel_mean) {
                    acc.1 += (v - m) * (v - m);
                }
            }
            for ((acc, v), m) in oc.iter_mut().zip(&s.ocean.values).zip(&ocean_mean) {
                if !v.is_nan() {
                    acc.1 += (v - m) * (v - m);
                }
            }
        }
        let stds = |acc: &[(f64, f64, usize)]| -> Vec<f64> {
            acc.iter()
                .map(|a| {
                    let s = if a.2 == 0 {
                        0.0
                    } else {
                        (a.1 / a.2 as f64).sqrt()
                    };
                    if s > 1e-12 {
                        s
                    } else {
                        1.0
                    }
                })
                .collect()
        };
        let stats = Self {
            channel_mean,
            channel_std: stds(&ch),
            ocean_mean,
            ocean_std: stds(&oc),
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("channel_mean", &self.channel_mean),
            ("channel_std", &self.channel_std),
            ("ocean_mean", &self.ocean_mean),
            ("ocean_std", &self.ocean_std),
        ];
        for (field, v) in all {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::config(field, "statistics must be finite"));
            }
        }
        if self.channel_mean.len() != self.channel_std.len() {
            return Err(Error::config(
                "channel_std",
                "length differs from channel_mean",
            ));
        }
        if self.ocean_mean.len() != self.ocean_std.len() {
            return Err(Error::config("ocean_std", "length differs from ocean_mean"));
        }
        for (field, v) in [
            ("channel_std", &self.channel_std),
            ("ocean_std", &self.ocean_std),
        ] {
            if v.iter().any(|s| *s <= 0.0) {
                return Err(Error::config(field, "standard deviation must be positive"));
            }
        }
        Ok(())
    }

    pub fn normalize_image(&self, image: &MultispectralImage) -> Result<MultispectralImage> {
        self.map_image(image, |v, m, s| (v - m) / s)
    }

    pub fn denormalize_image(&self, image: &MultispectralImage) -> Result<MultispectralImage> {
        self.map_image(image, |v, m, s| v * s + m)
    }

    fn map_image(
        &self,
        image: &MultispectralImage,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<MultispectralImage> {
        let c = image.channels;
        if c != self.channel_mean.len() {
            return Err(Error::shape(
                "image channels vs statistics",
                self.channel_mean.len(),
                c,
            ));
        }
        if self.channel_std.contains(&0.0) {
            return Err(Error::config("channel_std", "standard deviation is zero"));
        }
        let mut out = image.clone();
        for px in out.data.chunks_mut(c) {
            for ((v, m), s) in px.iter_mut().zip(&self.channel_mean).zip(&self.channel_std) {
                *v = f(*v, *m, *s);
            }
        }
        Ok(out)
    }

    pub fn standardize_ocean(&self, raw: &OceanFeatureVector) -> Result<OceanFeatureVector> {
        raw.standardize(&self.ocean_mean, &self.ocean_std)
    }

    pub fn destandardize_ocean(&self, f: &OceanFeatureVector) -> Result<OceanFeatureVector> {
        if f.values.len() != self.ocean_mean.len() {
            return Err(Error::shape(
                "ocean descriptor count",
                self.ocean_mean.len(),
                f.values.len(),
            ));
        }
        let values = f
            .values
            .iter()
            .zip(&self.ocean_mean)
            .zip(&self.ocean_std)
            .map(|((v, m), s)| v * s + m)
            .collect();
        Ok(OceanFeatureVector::raw(values))
    }
}

/// Manifest metadata of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sample_ids: Vec<String>,
    pub geometry: Geometry,
    pub n_classes: usize,
    pub ignore_label: u32,
    pub ocean_descriptors: Vec<String>,
    pub depth_range: [f64; 2],
    pub normalization: NormalizationStats,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn n_ocean(&self) -> usize {
        self.ocean_descriptors.len()
    }
}

/// One raw (unnormalized) sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: MultispectralImage,
    pub labels: SegmentationMap,
    pub depth: DepthMap,
    pub ocean: OceanFeatureVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.manifest.normalization
    }

    /// First `n` samples, keeping the manifest statistics.
    pub fn take(&self, n: usize) -> Dataset {
        let samples: Vec<Sample> = self.samples.iter().take(n).cloned().collect();
        let mut manifest = self.manifest.clone();
        manifest.sample_ids = samples.iter().map(|s| s.id.clone()).collect();
        Dataset { manifest, samples }
    }

    /// Replaces the stored statistics (e.g. with the pre-training corpus').
    pub fn with_normalization(mut self, stats: NormalizationStats) -> Dataset {
        self.manifest.normalization = stats;
        self
    }
}

/// A generated scene and its derived descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: MultispectralImage,
    pub labels: SegmentationMap,
    pub depth: DepthMap,
    pub ocean: OceanFeatureVector,
}

/// Per-class spectral signatures and the optically deep water colour,
/// fixed across scenes.
fn spectral_tables(n_classes: usize, channels: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED);
    let signatures = (0..n_classes)
        .map(|_| {
            (0..channels)
                .map(|_| rng.random_range(0.05..0.45))
                .collect()
        })
        .collect();
    let water = (0..channels)
        .map(|_| rng.random_range(0.01..0.05))
        .collect();
    let attenuation = (0..channels)
        .map(|b| 0.04 + 0.3 * b as f64 / channels.max(1) as f64)
        .collect();
    (signatures, water, attenuation)
}

/// Descriptors as a pure function of the scene: mean depth, and affine maps
/// of two band means.
pub fn derive_ocean_features(image: &MultispectralImage, depth: &DepthMap) -> OceanFeatureVector {
    let (valid_sum, n_valid) = depth
        .depth
        .iter()
        .zip(&depth.valid)
        .filter(|(_, ok)| **ok)
        .fold((0.0, 0usize), |(s, n), (d, _)| (s + d, n + 1));
    let bathymetry = if n_valid == 0 {
        f64::NAN
    } else {
        valid_sum / n_valid as f64
    };
    let chl_band = CHLOROPHYLL_BAND.min(image.channels - 1);
    let chlorophyll = CHLOROPHYLL_AFFINE.0 + CHLOROPHYLL_AFFINE.1 * image.band_mean(chl_band);
    let secchi = SECCHI_AFFINE.0 + SECCHI_AFFINE.1 * image.band_mean(SECCHI_BAND);
    OceanFeatureVector::raw(vec![bathymetry, chlorophyll, secchi])
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates one scene. The result is a pure function of the arguments and
/// every value is representable in `f32`.
pub fn generate_scene(seed: u64, geometry: Geometry, n_classes: usize) -> Result<SyntheticScene> {
    geometry.validate()?;
    if n_classes == 0 {
        return Err(Error::config("n_classes", "must be at least 1"));
    }
    let (h, w, c) = (geometry.height, geometry.width, geometry.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = h.max(w) as f64;

    let base = -rng.random_range(3.0..20.0);
    let n_bumps = rng.random_range(3..=6);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(0.15..0.4) * extent,
                rng.random_range(-12.0..12.0),
            )
        })
        .collect();
    let mut depth = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut d = base;
            for &(cx, cy, sigma, amp) in &bumps {
                let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                d += amp * (-r2 / (2.0 * sigma * sigma)).exp();
            }
            depth.push(f32_round(d.clamp(MIN_DEPTH, MAX_DEPTH)));
        }
    }

    // Blob ownership: nearest of a few distinct seed pixels.
    let n_blobs = rng
        .random_range(n_classes.max(3)..=n_classes + 3)
        .min(h * w);
    let mut centers: Vec<(usize, usize, u32)> = Vec::with_capacity(n_blobs);
    while centers.len() < n_blobs {
        let (cy, cx) = (rng.random_range(0..h), rng.random_range(0..w));
        if centers.iter().any(|&(y, x, _)| y == cy && x == cx) {
            continue;
        }
        let k = centers.len();
        let class = if k < n_classes {
            k as u32
        } else {
            rng.random_range(0..n_classes) as u32
        };
        centers.push((cy, cx, class));
    }
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let owner = centers
                .iter()
                .min_by_key(|&&(cy, cx, _)| cy.abs_diff(y).pow(2) + cx.abs_diff(x).pow(2))
                .expect("at least one blob");
            labels.push(owner.2);
        }
    }

    let (signatures, water, attenuation) = spectral_tables(n_classes, c);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid noise");
    let mut data = Vec::with_capacity(h * w * c);
    for (d, &class) in depth.iter().zip(&labels) {
        for b in 0..c {
            let t = (-attenuation[b] * d.abs()).exp();
            let sig = signatures[class as usize][b];
            let v = water[b] + (sig - water[b]) * t + noise.sample(&mut rng);
            data.push(f32_round(v.max(0.0)));
        }
    }

    let image = MultispectralImage::new(h, w, c, data)?;
    let depth = DepthMap::all_valid(h, w, depth)?;
    let mut ocean = derive_ocean_features(&image, &depth);
    for v in &mut ocean.values {
        *v = f32_round(*v);
    }
    Ok(SyntheticScene {
        image,
        labels: SegmentationMap::new(h, w, labels)?,
        depth,
        ocean,
    })
}

/// Options for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            image_size: 32,
            channels: 11,
            n_classes: 4,
            seed: 0,
        }
    }
}

/// Per-sample scene seed, decorrelated from neighbouring indices.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(cfg: &GenerateConfig) -> Result<Dataset> {
    if cfg.n_samples == 0 {
        return Err(Error::config("n_samples", "must be at least 1"));
    }
    if cfg.image_size == 0 {
        return Err(Error::config("image_size", "must be at least 1"));
    }
    if cfg.channels == 0 {
        return Err(Error::config("channels", "must be at least 1"));
    }
    let geometry = Geometry::square(cfg.image_size, cfg.channels);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let scene = generate_scene(scene_seed(cfg.seed, i as u64), geometry, cfg.n_classes)?;
        samples.push(Sample {
            id: format!("sample_{i:05}"),
            image: scene.image,
            labels: scene.labels,
            depth: scene.depth,
            ocean: scene.ocean,
        });
    }
    let normalization = NormalizationStats::compute(&samples)?;
    Ok(Dataset {
        manifest: DatasetManifest {
            sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
            geometry,
            n_classes: cfg.n_classes,
            ignore_label: IGNORE_LABEL,
            ocean_descriptors: DEFAULT_DESCRIPTORS.iter().map(|s| s.to_string()).collect(),
            depth_range: [MIN_DEPTH, MAX_DEPTH],
            normalization,
            seed: Some(cfg.seed),
        },
        samples,
    })
}

fn array_name(id: &str, field: &str) -> String {
    format!("{id}.{field}")
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    ds.manifest.normalization.validate()?;
    let mut arrays = BTreeMap::new();
    for s in &ds.samples {
        let (h, w) = (s.image.height, s.image.width);
        arrays.insert(array_name(&s.id, "image"), s.image.to_tensor());
        arrays.insert(
            array_name(&s.id, "labels"),
            Tensor::new(
                vec![h, w],
                s.labels.labels.iter().map(|&l| l as f64).collect(),
            ),
        );
        arrays.insert(
            array_name(&s.id, "depth"),
            Tensor::new(vec![h, w], s.depth.depth.clone()),
        );
        arrays.insert(
            array_name(&s.id, "valid"),
            Tensor::new(
                vec![h, w],
                s.depth
                    .valid
                    .iter()
                    .map(|&v| if v { 1.0 } else { 0.0 })
                    .collect(),
            ),
        );
        arrays.insert(
            array_name(&s.id, "ocean"),
            Tensor::new(vec![s.ocean.values.len()], s.ocean.values.clone()),
        );
    }
    save_arrays(path, DATASET_KIND, &ds.manifest, &arrays)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let (manifest, mut arrays): (DatasetManifest, _) = load_arrays(path, DATASET_KIND)?;
    manifest.geometry.validate()?;
    manifest.normalization.validate()?;
    let Geometry {
        height: h,
        width: w,
        channels: c,
    } = manifest.geometry;
    let k = manifest.n_ocean();
    let mut take = |id: &str, field: &str, shape: &[usize]| -> Result<Tensor> {
        let name = array_name(id, field);
        let t = arrays
            .remove(&name)
            .ok_or_else(|| Error::MissingArray(name.clone()))?;
        if t.shape() != shape {
            return Err(Error::ArrayMismatch {
                name,
                expected: shape.to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        Ok(t)
    };
    let mut samples = Vec::with_capacity(manifest.sample_ids.len());
    for id in &manifest.sample_ids {
        let image = take(id, "image", &[h, w, c])?;
        let labels = take(id, "labels", &[h, w])?;
        let depth = take(id, "depth", &[h, w])?;
        let valid = take(id, "valid", &[h, w])?;
        let ocean = take(id, "ocean", &[k])?;
        let labels = SegmentationMap::new(h, w, labels.data().iter().map(|&v| v as u32).collect())?;
        if labels
            .labels
            .iter()
            .any(|&l| l != manifest.ignore_label && l as usize >= manifest.n_classes)
        {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("labels of `{id}` exceed n_classes {}", manifest.n_classes),
            });
        }
        samples.push(Sample {
            id: id.clone(),
            image: MultispectralImage::new(h, w, c, image.into_data())?,
            labels,
            depth: DepthMap::new(
                h,
                w,
                depth.into_data(),
                valid.data().iter().map(|&v| v != 0.0).collect(),
            )?,
            ocean: OceanFeatureVector::raw(ocean.into_data()),
        });
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::UnexpectedArray(extra.clone()));
    }
    Ok(Dataset { manifest, samples })
}
