//! Image and per-pixel target rasters (channel-last, row-major).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u32 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct MultispectralImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `height * width * channels` values, channel fastest.
    pub data: Vec<f64>,
}

impl MultispectralImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "image buffer",
                height * width * channels,
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.dims().to_vec(), self.data.clone())
    }

    /// Mean of one band over all pixels.
    pub fn band_mean(&self, c: usize) -> f64 {
        let n = self.height * self.width;
        self.data.iter().skip(c).step_by(self.channels).sum::<f64>() / n as f64
    }
}

/// Per-pixel class labels; [`IGNORE_LABEL`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("label map", height * width, labels.len()));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= n_classes)
        {
            Some(&l) => Err(Error::LabelOutOfRange {
                label: l as usize,
                n_classes,
            }),
            None => Ok(()),
        }
    }

    /// Labels as optional class indices, `None` for ignored pixels.
    pub fn as_targets(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .map(|&l| (l != IGNORE_LABEL).then_some(l as usize))
            .collect()
    }
}

/// Per-pixel depth in meters (negative below the sea surface) with a validity
/// mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if depth.len() != height * width || valid.len() != height * width {
            return Err(Error::shape(
                "depth map",
                height * width,
                (depth.len(), valid.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            depth,
            valid,
        })
    }

    pub fn all_valid(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        let valid = vec![true; depth.len()];
        Self::new(height, width, depth, valid)
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}
