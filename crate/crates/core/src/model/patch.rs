//! Patch tokenization.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::raster::MultispectralImage;
use crate::tensor::Tensor;

/// Flattened non-overlapping patches in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `[n_patches, patch_size^2 * channels]`
    pub patch_vectors: Tensor,
    pub grid_shape: (usize, usize),
}

impl PatchSequence {
    pub fn n_patches(&self) -> usize {
        self.grid_shape.0 * self.grid_shape.1
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        self.patch_vectors.row(i)
    }

    /// Rows for the given patch indices, in the order given.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let p = self.patch_vectors.cols();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend_from_slice(self.patch(i));
        }
        Tensor::new(vec![indices.len(), p], data)
    }
}

/// Splits an image into patches. Each patch vector lists its pixels row by
/// row with channels fastest.
pub fn patchify(image: &MultispectralImage, cfg: &ModelConfig) -> Result<PatchSequence> {
    let expected = [cfg.image_size, cfg.image_size, cfg.channels];
    if image.dims() != expected {
        return Err(Error::shape(
            "patchify input (H, W, C)",
            expected,
            image.dims(),
        ));
    }
    let (p, c, g) = (cfg.patch_size, cfg.channels, cfg.grid_size());
    let mut data = Vec::with_capacity(image.data.len());
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                let row = (gy * p + py) * image.width + gx * p;
                data.extend_from_slice(&image.data[row * c..(row + p) * c]);
            }
        }
    }
    Ok(PatchSequence {
        patch_vectors: Tensor::new(vec![g * g, cfg.patch_dim()], data),
        grid_shape: (g, g),
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(patches: &PatchSequence, cfg: &ModelConfig) -> Result<MultispectralImage> {
    let g = cfg.grid_size();
    let expected = [g * g, cfg.patch_dim()];
    if patches.patch_vectors.shape() != expected || patches.grid_shape != (g, g) {
        return Err(Error::shape(
            "unpatchify input [n_patches, patch_dim]",
            expected,
            patches.patch_vectors.shape(),
        ));
    }
    let (p, c, s) = (cfg.patch_size, cfg.channels, cfg.image_size);
    let mut img = MultispectralImage::zeros(s, s, c);
    for gy in 0..g {
        for gx in 0..g {
            let v = patches.patch(gy * g + gx);
            for py in 0..p {
                let row = (gy * p + py) * s + gx * p;
                img.data[row * c..(row + p) * c].copy_from_slice(&v[py * p * c..(py + 1) * p * c]);
            }
        }
    }
    Ok(img)
}
