//! Random patch masking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Partition of patch indices into masked and visible sets, both ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked_indices: Vec<usize>,
    pub visible_indices: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.masked_indices.len() + self.visible_indices.len()
    }

    /// A plan with every patch visible.
    pub fn unmasked(n: usize) -> Self {
        Self {
            masked_indices: Vec::new(),
            visible_indices: (0..n).collect(),
            seed: 0,
        }
    }

    /// Builds a plan from an explicit masked set over `0..n`.
    pub fn from_masked(n: usize, masked: &[usize]) -> Result<Self> {
        let mut is_masked = vec![false; n];
        for &i in masked {
            if i >= n || is_masked[i] {
                return Err(Error::config(
                    "masked_indices",
                    format!("index {i} is out of range or repeated"),
                ));
            }
            is_masked[i] = true;
        }
        let (m, v): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_masked[i]);
        Ok(Self {
            masked_indices: m,
            visible_indices: v,
            seed: 0,
        })
    }
}

/// Number of masked patches: `floor(ratio * n)` evaluated in `f64`.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).floor() as usize
}

/// Draws a uniformly random masked subset of `0..n` from a seeded generator.
pub fn sample_mask(n: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if n == 0 {
        return Err(Error::config("n_patches", "must be at least 1"));
    }
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::config("mask_ratio", "must lie in [0, 1)"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = masked_count(n, mask_ratio);
    let mut masked = order[..k].to_vec();
    let mut visible = order[k..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        masked_indices: masked,
        visible_indices: visible,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ratio_point_nine_on_fourteen_by_fourteen_grid() {
        let plan = sample_mask(196, 0.9, 3).unwrap();
        assert_eq!(plan.masked_indices.len(), 176);
        assert_eq!(plan.visible_indices.len(), 20);
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let plan = sample_mask(4, 0.0, 11).unwrap();
        assert!(plan.masked_indices.is_empty());
        assert_eq!(plan.visible_indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn same_seed_same_plan() {
        assert_eq!(
            sample_mask(10, 0.9, 7).unwrap(),
            sample_mask(10, 0.9, 7).unwrap()
        );
        assert_ne!(
            sample_mask(100, 0.5, 7).unwrap().masked_indices,
            sample_mask(100, 0.5, 8).unwrap().masked_indices
        );
    }

    #[test]
    fn rejects_bad_ratio() {
        assert!(sample_mask(10, 1.0, 0).is_err());
        assert!(sample_mask(10, -0.1, 0).is_err());
        assert!(sample_mask(0, 0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_invariants(n in 1usize..400, ratio in 0.0f64..1.0, seed in any::<u64>()) {
            let plan = sample_mask(n, ratio, seed).unwrap();
            prop_assert_eq!(plan.masked_indices.len(), masked_count(n, ratio));
            let mut all: Vec<usize> = plan.masked_indices.iter().chain(&plan.visible_indices).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(plan.masked_indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(plan.visible_indices.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
