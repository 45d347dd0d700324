//! Patch grids and seeded train/validation/test splits.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::HyperCube;

pub const DEFAULT_PATCH_SIZE: usize = 144;

/// Raster-order grid of `patch_size²` crops taken every `stride` pixels.
/// Partial patches at the right and bottom edges are dropped.
pub fn extract_patches(cube: &HyperCube, patch_size: usize, stride: usize) -> Result<Vec<HyperCube>> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::config("patch size and stride must be >= 1"));
    }
    if cube.height < patch_size || cube.width < patch_size {
        return Err(Error::contract(
            "extract_patches",
            format!("{}x{} cube is smaller than a {patch_size}x{patch_size} patch", cube.height, cube.width),
        ));
    }
    let rows = (cube.height - patch_size) / stride + 1;
    let cols = (cube.width - patch_size) / stride + 1;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(cube.crop(r * stride, c * stride, patch_size, patch_size)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }
}

/// HR patches plus a disjoint assignment of patch indices to roles.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub patches: Vec<HyperCube>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub patch_size: usize,
    pub scale: usize,
    pub seed: u64,
}

pub const TRAIN_FRACTION: f64 = 0.70;
pub const VAL_FRACTION: f64 = 0.15;

impl DatasetSplit {
    /// Shuffles patch indices with `seed` and assigns roughly 70/15/15.
    /// With at least two patches, validation gets one or more; with three or
    /// more, so does test.
    pub fn new(patches: Vec<HyperCube>, patch_size: usize, scale: usize, seed: u64) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::config("cannot split an empty patch list"));
        }
        for p in &patches {
            if p.height != patch_size || p.width != patch_size {
                return Err(Error::dim(
                    "DatasetSplit::new",
                    format!("patch is {}x{}, expected {patch_size}x{patch_size}", p.height, p.width),
                ));
            }
        }
        if scale == 0 || !patch_size.is_multiple_of(scale) {
            return Err(Error::config(format!("patch size {patch_size} not divisible by scale {scale}")));
        }
        let n = patches.len();
        let holdout = |frac: f64, min_n: usize| {
            if n >= min_n {
                ((n as f64 * frac).round() as usize).max(1)
            } else {
                0
            }
        };
        let n_val = holdout(VAL_FRACTION, 2);
        let n_test = holdout(1.0 - TRAIN_FRACTION - VAL_FRACTION, 3);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = n - n_val - n_test;
        let mut train = idx[..n_train].to_vec();
        let mut val = idx[n_train..n_train + n_val].to_vec();
        let mut test = idx[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Ok(Self {
            patches,
            train,
            val,
            test,
            patch_size,
            scale,
            seed,
        })
    }

    pub fn role_of(&self, index: usize) -> Option<Role> {
        if self.train.binary_search(&index).is_ok() {
            Some(Role::Train)
        } else if self.val.binary_search(&index).is_ok() {
            Some(Role::Val)
        } else if self.test.binary_search(&index).is_ok() {
            Some(Role::Test)
        } else {
            None
        }
    }

    /// `patch_index,role` CSV, one line per patch in index order.
    pub fn manifest(&self) -> String {
        let mut s = String::from("patch_index,role\n");
        for i in 0..self.patches.len() {
            let role = self.role_of(i).map_or("unassigned", Role::as_str);
            let _ = writeln!(s, "{i},{role}");
        }
        s
    }
}
