//! Cube I/O, normalization, degradation, patching and synthetic scenes.

mod cube;
mod degrade;
mod patches;
mod synth;

pub use cube::{normalize, read_cube, write_cube, HyperCube, HSC1_MAGIC};
pub use degrade::{degrade_area, degrade_area_tensor, expand_nearest};
pub use patches::{extract_patches, DatasetSplit, Role, DEFAULT_PATCH_SIZE, TRAIN_FRACTION, VAL_FRACTION};
pub use synth::{synth_cube, SynthParams};
