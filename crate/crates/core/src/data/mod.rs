//! Data ingestion, patch-level label synthesis and augmentation.

pub mod dataset;
pub mod grid;
pub mod patch;
pub mod sample;
pub mod synth;

pub use dataset::{export_patch_labels, load_dataset, read_patch_labels, save_sample};
pub use grid::{BinaryMask, Grid, RgbImage};
pub use patch::{
    crop_into_patch_grid, downsample_local, generate_patch_labels, LocalScaleMap, PatchGeometry,
    PatchLabelGrid, PatchRegion,
};
pub use sample::{augment, AugmentFlags, BiTemporalSample};
pub use synth::{synth_dataset, synth_samples};
