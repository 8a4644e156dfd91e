//! Series IO, normalization, tiling, windowing, synthetic data and drift.

pub mod dataset;
pub mod drift;
pub mod normalize;
pub mod patches;
pub mod series;
pub mod synth;
pub mod windows;

pub use dataset::Dataset;
pub use drift::{drift_apply, DriftKind, DriftSpec};
pub use normalize::Normalizer;
pub use patches::{patch_origins, stitch_patches, tile_patches, Origin, Patch};
pub use series::GridSeries;
pub use synth::{synth_generate, SynthConfig};
pub use windows::{make_windows, PatchWindow, Sample, Split, Splits, WindowSpec};
