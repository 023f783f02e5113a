//! Samples, ground-truth targets, the synthetic generator and dataset loaders.

pub mod heatmap;
pub mod palette;
pub mod sample;
pub mod synth;

pub use heatmap::{quantize, render_gt_heatmap, GtHeatmap, DEFAULT_SIGMA};
pub use sample::{Camera, Sample, SampleMeta};
pub use synth::{random_style, synth_sample, synth_sample_with, BackgroundKind, StyleParams, SynthConfig};
pub mod dataset;

pub use dataset::{
    load_dataset, synth_dataset, write_synth_manifest, Dataset, DatasetFormat, Split, RHD_ORDER, STB_ORDER,
    STB_TEST_SEQUENCES,
};
