//! Synthetic referring-segmentation data with exact ground truth, and the
//! on-disk dataset format.

pub mod dataset;
pub mod generate;
pub mod pgm;

pub use dataset::{
    generate_dataset, labeled_subsets, load_dataset, sample_id, Dataset, DatasetManifest,
    ManifestRecord, Split, LABEL_RATIOS, MANIFEST,
};
pub use generate::{caption_variants, generate_sample, Sample, SampleSpec, IMAGE_SIZE};
