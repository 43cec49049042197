//! Image augmentation and cross-modal patch mixing.
//!
//! Weak views are geometric (random zoom), strong views add photometric
//! jitter and blur on top of the weak geometry, and T-PatchMix mixes two
//! unlabeled image-text pairs block-wise while keeping the caption in sync
//! with the pasted region.

mod geometry;
mod mixing;
mod photometric;

pub use geometry::{weak_augment, weak_augment_with, zoom, ZoomTransform};
pub use mixing::{
    label_to_region_cells, lesion_gate, mix_images, mix_pseudo_masks,
    sample_mask_position_constrained, sample_mask_probability_driven, tpatchmix, BlockMask,
    MixConfig, MixMode, MixOutcome, MixPair, DEFAULT_GATE_EPS,
};
pub use photometric::{
    apply_photometric, gaussian_blur, sample_photometric, strong_photometric, Jitter,
    PhotometricParams,
};

/// Parameters of the weak and strong image pipelines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub zoom_range: (f64, f64),
    pub jitter: Jitter,
    pub blur_sigma_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            zoom_range: (0.9, 1.1),
            jitter: Jitter::default(),
            blur_sigma_range: (0.1, 2.0),
        }
    }
}
