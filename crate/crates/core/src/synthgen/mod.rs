//! Procedural eye images with closed-set labels, corruptions, augmentation
//! and the on-disk dataset container.

mod augment;
mod corrupt;
mod dataset;
mod generate;
mod render;

pub use augment::{augment, augment_with, gamma_correct, AugmentParams};
pub use corrupt::{apply_corruption, motion_blur_taps, Corruption, CorruptionKind};
pub use dataset::{read_dataset, read_pgm, write_dataset, write_pgm, ManifestRecord};
pub use generate::{generate_dataset, generate_sample, generate_views, sample_id, GenSpec};
pub use render::{render_eye, Intensities, SceneParams};

use crate::detect::BBox;
use crate::labels::LabelMap;
use crate::tensor::Tensor;

pub const DEFAULT_FRAME_HEIGHT: usize = 120;
pub const DEFAULT_FRAME_WIDTH: usize = 160;

/// A grayscale frame with its label map and ground-truth eye box.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    /// `[H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
    pub gt_bbox: BBox,
    pub severity: f64,
    pub corruption: Option<CorruptionKind>,
    pub domain_id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    /// Rounds the image to the 8-bit grid used on disk.
    pub fn quantized(mut self) -> Self {
        for v in self.image.data_mut() {
            *v = quantize(*v) as f64 / 255.0;
        }
        self
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub const SOURCE_DOMAIN: &str = "source";
pub const SHIFTED_DOMAIN: &str = "shifted";
