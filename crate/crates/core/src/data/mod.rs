//! Scenes, annotation I/O, augmentation and box statistics.

pub mod augment;
pub mod coco;
pub mod stats;
pub mod store;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::net::Tensor;

/// One image with its boxes. The image is `[1, 3, h, w]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.h()
    }

    pub fn width(&self) -> usize {
        self.image.w()
    }
}

/// Box annotations of one image without pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: usize,
    pub height: usize,
    pub file_name: String,
}

pub use augment::{augment, AugmentParams};
pub use coco::{load_coco_json, save_coco_json, CocoDataset};
pub use stats::{aspect_stats, AspectStats};
pub use synth::{gen_synthetic, SynthParams};
