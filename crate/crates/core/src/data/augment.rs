//! Scale jitter and fixed-size random crops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::net::ops::resize_bilinear;
use crate::net::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Uniform scale range.
    pub jitter: (f64, f64),
    /// Output `(h, w)`.
    pub crop: (usize, usize),
    /// Boxes keeping less than this fraction of their scaled area are dropped.
    pub min_area_frac: f64,
}

impl AugmentParams {
    pub fn new(jitter: (f64, f64), crop: usize) -> Self {
        Self { jitter, crop: (crop, crop), min_area_frac: 0.25 }
    }
}

/// Rescales by `scale` and crops a `crop` window whose top-left corner sits
/// at `offset` in the rescaled (and bottom/right zero-padded) image.
pub fn scale_and_crop(scene: &Scene, scale: f64, crop: (usize, usize), offset: (usize, usize), min_area_frac: f64) -> Result<Scene> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale {scale} must be positive")));
    }
    let (h, w) = (scene.height(), scene.width());
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let (sy, sx) = (nh as f64 / h as f64, nw as f64 / w as f64);
    let scaled = if (nh, nw) == (h, w) { scene.image.clone() } else { resize_bilinear(&scene.image, nh, nw)? };
    let canvas = scaled.pad_to(nh.max(crop.0), nw.max(crop.1));
    let (oy, ox) = offset;
    if oy + crop.0 > canvas.h() || ox + crop.1 > canvas.w() {
        return Err(Error::InvalidArgument(format!("crop offset {offset:?} leaves the image")));
    }
    let mut img = Tensor::zeros([1, canvas.c(), crop.0, crop.1]);
    for c in 0..canvas.c() {
        let src = canvas.plane(0, c);
        let dst = img.plane_mut(0, c);
        for y in 0..crop.0 {
            let s = (y + oy) * canvas.w() + ox;
            dst[y * crop.1..(y + 1) * crop.1].copy_from_slice(&src[s..s + crop.1]);
        }
    }
    let boxes = scene
        .boxes
        .iter()
        .filter_map(|b| {
            let scaled = BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy, b.class_id);
            let moved = scaled.translate(-(ox as f64), -(oy as f64));
            let clipped = moved.clip(crop.1 as f64, crop.0 as f64);
            (clipped.is_valid() && clipped.area() >= min_area_frac * scaled.area()).then_some(clipped)
        })
        .collect();
    Ok(Scene { image_id: scene.image_id, image: img, boxes })
}

/// Random scale in `jitter`, then a random crop (padding when the scaled
/// image is smaller than the crop).
pub fn augment(scene: &Scene, params: &AugmentParams, rng: &mut impl Rng) -> Result<Scene> {
    let (lo, hi) = params.jitter;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::InvalidArgument(format!("jitter range [{lo}, {hi}] is invalid")));
    }
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let nh = ((scene.height() as f64 * scale).round() as usize).max(1);
    let nw = ((scene.width() as f64 * scale).round() as usize).max(1);
    let oy = rng.gen_range(0..=nh.saturating_sub(params.crop.0));
    let ox = rng.gen_range(0..=nw.saturating_sub(params.crop.1));
    scale_and_crop(scene, scale, params.crop, (oy, ox), params.min_area_frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_scene, SynthParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> Scene {
        gen_scene(&SynthParams::default(), 3)
    }

    #[test]
    fn unit_jitter_full_crop_is_identity() {
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&s, &AugmentParams::new((1.0, 1.0), 128), &mut rng).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn half_scale_halves_boxes() {
        let mut s = scene();
        s.boxes = vec![BBox::new(20.0, 40.0, 100.0, 90.0, 0)];
        let out = scale_and_crop(&s, 0.5, (64, 64), (0, 0), 0.25).unwrap();
        assert_eq!(out.boxes, vec![BBox::new(10.0, 20.0, 50.0, 45.0, 0)]);
        assert_eq!(out.image.hw(), (64, 64));
    }

    #[test]
    fn crop_drops_mostly_hidden_boxes() {
        let mut s = scene();
        s.boxes = vec![BBox::new(0.0, 0.0, 40.0, 40.0, 0), BBox::new(60.0, 60.0, 100.0, 100.0, 1)];
        // Window [35, 99) keeps 5/40 of the first box's width: dropped.
        let out = scale_and_crop(&s, 1.0, (64, 64), (35, 35), 0.25).unwrap();
        assert_eq!(out.boxes, vec![BBox::new(25.0, 25.0, 64.0, 64.0, 1)]);
    }

    #[test]
    fn same_seed_same_stream() {
        let s = scene();
        let p = AugmentParams::new((0.6, 1.5), 128);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..4).map(|_| augment(&s, &p, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
    }
}
