//! Ground-truth encoders for both heads.
//!
//! Regression and offset maps store the x component in channel 0 and the y
//! component in channel 1, in units of the layer stride along that axis.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::lattice::{Lattice, Layer, LayerId};
use crate::net::Tensor;

/// Minimum IoU used to size center heatmap splats.
pub const CENTER_MIN_IOU: f64 = 0.7;
/// Minimum IoU used to size corner heatmap splats.
pub const CORNER_MIN_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeStats {
    /// `(box, layer)` pairs written.
    pub encoded: usize,
    /// Boxes that matched no layer.
    pub skipped: usize,
    /// Writes that landed on a cell already holding a regression target.
    pub collisions: usize,
}

impl EncodeStats {
    pub fn merge(&mut self, other: &EncodeStats) {
        self.encoded += other.encoded;
        self.skipped += other.skipped;
        self.collisions += other.collisions;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentersLayerTargets {
    pub id: LayerId,
    /// `[1, C, h, w]`.
    pub heat: Tensor,
    /// Cell center minus top-left corner, `[1, 2, h, w]`.
    pub tl_reg: Tensor,
    /// Cell center minus bottom-right corner, `[1, 2, h, w]`.
    pub br_reg: Tensor,
    /// `h * w`, true where a center was written.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentersTargets {
    pub layers: Vec<CentersLayerTargets>,
    pub stats: EncodeStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CornersLayerTargets {
    pub id: LayerId,
    pub tl_heat: Tensor,
    pub br_heat: Tensor,
    /// Sub-cell corner position, `corner / stride - (cell + 0.5)`.
    pub tl_off: Tensor,
    pub br_off: Tensor,
    /// Object center minus corner.
    pub tl_center_reg: Tensor,
    pub br_center_reg: Tensor,
    pub tl_mask: Vec<bool>,
    pub br_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CornersTargets {
    pub layers: Vec<CornersLayerTargets>,
    pub stats: EncodeStats,
}

/// Largest integer radius (in cells) such that moving the corners of a
/// `w x h` box by that amount keeps IoU with the original at `min_iou` or
/// above. Three displacements are considered: both corners shifted the same
/// way, both pulled inward, both pushed outward.
pub fn gaussian_radius(w: f64, h: f64, min_iou: f64) -> usize {
    let m = min_iou;
    let s = w + h;
    let p = w * h;

    // (1 + m)(w - r)(h - r) >= 2 m w h
    let r1 = (s - (s * s - 4.0 * p * (1.0 - m) / (1.0 + m)).max(0.0).sqrt()) / 2.0;
    // (w - 2r)(h - 2r) >= m w h
    let r2 = (s - (s * s - 4.0 * p * (1.0 - m)).max(0.0).sqrt()) / 4.0;
    // w h >= m (w + 2r)(h + 2r)
    let r3 = (-m * s + (m * m * s * s + 4.0 * m * (1.0 - m) * p).sqrt()) / (4.0 * m);

    let r = r1.min(r2).min(r3);
    if r.is_finite() && r > 0.0 {
        (r + 1e-9).floor() as usize
    } else {
        0
    }
}

/// Writes `max(existing, exp(-d^2 / 2 sigma^2))` into a `[h, w]` plane
/// around `(cy, cx)`, with `sigma = (2 radius + 1) / 6`.
pub fn draw_gaussian(plane: &mut [f64], hw: (usize, usize), cy: usize, cx: usize, radius: usize) {
    let (h, w) = hw;
    let r = radius as isize;
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let two_s2 = 2.0 * sigma * sigma;
    for dy in -r..=r {
        let y = cy as isize + dy;
        if y < 0 || y >= h as isize {
            continue;
        }
        for dx in -r..=r {
            let x = cx as isize + dx;
            if x < 0 || x >= w as isize {
                continue;
            }
            let v = if dx == 0 && dy == 0 {
                1.0
            } else {
                (-((dx * dx + dy * dy) as f64) / two_s2).exp()
            };
            let cell = &mut plane[y as usize * w + x as usize];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

fn check_boxes(boxes: &[BBox], num_classes: usize) -> Result<()> {
    for (i, b) in boxes.iter().enumerate() {
        if !b.is_valid() {
            return Err(Error::InvalidArgument(format!("box {i} is degenerate: {b:?}")));
        }
        if b.class_id >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "box {i} has class {} but only {num_classes} classes exist",
                b.class_id
            )));
        }
    }
    Ok(())
}

fn layer_shape(lattice: &Lattice, layer: &Layer, input_hw: (usize, usize)) -> (usize, usize) {
    let (ph, pw) = lattice.padded_size(input_hw.0, input_hw.1);
    layer.feature_shape(ph, pw)
}

/// Encodes boxes for the center-based head.
///
/// Every box is written into every layer whose relaxed ranges contain it.
/// Regression targets are measured from the center of the cell the object
/// snaps to, so decoding perfect targets reproduces the box exactly.
pub fn encode_centers(
    lattice: &Lattice,
    boxes: &[BBox],
    num_classes: usize,
    input_hw: (usize, usize),
) -> Result<CentersTargets> {
    check_boxes(boxes, num_classes)?;
    let mut layers: Vec<CentersLayerTargets> = lattice
        .layers()
        .iter()
        .map(|l| {
            let (h, w) = layer_shape(lattice, l, input_hw);
            CentersLayerTargets {
                id: l.id,
                heat: Tensor::zeros([1, num_classes, h, w]),
                tl_reg: Tensor::zeros([1, 2, h, w]),
                br_reg: Tensor::zeros([1, 2, h, w]),
                mask: vec![false; h * w],
            }
        })
        .collect();
    let mut stats = EncodeStats::default();

    for b in boxes {
        let assigned = lattice.assign(b);
        if assigned.is_empty() {
            stats.skipped += 1;
            continue;
        }
        for li in assigned {
            let layer = &lattice.layers()[li];
            let t = &mut layers[li];
            let hw = t.heat.hw();
            let (cy, cx) = layer.center_cell(b, hw);
            let (sw, sh) = (layer.stride_w as f64, layer.stride_h as f64);
            let radius = gaussian_radius(b.width() / sw, b.height() / sh, CENTER_MIN_IOU);
            draw_gaussian(t.heat.plane_mut(0, b.class_id), hw, cy, cx, radius);

            let (px, py) = layer.cell_center(cy, cx);
            let cell = cy * hw.1 + cx;
            if t.mask[cell] {
                stats.collisions += 1;
            }
            t.mask[cell] = true;
            t.tl_reg.set(0, 0, cy, cx, (px - b.x1) / sw);
            t.tl_reg.set(0, 1, cy, cx, (py - b.y1) / sh);
            t.br_reg.set(0, 0, cy, cx, (px - b.x2) / sw);
            t.br_reg.set(0, 1, cy, cx, (py - b.y2) / sh);
            stats.encoded += 1;
        }
    }
    Ok(CentersTargets { layers, stats })
}

/// Cell and sub-cell offset of a corner at pixel `(x, y)`.
pub fn corner_cell(layer: &Layer, x: f64, y: f64, hw: (usize, usize)) -> ((usize, usize), (f64, f64)) {
    let (cy, cx) = layer.cell_of(x, y, hw);
    let off_x = x / layer.stride_w as f64 - (cx as f64 + 0.5);
    let off_y = y / layer.stride_h as f64 - (cy as f64 + 0.5);
    ((cy, cx), (off_x, off_y))
}

/// Encodes boxes for the corner-based head.
pub fn encode_corners(
    lattice: &Lattice,
    boxes: &[BBox],
    num_classes: usize,
    input_hw: (usize, usize),
) -> Result<CornersTargets> {
    check_boxes(boxes, num_classes)?;
    let mut layers: Vec<CornersLayerTargets> = lattice
        .layers()
        .iter()
        .map(|l| {
            let (h, w) = layer_shape(lattice, l, input_hw);
            CornersLayerTargets {
                id: l.id,
                tl_heat: Tensor::zeros([1, num_classes, h, w]),
                br_heat: Tensor::zeros([1, num_classes, h, w]),
                tl_off: Tensor::zeros([1, 2, h, w]),
                br_off: Tensor::zeros([1, 2, h, w]),
                tl_center_reg: Tensor::zeros([1, 2, h, w]),
                br_center_reg: Tensor::zeros([1, 2, h, w]),
                tl_mask: vec![false; h * w],
                br_mask: vec![false; h * w],
            }
        })
        .collect();
    let mut stats = EncodeStats::default();

    for b in boxes {
        let assigned = lattice.assign(b);
        if assigned.is_empty() {
            stats.skipped += 1;
            continue;
        }
        let (bcx, bcy) = b.center();
        for li in assigned {
            let layer = &lattice.layers()[li];
            let t = &mut layers[li];
            let hw = t.tl_heat.hw();
            let (sw, sh) = (layer.stride_w as f64, layer.stride_h as f64);
            let radius = gaussian_radius(b.width() / sw, b.height() / sh, CORNER_MIN_IOU);

            let corners = [(b.x1, b.y1), (b.x2, b.y2)];
            for (k, &(x, y)) in corners.iter().enumerate() {
                let ((cy, cx), (ox, oy)) = corner_cell(layer, x, y, hw);
                let (heat, off, creg, mask) = if k == 0 {
                    (&mut t.tl_heat, &mut t.tl_off, &mut t.tl_center_reg, &mut t.tl_mask)
                } else {
                    (&mut t.br_heat, &mut t.br_off, &mut t.br_center_reg, &mut t.br_mask)
                };
                draw_gaussian(heat.plane_mut(0, b.class_id), hw, cy, cx, radius);
                let cell = cy * hw.1 + cx;
                if mask[cell] {
                    stats.collisions += 1;
                }
                mask[cell] = true;
                off.set(0, 0, cy, cx, ox);
                off.set(0, 1, cy, cx, oy);
                creg.set(0, 0, cy, cx, (bcx - x) / sw);
                creg.set(0, 1, cy, cx, (bcy - y) / sh);
            }
            stats.encoded += 1;
        }
    }
    Ok(CornersTargets { layers, stats })
}
