//! From per-layer head outputs to final detections.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::lattice::{Lattice, LayerId};
use crate::net::Tensor;
use crate::targets::{CentersTargets, CornersTargets};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub layer: Option<LayerId>,
}

impl Detection {
    pub fn class_id(&self) -> usize {
        self.bbox.class_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CornerKind {
    TopLeft,
    BottomRight,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerCandidate {
    pub kind: CornerKind,
    pub class_id: usize,
    pub score: f64,
    /// Refined corner position in pixels.
    pub x: f64,
    pub y: f64,
    /// Object center predicted from this corner, in pixels.
    pub center_x: f64,
    pub center_y: f64,
    pub layer: LayerId,
}

/// Per-layer output of the center head. Heatmaps hold probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CentersOutput {
    pub heat: Tensor,
    pub tl_reg: Tensor,
    pub br_reg: Tensor,
}

/// Per-layer output of the corner head. Heatmaps hold probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CornersOutput {
    pub tl_heat: Tensor,
    pub br_heat: Tensor,
    pub tl_off: Tensor,
    pub br_off: Tensor,
    pub tl_center_reg: Tensor,
    pub br_center_reg: Tensor,
}

impl CentersTargets {
    /// Targets viewed as a perfect network output.
    pub fn as_outputs(&self) -> Vec<CentersOutput> {
        self.layers
            .iter()
            .map(|l| CentersOutput { heat: l.heat.clone(), tl_reg: l.tl_reg.clone(), br_reg: l.br_reg.clone() })
            .collect()
    }
}

impl CornersTargets {
    pub fn as_outputs(&self) -> Vec<CornersOutput> {
        self.layers
            .iter()
            .map(|l| CornersOutput {
                tl_heat: l.tl_heat.clone(),
                br_heat: l.br_heat.clone(),
                tl_off: l.tl_off.clone(),
                br_off: l.br_off.clone(),
                tl_center_reg: l.tl_center_reg.clone(),
                br_center_reg: l.br_center_reg.clone(),
            })
            .collect()
    }
}

/// Cells of a `[1, C, h, w]` heatmap that equal their 3x3 neighbourhood
/// maximum and score above zero, best first, at most `k`. Returned as
/// `(score, class, y, x)`; ties resolve to the lower flat index.
pub fn top_peaks(heat: &Tensor, k: usize) -> Vec<(f64, usize, usize, usize)> {
    let [_, c, h, w] = heat.shape();
    let mut peaks = Vec::new();
    for ch in 0..c {
        let plane = heat.plane(0, ch);
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if v <= 0.0 {
                    continue;
                }
                let mut is_peak = true;
                'scan: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if plane[ny * w + nx] > v {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if is_peak {
                    peaks.push((v, ch, y, x));
                }
            }
        }
    }
    // Stable sort keeps channel-major flat order among equal scores.
    peaks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    peaks.truncate(k);
    peaks
}

fn check_layer_count(lattice: &Lattice, n: usize) -> Result<()> {
    if lattice.len() != n {
        return Err(Error::Shape(format!("{n} layer outputs for a {}-layer lattice", lattice.len())));
    }
    Ok(())
}

/// Decodes center-head outputs into boxes. Returns the detections and the
/// number of degenerate boxes dropped.
pub fn decode_centers(lattice: &Lattice, outputs: &[CentersOutput], k: usize) -> Result<(Vec<Detection>, usize)> {
    check_layer_count(lattice, outputs.len())?;
    let mut dets = Vec::new();
    let mut dropped = 0;
    for (layer, out) in lattice.layers().iter().zip(outputs) {
        let hw = out.heat.hw();
        if out.tl_reg.shape() != [1, 2, hw.0, hw.1] || out.br_reg.shape() != [1, 2, hw.0, hw.1] {
            return Err(Error::Shape(format!("regression maps of layer {} do not match its heatmap", layer.id)));
        }
        let (sw, sh) = (layer.stride_w as f64, layer.stride_h as f64);
        for (score, class, y, x) in top_peaks(&out.heat, k) {
            let (px, py) = layer.cell_center(y, x);
            let b = BBox::new(
                px - out.tl_reg.get(0, 0, y, x) * sw,
                py - out.tl_reg.get(0, 1, y, x) * sh,
                px - out.br_reg.get(0, 0, y, x) * sw,
                py - out.br_reg.get(0, 1, y, x) * sh,
                class,
            );
            if b.is_valid() {
                dets.push(Detection { bbox: b, score, layer: Some(layer.id) });
            } else {
                dropped += 1;
            }
        }
    }
    Ok((dets, dropped))
}

/// Extracts top-left and bottom-right corner candidates from every layer.
/// Positions are clamped to the `image_hw` rectangle.
pub fn decode_corners(
    lattice: &Lattice,
    outputs: &[CornersOutput],
    k: usize,
    image_hw: (usize, usize),
) -> Result<(Vec<CornerCandidate>, Vec<CornerCandidate>)> {
    check_layer_count(lattice, outputs.len())?;
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let mut tls = Vec::new();
    let mut brs = Vec::new();
    for (layer, out) in lattice.layers().iter().zip(outputs) {
        let (sw, sh) = (layer.stride_w as f64, layer.stride_h as f64);
        let sets = [
            (CornerKind::TopLeft, &out.tl_heat, &out.tl_off, &out.tl_center_reg),
            (CornerKind::BottomRight, &out.br_heat, &out.br_off, &out.br_center_reg),
        ];
        for (kind, heat, off, creg) in sets {
            let hw = heat.hw();
            if off.shape() != [1, 2, hw.0, hw.1] || creg.shape() != [1, 2, hw.0, hw.1] {
                return Err(Error::Shape(format!("corner maps of layer {} disagree in shape", layer.id)));
            }
            for (score, class, y, cx) in top_peaks(heat, k) {
                let px = ((cx as f64 + 0.5 + off.get(0, 0, y, cx)) * sw).clamp(0.0, iw);
                let py = ((y as f64 + 0.5 + off.get(0, 1, y, cx)) * sh).clamp(0.0, ih);
                let cand = CornerCandidate {
                    kind,
                    class_id: class,
                    score,
                    x: px,
                    y: py,
                    center_x: px + creg.get(0, 0, y, cx) * sw,
                    center_y: py + creg.get(0, 1, y, cx) * sh,
                    layer: layer.id,
                };
                match kind {
                    CornerKind::TopLeft => tls.push(cand),
                    CornerKind::BottomRight => brs.push(cand),
                }
            }
        }
    }
    Ok((tls, brs))
}

/// Relative center error of one corner against the box spanned by `tl`
/// and `br`: the larger per-axis deviation of its predicted center from the
/// midpoint, each normalized by the half-extent on that axis.
pub fn center_error(c: &CornerCandidate, tl: &CornerCandidate, br: &CornerCandidate) -> f64 {
    let (mx, my) = (0.5 * (tl.x + br.x), 0.5 * (tl.y + br.y));
    let (hx, hy) = (0.5 * (br.x - tl.x), 0.5 * (br.y - tl.y));
    let ex = (c.center_x - mx).abs() / hx;
    let ey = (c.center_y - my).abs() / hy;
    ex.max(ey)
}

/// Whether a TL/BR pair forms a box: same layer and class, positive extent,
/// and both corners' predicted centers within `tol` relative error.
pub fn pair_matches(tl: &CornerCandidate, br: &CornerCandidate, tol: f64) -> bool {
    tl.layer == br.layer
        && tl.class_id == br.class_id
        && tl.x < br.x
        && tl.y < br.y
        && center_error(tl, tl, br) <= tol
        && center_error(br, tl, br) <= tol
}

/// Pairs corners whose predicted centers agree with the pair midpoint.
/// A corner may appear in several detections; scoring is the mean of the
/// two corner scores.
pub fn match_corners(tls: &[CornerCandidate], brs: &[CornerCandidate], tol: f64) -> Vec<Detection> {
    let mut groups: BTreeMap<(LayerId, usize), Vec<&CornerCandidate>> = BTreeMap::new();
    for br in brs {
        groups.entry((br.layer, br.class_id)).or_default().push(br);
    }
    let mut dets = Vec::new();
    for tl in tls {
        let Some(cands) = groups.get(&(tl.layer, tl.class_id)) else {
            continue;
        };
        for br in cands {
            if pair_matches(tl, br, tol) {
                dets.push(Detection {
                    bbox: BBox::new(tl.x, tl.y, br.x, br.y, tl.class_id),
                    score: 0.5 * (tl.score + br.score),
                    layer: Some(tl.layer),
                });
            }
        }
    }
    dets
}

/// Maps detections from a horizontally flipped pass back to the original
/// frame and appends them to `dets`.
pub fn merge_flip(dets: Vec<Detection>, flipped: &[Detection], image_w: f64) -> Vec<Detection> {
    let mut out = dets;
    out.extend(flipped.iter().map(|d| Detection { bbox: d.bbox.flip_h(image_w), ..*d }));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SoftNmsMethod {
    Linear,
    Gaussian,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftNmsParams {
    pub sigma: f64,
    pub score_floor: f64,
    pub method: SoftNmsMethod,
    /// Overlap threshold for the linear and hard variants.
    pub iou_threshold: f64,
}

impl Default for SoftNmsParams {
    fn default() -> Self {
        Self { sigma: 0.5, score_floor: 0.001, method: SoftNmsMethod::Gaussian, iou_threshold: 0.3 }
    }
}

/// Per-class soft-NMS. Output is in selection order, so scores are
/// non-increasing.
pub fn soft_nms(dets: &[Detection], params: &SoftNmsParams) -> Vec<Detection> {
    let mut pool: Vec<Detection> = dets.iter().copied().filter(|d| d.score >= params.score_floor).collect();
    let mut kept = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            if pool[i].score > pool[best].score {
                best = i;
            }
        }
        let top = pool.remove(best);
        for d in pool.iter_mut() {
            if d.class_id() != top.class_id() {
                continue;
            }
            let ov = top.bbox.iou(&d.bbox);
            let decay = match params.method {
                SoftNmsMethod::Gaussian => (-(ov * ov) / params.sigma).exp(),
                SoftNmsMethod::Linear => {
                    if ov > params.iou_threshold {
                        1.0 - ov
                    } else {
                        1.0
                    }
                }
                SoftNmsMethod::Hard => {
                    if ov > params.iou_threshold {
                        0.0
                    } else {
                        1.0
                    }
                }
            };
            d.score *= decay;
        }
        pool.retain(|d| d.score >= params.score_floor);
        kept.push(top);
    }
    kept
}

/// The `n` best detections, score-descending with ties broken by
/// `(class_id, x1)`.
pub fn select_top(dets: &[Detection], n: usize) -> Vec<Detection> {
    let mut out = dets.to_vec();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.class_id().cmp(&b.class_id()))
            .then(a.bbox.x1.partial_cmp(&b.bbox.x1).unwrap_or(Ordering::Equal))
    });
    out.truncate(n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{encode_centers, encode_corners};

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, class: usize, score: f64) -> Detection {
        Detection { bbox: BBox::new(x1, y1, x2, y2, class), score, layer: None }
    }

    fn cand(kind: CornerKind, x: f64, y: f64, cx: f64, cy: f64) -> CornerCandidate {
        CornerCandidate {
            kind,
            class_id: 0,
            score: 1.0,
            x,
            y,
            center_x: cx,
            center_y: cy,
            layer: LayerId::new(1, 1),
        }
    }

    #[test]
    fn center_error_example() {
        let tl = cand(CornerKind::TopLeft, 10.0, 10.0, 31.0, 49.0);
        let br = cand(CornerKind::BottomRight, 50.0, 90.0, 30.0, 50.0);
        let (mx, my) = (30.0, 50.0);
        assert_eq!((mx - tl.center_x as f64).abs() / 20.0, 0.05);
        assert_eq!((my - tl.center_y as f64).abs() / 40.0, 0.025);
        assert_eq!(center_error(&tl, &tl, &br), 0.05);
        assert_eq!(center_error(&br, &tl, &br), 0.0);
        assert!(pair_matches(&tl, &br, 0.3));
        assert_eq!(match_corners(&[tl], &[br], 0.3).len(), 1);
    }

    #[test]
    fn inverted_pair_rejected() {
        let tl = cand(CornerKind::TopLeft, 50.0, 10.0, 30.0, 30.0);
        let br = cand(CornerKind::BottomRight, 10.0, 50.0, 30.0, 30.0);
        assert!(!pair_matches(&tl, &br, 0.3));
        let tl = cand(CornerKind::TopLeft, 10.0, 10.0, 10.0, 30.0);
        let br = cand(CornerKind::BottomRight, 10.0, 50.0, 10.0, 30.0);
        assert!(!pair_matches(&tl, &br, 0.3));
    }

    #[test]
    fn side_by_side_objects_do_not_cross_pair() {
        let a = (10.0, 10.0, 40.0, 40.0);
        let b = (50.0, 10.0, 80.0, 40.0);
        let mk = |r: (f64, f64, f64, f64)| {
            let (cx, cy) = (0.5 * (r.0 + r.2), 0.5 * (r.1 + r.3));
            (cand(CornerKind::TopLeft, r.0, r.1, cx, cy), cand(CornerKind::BottomRight, r.2, r.3, cx, cy))
        };
        let (ta, ba) = mk(a);
        let (tb, bb) = mk(b);
        let dets = match_corners(&[ta, tb], &[ba, bb], 0.3);
        assert_eq!(dets.len(), 2);
        assert!(!pair_matches(&ta, &bb, 0.3));
    }

    #[test]
    fn flip_merge() {
        let d = det(10.0, 0.0, 20.0, 10.0, 0, 0.5);
        let out = merge_flip(vec![], &[d], 100.0);
        assert_eq!(out[0].bbox, BBox::new(80.0, 0.0, 90.0, 10.0, 0));
        assert_eq!(merge_flip(vec![d], &[], 100.0), vec![d]);
        let sym = det(40.0, 0.0, 60.0, 10.0, 0, 0.5);
        assert_eq!(merge_flip(vec![], &[sym], 100.0)[0].bbox, sym.bbox);
    }

    #[test]
    fn soft_nms_identical_boxes() {
        let p = SoftNmsParams::default();
        let out = soft_nms(&[det(0.0, 0.0, 10.0, 10.0, 0, 0.9), det(0.0, 0.0, 10.0, 10.0, 0, 0.8)], &p);
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.8 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((out[1].score - 0.1083).abs() < 1e-4);
    }

    #[test]
    fn soft_nms_leaves_disjoint_and_other_classes() {
        let p = SoftNmsParams::default();
        let out = soft_nms(&[det(0.0, 0.0, 10.0, 10.0, 0, 0.9), det(20.0, 0.0, 30.0, 10.0, 0, 0.8)], &p);
        assert_eq!(out[1].score, 0.8);
        let out = soft_nms(&[det(0.0, 0.0, 10.0, 10.0, 0, 0.9), det(0.0, 0.0, 10.0, 10.0, 1, 0.8)], &p);
        assert_eq!(out[1].score, 0.8);
    }

    #[test]
    fn soft_nms_small_sigma_acts_like_hard_nms() {
        let p = SoftNmsParams { sigma: 1e-6, ..Default::default() };
        let out = soft_nms(&[det(0.0, 0.0, 10.0, 10.0, 0, 0.9), det(5.0, 0.0, 15.0, 10.0, 0, 0.8)], &p);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn select_top_orders_and_truncates() {
        let dets: Vec<_> = (0..150).map(|i| det(i as f64, 0.0, i as f64 + 5.0, 5.0, 0, i as f64 / 150.0)).collect();
        let top = select_top(&dets, 100);
        assert_eq!(top.len(), 100);
        assert_eq!(top[0].score, 149.0 / 150.0);
        assert!(top.iter().all(|d| d.score >= 50.0 / 150.0));
        assert_eq!(select_top(&dets[..3], 100).len(), 3);

        let tied = [det(5.0, 0.0, 9.0, 4.0, 1, 0.5), det(3.0, 0.0, 9.0, 4.0, 1, 0.5), det(7.0, 0.0, 9.0, 4.0, 0, 0.5)];
        let order: Vec<_> = select_top(&tied, 10).iter().map(|d| (d.class_id(), d.bbox.x1)).collect();
        assert_eq!(order, vec![(0, 7.0), (1, 3.0), (1, 5.0)]);
    }

    #[test]
    fn empty_heatmaps_give_nothing() {
        let lat = Lattice::preset("xnet19").unwrap();
        let t = encode_centers(&lat, &[], 2, (128, 128)).unwrap();
        let (dets, dropped) = decode_centers(&lat, &t.as_outputs(), 100).unwrap();
        assert!(dets.is_empty());
        assert_eq!(dropped, 0);
    }

    #[test]
    fn single_peak_decodes_to_regressed_box() {
        let lat = Lattice::preset("fpn5").unwrap();
        let t = encode_centers(&lat, &[], 1, (128, 128)).unwrap();
        let mut outs = t.as_outputs();
        outs[0].heat.set(0, 0, 4, 5, 0.7);
        outs[0].tl_reg.set(0, 0, 4, 5, 2.0);
        outs[0].tl_reg.set(0, 1, 4, 5, 1.5);
        outs[0].br_reg.set(0, 0, 4, 5, -2.0);
        outs[0].br_reg.set(0, 1, 4, 5, -1.5);
        let (dets, _) = decode_centers(&lat, &outs, 100).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].score, 0.7);
        // cell (4,5) centered at (44, 36).
        assert_eq!(dets[0].bbox, BBox::new(28.0, 24.0, 60.0, 48.0, 0));
    }

    #[test]
    fn perfect_center_targets_roundtrip() {
        let lat = Lattice::preset("xnet19").unwrap();
        let boxes = [BBox::new(3.0, 5.0, 40.0, 33.0, 0), BBox::new(60.0, 20.0, 125.0, 50.0, 1)];
        let t = encode_centers(&lat, &boxes, 2, (128, 128)).unwrap();
        let (dets, dropped) = decode_centers(&lat, &t.as_outputs(), 100).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(dets.len(), t.stats.encoded);
        for d in &dets {
            let best = boxes.iter().map(|b| b.iou(&d.bbox)).fold(0.0, f64::max);
            assert!(best > 1.0 - 1e-9);
        }
    }

    #[test]
    fn k_larger_than_cells_saturates() {
        let lat = Lattice::preset("fpn5").unwrap();
        let mut t = encode_corners(&lat, &[], 1, (128, 128)).unwrap();
        for l in &mut t.layers {
            l.tl_heat.fill(0.5);
            l.br_heat.fill(0.5);
        }
        let (tls, brs) = decode_corners(&lat, &t.as_outputs(), 10_000, (128, 128)).unwrap();
        let cells: usize = t.layers.iter().map(|l| l.tl_mask.len()).sum();
        assert_eq!(tls.len(), cells);
        assert_eq!(brs.len(), cells);
    }
}
