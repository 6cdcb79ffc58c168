//! COCO-style box metrics: AP over IoU thresholds .50:.05:.95 with 101-point
//! interpolation, area-split AP, and AR at detection budgets.
//!
//! Follows the reference protocol: per image and class, detections are
//! matched greedily in score order, each ground truth at most once;
//! ground truths outside the active area range are ignored, as are
//! unmatched detections outside it. Crowd regions are not supported.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub recall_thresholds: Vec<f64>,
    /// Ascending; the last entry bounds matching.
    pub max_dets: Vec<usize>,
    /// The first range must be the unrestricted one.
    pub area_ranges: Vec<AreaRange>,
}

impl Default for EvalParams {
    fn default() -> Self {
        let area = |name: &str, lo: f64, hi: f64| AreaRange { name: name.into(), lo, hi };
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            recall_thresholds: (0..=100).map(|i| i as f64 / 100.0).collect(),
            max_dets: vec![1, 10, 100],
            area_ranges: vec![
                area("all", 0.0, 1e10),
                area("small", 0.0, 32.0 * 32.0),
                area("medium", 32.0 * 32.0, 96.0 * 96.0),
                area("large", 96.0 * 96.0, 1e10),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub num_gt: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Unavailable metrics (no ground truth) are `-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub ar_1: f64,
    pub ar_10: f64,
    pub ar_100: f64,
    pub ar_small: f64,
    pub ar_medium: f64,
    pub ar_large: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class_id,num_gt,ap,ap50,ap75\n");
        for c in &self.per_class {
            let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6}", c.class_id, c.num_gt, c.ap, c.ap50, c.ap75);
        }
        out
    }
}

/// Matching outcome for one (image, class, area range).
struct ImageEval {
    /// Scores of the kept detections, best first.
    scores: Vec<f64>,
    /// `[threshold][det]`: matched a non-ignored or ignored ground truth.
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    num_gt: usize,
}

fn in_range(area: f64, r: &AreaRange) -> bool {
    area >= r.lo && area <= r.hi
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

fn evaluate_image(gts: &[BBox], dets: &[(BBox, f64)], range: &AreaRange, params: &EvalParams) -> ImageEval {
    let max_det = *params.max_dets.last().unwrap_or(&100);
    // Non-ignored ground truths first, stable.
    let mut g: Vec<(BBox, bool)> = gts.iter().map(|b| (*b, !in_range(b.area(), range))).collect();
    g.sort_by_key(|&(_, ig)| ig);
    let mut d: Vec<(BBox, f64)> = dets.to_vec();
    d.sort_by(|a, b| by_score_desc(a.1, b.1));
    d.truncate(max_det);

    let t_count = params.iou_thresholds.len();
    let mut matched = vec![vec![false; d.len()]; t_count];
    let mut ignored = vec![vec![false; d.len()]; t_count];
    for (ti, &t) in params.iou_thresholds.iter().enumerate() {
        let mut gt_taken = vec![false; g.len()];
        for (di, (db, _)) in d.iter().enumerate() {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for (gi, (gb, gig)) in g.iter().enumerate() {
                if gt_taken[gi] {
                    continue;
                }
                if let Some(mi) = m {
                    if !g[mi].1 && *gig {
                        break;
                    }
                }
                let ov = db.iou(gb);
                if ov < best {
                    continue;
                }
                best = ov;
                m = Some(gi);
            }
            match m {
                Some(mi) => {
                    gt_taken[mi] = true;
                    matched[ti][di] = true;
                    ignored[ti][di] = g[mi].1;
                }
                None => ignored[ti][di] = !in_range(db.area(), range),
            }
        }
    }
    ImageEval {
        scores: d.iter().map(|x| x.1).collect(),
        matched,
        ignored,
        num_gt: g.iter().filter(|x| !x.1).count(),
    }
}

/// `(precision[recall_thresholds], final recall)` or `None` without ground truth.
fn accumulate(evals: &[&ImageEval], t: usize, max_det: usize, rec_thr: &[f64]) -> Option<(Vec<f64>, f64)> {
    let npig: usize = evals.iter().map(|e| e.num_gt).sum();
    if npig == 0 {
        return None;
    }
    let mut rows: Vec<(f64, bool, bool)> = Vec::new();
    for e in evals {
        let k = e.scores.len().min(max_det);
        for i in 0..k {
            rows.push((e.scores[i], e.matched[t][i], e.ignored[t][i]));
        }
    }
    rows.sort_by(|a, b| by_score_desc(a.0, b.0));
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut rc = Vec::new();
    let mut pr = Vec::new();
    for &(_, m, ig) in &rows {
        if ig {
            // Ignored detections still occupy a slot in the cumulative sums.
        } else if m {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        rc.push(tp / npig as f64);
        pr.push(if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 });
    }
    let recall = rc.last().copied().unwrap_or(0.0);
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    let mut q = vec![0.0; rec_thr.len()];
    for (ri, &r) in rec_thr.iter().enumerate() {
        // First index with rc >= r.
        let pi = rc.partition_point(|&x| x < r);
        if pi < pr.len() {
            q[ri] = pr[pi];
        }
    }
    Some((q, recall))
}

fn mean_defined(v: &[f64]) -> f64 {
    let d: Vec<f64> = v.iter().copied().filter(|&x| x > -1.0).collect();
    if d.is_empty() {
        -1.0
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    }
}

pub fn evaluate(dets: &[ScoredBox], gts: &[GroundTruth], params: &EvalParams) -> MetricReport {
    let mut classes = BTreeSet::new();
    let mut images = BTreeSet::new();
    let mut gt_map: BTreeMap<(u64, usize), Vec<BBox>> = BTreeMap::new();
    let mut dt_map: BTreeMap<(u64, usize), Vec<(BBox, f64)>> = BTreeMap::new();
    for g in gts {
        classes.insert(g.bbox.class_id);
        images.insert(g.image_id);
        gt_map.entry((g.image_id, g.bbox.class_id)).or_default().push(g.bbox);
    }
    for d in dets {
        classes.insert(d.bbox.class_id);
        images.insert(d.image_id);
        dt_map.entry((d.image_id, d.bbox.class_id)).or_default().push((d.bbox, d.score));
    }

    let t_count = params.iou_thresholds.len();
    let empty_g: Vec<BBox> = Vec::new();
    let empty_d: Vec<(BBox, f64)> = Vec::new();
    // [class][area][max_det][threshold] -> Option<(precision, recall)>
    let mut table: Vec<Vec<Vec<Vec<Option<(Vec<f64>, f64)>>>>> = Vec::new();
    for &c in &classes {
        let mut per_area = Vec::new();
        for range in &params.area_ranges {
            let evals: Vec<ImageEval> = images
                .iter()
                .filter(|&&img| gt_map.contains_key(&(img, c)) || dt_map.contains_key(&(img, c)))
                .map(|&img| {
                    let g = gt_map.get(&(img, c)).unwrap_or(&empty_g);
                    let d = dt_map.get(&(img, c)).unwrap_or(&empty_d);
                    evaluate_image(g, d, range, params)
                })
                .collect();
            let refs: Vec<&ImageEval> = evals.iter().collect();
            let per_md = params
                .max_dets
                .iter()
                .map(|&md| (0..t_count).map(|t| accumulate(&refs, t, md, &params.recall_thresholds)).collect())
                .collect();
            per_area.push(per_md);
        }
        table.push(per_area);
    }

    let last_md = params.max_dets.len().saturating_sub(1);
    let ap_of = |area: usize, thr: Option<usize>, class: Option<usize>| -> f64 {
        let mut vals = Vec::new();
        for (ci, per_area) in table.iter().enumerate() {
            if class.is_some_and(|c| c != ci) {
                continue;
            }
            for t in 0..t_count {
                if thr.is_some_and(|x| x != t) {
                    continue;
                }
                match &per_area[area][last_md][t] {
                    Some((q, _)) => vals.extend_from_slice(q),
                    None => vals.extend(std::iter::repeat(-1.0).take(params.recall_thresholds.len())),
                }
            }
        }
        mean_defined(&vals)
    };
    let ar_of = |area: usize, md: usize| -> f64 {
        let mut vals = Vec::new();
        for per_area in &table {
            for t in 0..t_count {
                vals.push(per_area[area][md][t].as_ref().map_or(-1.0, |x| x.1));
            }
        }
        mean_defined(&vals)
    };
    let thr_index = |v: f64| params.iou_thresholds.iter().position(|&t| (t - v).abs() < 1e-9);
    let area_index = |name: &str| params.area_ranges.iter().position(|a| a.name == name);
    let ap_at = |v: f64, class: Option<usize>| thr_index(v).map_or(-1.0, |t| ap_of(0, Some(t), class));
    let ap_area = |name: &str| area_index(name).map_or(-1.0, |a| ap_of(a, None, None));
    let ar_area = |name: &str| area_index(name).map_or(-1.0, |a| ar_of(a, last_md));
    let ar_md = |n: usize| params.max_dets.iter().position(|&m| m == n).map_or(-1.0, |m| ar_of(0, m));

    let per_class = classes
        .iter()
        .enumerate()
        .map(|(ci, &c)| ClassMetrics {
            class_id: c,
            num_gt: gts.iter().filter(|g| g.bbox.class_id == c).count(),
            ap: ap_of(0, None, Some(ci)),
            ap50: ap_at(0.5, Some(ci)),
            ap75: ap_at(0.75, Some(ci)),
        })
        .collect();

    MetricReport {
        ap: ap_of(0, None, None),
        ap50: ap_at(0.5, None),
        ap75: ap_at(0.75, None),
        ap_small: ap_area("small"),
        ap_medium: ap_area("medium"),
        ap_large: ap_area("large"),
        ar_1: ar_md(1),
        ar_10: ar_md(10),
        ar_100: ar_md(100),
        ar_small: ar_area("small"),
        ar_medium: ar_area("medium"),
        ar_large: ar_area("large"),
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(img: u64, b: BBox) -> GroundTruth {
        GroundTruth { image_id: img, bbox: b }
    }

    fn dt(img: u64, b: BBox, s: f64) -> ScoredBox {
        ScoredBox { image_id: img, bbox: b, score: s }
    }

    #[test]
    fn perfect_detection() {
        let b = BBox::new(10.0, 10.0, 50.0, 60.0, 0);
        let r = evaluate(&[dt(1, b, 0.9)], &[gt(1, b)], &EvalParams::default());
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ar_100, 1.0);
        assert_eq!(r.ap_medium, 1.0);
        assert_eq!(r.ap_small, -1.0);
    }

    #[test]
    fn threshold_gate() {
        let g = BBox::new(0.0, 0.0, 100.0, 100.0, 0);
        // IoU = 60*100 / 10000 = 0.6
        let d = BBox::new(0.0, 0.0, 60.0, 100.0, 0);
        assert!((g.iou(&d) - 0.6).abs() < 1e-12);
        let r = evaluate(&[dt(1, d, 0.9)], &[gt(1, g)], &EvalParams::default());
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 0.0);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let g = BBox::new(0.0, 0.0, 40.0, 40.0, 0);
        let other = BBox::new(100.0, 100.0, 140.0, 140.0, 0);
        let gts = [gt(1, g), gt(1, other)];
        let single = evaluate(&[dt(1, g, 0.9), dt(1, other, 0.5)], &gts, &EvalParams::default());
        let dup = evaluate(&[dt(1, g, 0.9), dt(1, g, 0.8), dt(1, other, 0.5)], &gts, &EvalParams::default());
        assert_eq!(single.ap50, 1.0);
        assert!(dup.ap50 < 1.0);
    }

    #[test]
    fn no_ground_truth_is_undefined() {
        let r = evaluate(&[dt(1, BBox::new(0.0, 0.0, 5.0, 5.0, 0), 0.5)], &[], &EvalParams::default());
        assert_eq!(r.ap, -1.0);
        assert_eq!(r.ar_100, -1.0);
    }

    #[test]
    fn per_class_csv_lists_classes() {
        let a = BBox::new(0.0, 0.0, 40.0, 40.0, 0);
        let b = BBox::new(0.0, 0.0, 40.0, 40.0, 1);
        let r = evaluate(&[dt(1, a, 0.9)], &[gt(1, a), gt(1, b)], &EvalParams::default());
        assert_eq!(r.per_class.len(), 2);
        assert_eq!(r.per_class[1].ap, 0.0);
        assert_eq!(r.ap, 0.5);
        assert_eq!(r.per_class_csv().lines().count(), 3);
    }
}
