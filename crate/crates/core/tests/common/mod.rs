//! Reference implementations used to cross-check the library.
#![allow(dead_code)]

use xnet::decode::{CornerCandidate, Detection};
use xnet::eval::{GroundTruth, ScoredBox};
use xnet::BBox;

pub const AREAS: [(f64, f64); 4] = [(0.0, 1e10), (0.0, 1024.0), (1024.0, 9216.0), (9216.0, 1e10)];

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let i = w * h;
    let u = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

struct Curve {
    /// (score, is_tp) for non-ignored detections.
    hits: Vec<(f64, bool)>,
    n_gt: usize,
}

fn curve(dets: &[ScoredBox], gts: &[GroundTruth], class: usize, area: (f64, f64), max_det: usize, thr: f64) -> Curve {
    let outside = |b: &BBox| {
        let a = (b.x2 - b.x1) * (b.y2 - b.y1);
        a < area.0 || a > area.1
    };
    let mut images: Vec<u64> = dets.iter().map(|d| d.image_id).chain(gts.iter().map(|g| g.image_id)).collect();
    images.sort_unstable();
    images.dedup();
    let mut hits = Vec::new();
    let mut n_gt = 0;
    for img in images {
        let mut g: Vec<(BBox, bool)> = gts
            .iter()
            .filter(|x| x.image_id == img && x.bbox.class_id == class)
            .map(|x| (x.bbox, outside(&x.bbox)))
            .collect();
        // non-ignored first, keeping file order inside each group
        let mut sorted: Vec<(BBox, bool)> = g.iter().filter(|x| !x.1).copied().collect();
        sorted.extend(g.iter().filter(|x| x.1).copied());
        g = sorted;
        n_gt += g.iter().filter(|x| !x.1).count();
        let mut d: Vec<&ScoredBox> = dets.iter().filter(|x| x.image_id == img && x.bbox.class_id == class).collect();
        d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        d.truncate(max_det);
        let mut taken = vec![false; g.len()];
        for det in d {
            let mut best: Option<usize> = None;
            let mut best_iou = thr.min(1.0 - 1e-10);
            for (j, (gb, ign)) in g.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                if let Some(b) = best {
                    if !g[b].1 && *ign {
                        break;
                    }
                }
                let o = overlap(&det.bbox, gb);
                if o < best_iou {
                    continue;
                }
                best_iou = o;
                best = Some(j);
            }
            match best {
                Some(j) => {
                    taken[j] = true;
                    if !g[j].1 {
                        hits.push((det.score, true));
                    }
                }
                None => {
                    if !outside(&det.bbox) {
                        hits.push((det.score, false));
                    }
                }
            }
        }
    }
    hits.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    Curve { hits, n_gt }
}

fn ap_of(c: &Curve) -> f64 {
    let n = c.hits.len();
    let mut rec = Vec::with_capacity(n);
    let mut prec = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0.0, 0.0);
    for &(_, t) in &c.hits {
        if t {
            tp += 1.0
        } else {
            fp += 1.0
        }
        rec.push(tp / c.n_gt as f64);
        prec.push(tp / (tp + fp));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        if let Some(i) = (0..n).find(|&i| rec[i] >= r) {
            total += prec[i..].iter().cloned().fold(0.0, f64::max);
        }
    }
    total / 101.0
}

fn recall_of(c: &Curve) -> f64 {
    c.hits.iter().filter(|h| h.1).count() as f64 / c.n_gt as f64
}

/// `[AP, AP50, AP75, APs, APm, APl, AR1, AR10, AR100, ARs, ARm, ARl]`,
/// -1 where undefined.
pub fn naive_coco(dets: &[ScoredBox], gts: &[GroundTruth], num_classes: usize) -> [f64; 12] {
    let thrs: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mean = |v: Vec<f64>| if v.is_empty() { -1.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let stat = |ap: bool, area: usize, max_det: usize, only: Option<f64>| {
        let mut vals = Vec::new();
        for &t in &thrs {
            if only.is_some_and(|o| (o - t).abs() > 1e-9) {
                continue;
            }
            for c in 0..num_classes {
                let cv = curve(dets, gts, c, AREAS[area], max_det, t);
                if cv.n_gt == 0 {
                    continue;
                }
                vals.push(if ap { ap_of(&cv) } else { recall_of(&cv) });
            }
        }
        mean(vals)
    };
    [
        stat(true, 0, 100, None),
        stat(true, 0, 100, Some(0.5)),
        stat(true, 0, 100, Some(0.75)),
        stat(true, 1, 100, None),
        stat(true, 2, 100, None),
        stat(true, 3, 100, None),
        stat(false, 0, 1, None),
        stat(false, 0, 10, None),
        stat(false, 0, 100, None),
        stat(false, 1, 100, None),
        stat(false, 2, 100, None),
        stat(false, 3, 100, None),
    ]
}

/// Every TL x BR pair tested directly against the 30% center rule.
pub fn brute_pairs(tls: &[CornerCandidate], brs: &[CornerCandidate], tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, t) in tls.iter().enumerate() {
        for (j, b) in brs.iter().enumerate() {
            if t.layer != b.layer || t.class_id != b.class_id || !(b.x > t.x && b.y > t.y) {
                continue;
            }
            let (mx, my) = ((t.x + b.x) / 2.0, (t.y + b.y) / 2.0);
            let (hx, hy) = ((b.x - t.x) / 2.0, (b.y - t.y) / 2.0);
            let ok = |cx: f64, cy: f64| (cx - mx).abs() <= tol * hx && (cy - my).abs() <= tol * hy;
            if ok(t.center_x, t.center_y) && ok(b.center_x, b.center_y) {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn pairs_to_boxes(tls: &[CornerCandidate], brs: &[CornerCandidate], pairs: &[(usize, usize)]) -> Vec<[f64; 6]> {
    let mut v: Vec<[f64; 6]> = pairs
        .iter()
        .map(|&(i, j)| [tls[i].x, tls[i].y, brs[j].x, brs[j].y, tls[i].class_id as f64, 0.5 * (tls[i].score + brs[j].score)])
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

pub fn dets_to_boxes(d: &[Detection]) -> Vec<[f64; 6]> {
    let mut v: Vec<[f64; 6]> =
        d.iter().map(|d| [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.bbox.class_id as f64, d.score]).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` at `x[i]`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Radius by direct search: the largest integer shift keeping all three
/// corner displacements at or above `m` IoU.
pub fn brute_radius(w: f64, h: f64, m: f64) -> usize {
    let ok = |r: f64| {
        let same = {
            let i = (w - r).max(0.0) * (h - r).max(0.0);
            i / (2.0 * w * h - i)
        };
        let inward = if 2.0 * r < w && 2.0 * r < h { (w - 2.0 * r) * (h - 2.0 * r) / (w * h) } else { 0.0 };
        let outward = w * h / ((w + 2.0 * r) * (h + 2.0 * r));
        same >= m - 1e-12 && inward >= m - 1e-12 && outward >= m - 1e-12
    };
    let mut r = 0;
    while ok((r + 1) as f64) {
        r += 1;
    }
    r
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xnet::lattice::LatticeSpec;
use xnet::losses::{focal_sum, focal_sum_logits, smooth_l1, LossWeights};
use xnet::net::ops::{conv2d, conv2d_backward, Conv2dGeom};
use xnet::net::{loss_and_grads, HeadKind, ModelConfig, Tensor, XNetModel};
use xnet::pipeline::encode;

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Max relative error of the focal-loss gradients (probability and logit forms).
pub fn focal_grad_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 64;
    let mut target = random_vec(&mut rng, n, 0.0, 1.0);
    for t in target.iter_mut().step_by(7) {
        *t = 1.0;
    }
    let mut worst = 0.0f64;
    let mut p = random_vec(&mut rng, n, 0.05, 0.95);
    let g = focal_sum(&p, &target, 2.0, 4.0).unwrap().grad;
    for i in 0..n {
        // the sum is separable, so each component is checked on its own term
        let y = [target[i]];
        let fd = central_diff(&mut p[i..=i], 0, 1e-5, |x| focal_sum(x, &y, 2.0, 4.0).unwrap().sum);
        worst = worst.max(rel_err(g[i], fd, 1e-6));
    }
    let mut z = random_vec(&mut rng, n, -6.0, 6.0);
    let g = focal_sum_logits(&z, &target, 2.0, 4.0).unwrap().grad;
    for i in 0..n {
        let y = [target[i]];
        let fd = central_diff(&mut z[i..=i], 0, 1e-5, |x| focal_sum_logits(x, &y, 2.0, 4.0).unwrap().sum);
        worst = worst.max(rel_err(g[i], fd, 1e-6));
    }
    worst
}

pub fn smooth_l1_grad_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 64;
    let target = random_vec(&mut rng, n, -2.0, 2.0);
    let mask: Vec<bool> = (0..n).map(|i| i % 5 != 0).collect();
    // keep every residual away from the |x| = delta kink
    let mut p: Vec<f64> = target
        .iter()
        .map(|t| {
            let r: f64 = rng.gen_range(0.05..0.9) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            t + if rng.gen_bool(0.5) { r } else { r * 3.0 }
        })
        .collect();
    let g = smooth_l1(&p, &target, &mask, 1.0).unwrap().1;
    let mut worst = 0.0f64;
    for i in 0..n {
        let fd = central_diff(&mut p, i, 1e-5, |x| smooth_l1(x, &target, &mask, 1.0).unwrap().0);
        worst = worst.max(rel_err(g[i], fd, 1e-6));
    }
    worst
}

/// Input, weight and bias gradients of a 3x3 conv with the given stride.
pub fn conv_grad_error(stride: (usize, usize)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13 + stride.0 as u64 * 7 + stride.1 as u64);
    let geom = Conv2dGeom::new(stride, (1, 1));
    let x = Tensor::from_vec([2, 3, 7, 8], random_vec(&mut rng, 2 * 3 * 56, -1.0, 1.0)).unwrap();
    let w = Tensor::from_vec([4, 3, 3, 3], random_vec(&mut rng, 4 * 27, -1.0, 1.0)).unwrap();
    let b = Tensor::from_vec([1, 4, 1, 1], random_vec(&mut rng, 4, -1.0, 1.0)).unwrap();
    let out = conv2d(&x, &w, Some(&b), geom).unwrap();
    let r = Tensor::from_vec(out.shape(), random_vec(&mut rng, out.len(), -1.0, 1.0)).unwrap();
    let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
        let o = conv2d(x, w, Some(b), geom).unwrap();
        o.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let g = conv2d_backward(&x, &w, &r, geom, true).unwrap();
    let gi = g.input.unwrap();
    let mut worst = 0.0f64;
    let mut xd = x.data().to_vec();
    for i in 0..xd.len() {
        let fd = central_diff(&mut xd, i, 1e-6, |v| loss(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap(), &w, &b));
        worst = worst.max(rel_err(gi.data()[i], fd, 1e-6));
    }
    let mut wd = w.data().to_vec();
    for i in 0..wd.len() {
        let fd = central_diff(&mut wd, i, 1e-6, |v| loss(&x, &Tensor::from_vec(w.shape(), v.to_vec()).unwrap(), &b));
        worst = worst.max(rel_err(g.weight.data()[i], fd, 1e-6));
    }
    let mut bd = b.data().to_vec();
    for i in 0..bd.len() {
        let fd = central_diff(&mut bd, i, 1e-6, |v| loss(&x, &w, &Tensor::from_vec(b.shape(), v.to_vec()).unwrap()));
        worst = worst.max(rel_err(g.bias.data()[i], fd, 1e-6));
    }
    worst
}

/// Tiny model on a 2x2 lattice; returns the worst relative error over a
/// sample of entries from every parameter tensor.
pub fn model_grad_error(head: HeadKind) -> f64 {
    let spec = LatticeSpec { rows: 2, cols: 2, ..LatticeSpec::default() };
    let mut cfg = ModelConfig::new(head, 2, spec);
    cfg.width = 4;
    cfg.head_width = 4;
    let mut model = XNetModel::new(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let image = Tensor::from_vec([1, 3, 32, 32], random_vec(&mut rng, 3 * 1024, 0.0, 1.0)).unwrap();
    let boxes = [BBox::new(2.0, 3.0, 30.0, 29.0, 0), BBox::new(1.0, 4.0, 31.0, 25.0, 1), BBox::new(6.0, 2.0, 27.0, 30.0, 1)];
    let targets = encode(model.lattice(), head, &boxes, 2, (32, 32)).unwrap();
    let w = LossWeights::default();
    let total = |m: &XNetModel| {
        let (outs, _) = m.forward(&image).unwrap();
        loss_and_grads(&outs, &targets, &w).unwrap().0.total
    };
    let (outs, cache) = model.forward(&image).unwrap();
    let (_, og) = loss_and_grads(&outs, &targets, &w).unwrap();
    let grads = model.backward(&cache, &og).unwrap();
    let mut worst = 0.0f64;
    for k in 0..grads.len() {
        let n = grads[k].len();
        for _ in 0..6.min(n) {
            let i = rng.gen_range(0..n);
            let orig = model.params()[k].value.data()[i];
            let h = 1e-6;
            model.params_mut()[k].value.data_mut()[i] = orig + h;
            let up = total(&model);
            model.params_mut()[k].value.data_mut()[i] = orig - h;
            let down = total(&model);
            model.params_mut()[k].value.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(grads[k].data()[i], fd, 1e-6));
        }
    }
    worst
}
