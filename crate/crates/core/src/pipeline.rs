//! Training loop, test-time detection and evaluation on synthetic scenes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::config::RunConfig;
use crate::data::synth::gen_scene;
use crate::data::{augment, AugmentParams, Scene, SynthParams};
use crate::decode::{decode_centers, decode_corners, match_corners, merge_flip, select_top, soft_nms, Detection};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalParams, GroundTruth, MetricReport, ScoredBox};
use crate::lattice::Lattice;
use crate::net::adam::AdamConfig;
use crate::net::ops::resize_bilinear;
use crate::net::{loss_and_grads, Adam, HeadKind, ModelConfig, Targets, Tensor, XNetModel};
use crate::targets::{encode_centers, encode_corners, EncodeStats};

/// Held-out scenes come from a stream disjoint from training.
pub const HELDOUT_SEED_OFFSET: u64 = 0x5eed_0001;
pub const HELDOUT_FIRST_ID: u64 = 1_000_000;

pub fn model_config(cfg: &RunConfig) -> Result<ModelConfig> {
    let mut m = ModelConfig::new(cfg.head, cfg.num_classes, cfg.lattice_spec()?);
    m.width = cfg.width;
    m.head_width = cfg.head_width;
    Ok(m)
}

pub fn synth_params(cfg: &RunConfig, seed: u64, n_images: usize, first_id: u64) -> SynthParams {
    SynthParams {
        seed,
        n_images,
        size: cfg.image_size,
        n_obj: (cfg.n_obj_min, cfg.n_obj_max),
        aspect: (cfg.aspect_lo, cfg.aspect_hi),
        num_classes: cfg.num_classes,
        first_id,
        ..SynthParams::default()
    }
}

pub fn heldout_scenes(cfg: &RunConfig, n: usize) -> Result<Vec<Scene>> {
    let p = synth_params(cfg, cfg.seed.wrapping_add(HELDOUT_SEED_OFFSET), n, HELDOUT_FIRST_ID);
    crate::data::gen_synthetic(&p)
}

pub fn encode(lattice: &Lattice, head: HeadKind, boxes: &[BBox], num_classes: usize, hw: (usize, usize)) -> Result<Targets> {
    Ok(match head {
        HeadKind::Centers => Targets::Centers(encode_centers(lattice, boxes, num_classes, hw)?),
        HeadKind::Corners => Targets::Corners(encode_corners(lattice, boxes, num_classes, hw)?),
    })
}

fn target_stats(t: &Targets) -> EncodeStats {
    match t {
        Targets::Centers(c) => c.stats,
        Targets::Corners(c) => c.stats,
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
    pub heat_losses: Vec<f64>,
    pub reg_losses: Vec<f64>,
    pub encode: EncodeStats,
    pub seconds: f64,
}

impl TrainReport {
    /// Mean loss over the first and last `window` iterations.
    pub fn head_tail(&self, window: usize) -> (f64, f64) {
        let n = self.losses.len();
        let w = window.clamp(1, n.max(1));
        let mean = |s: &[f64]| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
        (mean(&self.losses[..w.min(n)]), mean(&self.losses[n.saturating_sub(w)..]))
    }
}

/// One optimizer step over `batch`: per-image forward/backward in
/// parallel, gradients summed in batch order and averaged.
pub fn train_step(
    model: &mut XNetModel,
    adam: &mut Adam,
    batch: &[Scene],
    cfg: &RunConfig,
) -> Result<(f64, f64, f64, EncodeStats)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let weights = cfg.loss_weights();
    let m: &XNetModel = model;
    let results: Vec<Result<_>> = batch
        .par_iter()
        .map(|s| {
            let (outs, cache) = m.forward(&s.image)?;
            let t = encode(m.lattice(), cfg.head, &s.boxes, cfg.num_classes, s.image.hw())?;
            let (rep, g) = loss_and_grads(&outs, &t, &weights)?;
            let grads = m.backward(&cache, &g)?;
            Ok((rep, grads, target_stats(&t)))
        })
        .collect();
    let mut sum: Option<Vec<Tensor>> = None;
    let (mut loss, mut heat, mut reg) = (0.0, 0.0, 0.0);
    let mut stats = EncodeStats::default();
    for r in results {
        let (rep, grads, st) = r?;
        loss += rep.total;
        heat += rep.heat_loss;
        reg += rep.reg_loss;
        stats.merge(&st);
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let n = batch.len() as f64;
    let mut grads = sum.expect("non-empty batch");
    for g in &mut grads {
        g.scale(1.0 / n);
        if !g.all_finite() {
            return Err(Error::NonFinite("gradient"));
        }
    }
    adam.step(model.params_mut(), &grads);
    Ok((loss / n, heat / n, reg / n, stats))
}

/// Trains `model` for `cfg.iters` iterations on scenes produced by
/// `source(index)`. Augmentation draws from a per-scene random stream so
/// the run does not depend on the thread count.
pub fn train_with<F>(
    model: &mut XNetModel,
    cfg: &RunConfig,
    source: F,
    mut on_iter: impl FnMut(usize, f64),
) -> Result<TrainReport>
where
    F: Fn(u64) -> Result<Scene> + Sync,
{
    cfg.validate()?;
    let start = std::time::Instant::now();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, model.params());
    let aug = AugmentParams::new((cfg.jitter_lo, cfg.jitter_hi), cfg.crop);
    let mut report = TrainReport::default();
    for it in 0..cfg.iters {
        if it == cfg.lr_drop_iter && it > 0 {
            adam.set_lr(cfg.lr * cfg.lr_drop_factor);
        }
        let batch: Vec<Scene> = (0..cfg.batch)
            .into_par_iter()
            .map(|j| {
                let idx = (it * cfg.batch + j) as u64;
                let scene = source(idx)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa076_1d64_78bd_642f);
                rng.set_stream(idx);
                augment(&scene, &aug, &mut rng)
            })
            .collect::<Result<_>>()?;
        let (loss, heat, reg, stats) = train_step(model, &mut adam, &batch, cfg)?;
        report.losses.push(loss);
        report.heat_losses.push(heat);
        report.reg_losses.push(reg);
        report.encode.merge(&stats);
        on_iter(it, loss);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Trains a fresh model on an endless synthetic stream.
pub fn train_synthetic(cfg: &RunConfig, on_iter: impl FnMut(usize, f64)) -> Result<(XNetModel, TrainReport)> {
    let mut model = XNetModel::new(model_config(cfg)?, cfg.seed)?;
    let p = synth_params(cfg, cfg.seed, 0, 0);
    p.validate()?;
    let report = train_with(&mut model, cfg, |i| Ok(gen_scene(&p, i)), on_iter)?;
    Ok((model, report))
}

/// Decodes a single-image forward pass into candidate detections in the
/// coordinates of the (possibly padded) network input.
fn decode_pass(model: &XNetModel, image: &Tensor, cfg: &RunConfig) -> Result<Vec<Detection>> {
    let (outs, _) = model.forward(image)?;
    match model.config().head {
        HeadKind::Centers => {
            let o = model.centers_outputs(&outs, 0);
            Ok(decode_centers(model.lattice(), &o, cfg.k_centers)?.0)
        }
        HeadKind::Corners => {
            let o = model.corners_outputs(&outs, 0);
            let (tls, brs) = decode_corners(model.lattice(), &o, cfg.k_corners, image.hw())?;
            Ok(match_corners(&tls, &brs, cfg.match_tol))
        }
    }
}

/// Full test-time pipeline for one `[1, 3, h, w]` image. Boxes are returned
/// in the image's own pixel coordinates.
pub fn detect(model: &XNetModel, image: &Tensor, cfg: &RunConfig) -> Result<Vec<Detection>> {
    if image.n() != 1 {
        return Err(Error::Shape(format!("detect expects one image, got {}", image.n())));
    }
    let (h, w) = image.hw();
    let long = h.max(w);
    let scale = if long > cfg.max_side { cfg.max_side as f64 / long as f64 } else { 1.0 };
    let input = if scale < 1.0 {
        let nh = ((h as f64 * scale).round() as usize).max(1);
        let nw = ((w as f64 * scale).round() as usize).max(1);
        resize_bilinear(image, nh, nw)?
    } else {
        image.clone()
    };
    let (ih, iw) = input.hw();
    let dets = if cfg.flip {
        let flipped = input.flip_w();
        let (a, b) = rayon::join(|| decode_pass(model, &input, cfg), || decode_pass(model, &flipped, cfg));
        merge_flip(a?, &b?, iw as f64)
    } else {
        decode_pass(model, &input, cfg)?
    };
    let kept = soft_nms(&dets, &cfg.soft_nms());
    let (sy, sx) = (h as f64 / ih as f64, w as f64 / iw as f64);
    let out = select_top(&kept, cfg.top_n)
        .into_iter()
        .filter_map(|d| {
            let b = d.bbox.clip(iw as f64, ih as f64);
            let b = BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy, b.class_id);
            b.is_valid().then_some(Detection { bbox: b, ..d })
        })
        .collect();
    Ok(out)
}

pub fn detect_scenes(model: &XNetModel, scenes: &[Scene], cfg: &RunConfig) -> Result<Vec<ScoredBox>> {
    let per: Vec<Result<Vec<ScoredBox>>> = scenes
        .par_iter()
        .map(|s| {
            Ok(detect(model, &s.image, cfg)?
                .into_iter()
                .map(|d| ScoredBox { image_id: s.image_id, bbox: d.bbox, score: d.score })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for p in per {
        out.extend(p?);
    }
    Ok(out)
}

pub fn ground_truth(scenes: &[Scene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .flat_map(|s| s.boxes.iter().map(move |b| GroundTruth { image_id: s.image_id, bbox: *b }))
        .collect()
}

pub fn evaluate_scenes(model: &XNetModel, scenes: &[Scene], cfg: &RunConfig) -> Result<MetricReport> {
    let dets = detect_scenes(model, scenes, cfg)?;
    Ok(evaluate(&dets, &ground_truth(scenes), &EvalParams::default()))
}

/// Runs `f` inside a dedicated pool of `threads` workers (0 = rayon default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            preset: "fpn5".into(),
            width: 8,
            head_width: 8,
            batch: 2,
            iters: 3,
            ..RunConfig::desk(HeadKind::Corners)
        }
    }

    #[test]
    fn training_is_thread_count_independent() {
        let cfg = tiny();
        let a = with_threads(1, || train_synthetic(&cfg, |_, _| {})).unwrap().unwrap();
        let b = with_threads(3, || train_synthetic(&cfg, |_, _| {})).unwrap().unwrap();
        assert_eq!(a.1.losses, b.1.losses);
        assert!(a.1.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn detect_returns_boxes_inside_image() {
        let cfg = RunConfig { iters: 0, ..tiny() };
        for head in [HeadKind::Centers, HeadKind::Corners] {
            let cfg = RunConfig { head, ..cfg.clone() };
            let model = XNetModel::new(model_config(&cfg).unwrap(), 1).unwrap();
            let scene = heldout_scenes(&cfg, 1).unwrap().remove(0);
            let dets = detect(&model, &scene.image, &cfg).unwrap();
            assert!(dets.len() <= cfg.top_n);
            for d in dets {
                assert!(d.bbox.x1 >= 0.0 && d.bbox.x2 <= 128.0 && d.bbox.y2 <= 128.0);
            }
        }
    }
}
