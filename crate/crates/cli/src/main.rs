use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use xnet::config::RunConfig;
use xnet::data::coco::{load_coco_json, save_coco_json};
use xnet::data::store::{load_dataset, save_dataset, scenes_to_coco};
use xnet::data::synth::gen_scene;
use xnet::data::{aspect_stats, gen_synthetic, Scene};
use xnet::decode::{decode_centers, decode_corners, match_corners};
use xnet::eval::{evaluate, EvalParams, GroundTruth, ScoredBox};
use xnet::net::checkpoint::Checkpoint;
use xnet::net::{HeadKind, XNetModel};
use xnet::pipeline::{self, detect_scenes, heldout_scenes, synth_params, train_with, with_threads};
use xnet::targets::{encode_centers, encode_corners};
use xnet::{BBox, Lattice};

/// MatrixNet (xNet) detectors: lattice inspection, training, inference and evaluation.
#[derive(Parser)]
#[command(name = "xnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory; created if missing.
    #[arg(long, short)]
    out: PathBuf,
    /// TOML file with run configuration keys (see README).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Constant set: desk or paper.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Detection head: centers or corners.
    #[arg(long)]
    head: Option<String>,
    /// Lattice preset: fpn5, xnet19 or full25.
    #[arg(long)]
    preset: Option<String>,
    /// Base layer range: 24-48 or 16-32.
    #[arg(long)]
    base_range: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the layer table of a lattice as CSV.
    Lattice {
        #[command(flatten)]
        common: Common,
    },
    /// Count how many boxes each layer receives.
    AssignStats {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        boxes: BoxSource,
    },
    /// Encode boxes, decode the perfect targets and report the reconstruction error.
    Roundtrip {
        #[command(flatten)]
        common: Common,
        /// Synthetic scenes to use when no annotation file is given.
        #[arg(long, default_value_t = 1000)]
        scenes: usize,
        /// COCO annotation JSON to encode instead of synthetic scenes.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        images: usize,
        /// Draw from the held-out stream used for evaluation.
        #[arg(long)]
        heldout: bool,
    },
    /// Train a model; writes model.ckpt and loss.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to an endless synthetic stream.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Run a checkpoint on a dataset directory; writes detections.jsonl.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score detections against COCO annotations; writes metrics.json and per_class.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Histogram of box elongation; writes hist.csv, hist.svg and hist.json.
    Hist {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        boxes: BoxSource,
        #[arg(long, default_value_t = 0.25)]
        bin_width: f64,
        #[arg(long, default_value_t = 10.0)]
        max_ratio: f64,
    },
}

#[derive(Args, Clone)]
struct BoxSource {
    /// COCO annotation JSON.
    #[arg(long, conflicts_with = "data")]
    annotations: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl BoxSource {
    fn load(&self) -> Result<Vec<BBox>> {
        match (&self.annotations, &self.data) {
            (Some(a), _) => Ok(load_coco_json(a)?.annotations.into_iter().map(|g| g.bbox).collect()),
            (None, Some(d)) => Ok(load_dataset(d)?.0.into_iter().flat_map(|s| s.boxes).collect()),
            (None, None) => bail!("one of --annotations or --data is required"),
        }
    }
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let head = HeadKind::parse(c.head.as_deref().unwrap_or("corners"))?;
    let mut cfg = RunConfig::profile(&c.profile, head)?;
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let overlay: toml::Table =
            toml::from_str(&text).map_err(|e| anyhow!("malformed config {}: {}", path.display(), e.message()))?;
        let mut base = toml::Table::try_from(&cfg)?;
        for (k, v) in overlay {
            if !base.contains_key(&k) {
                bail!("malformed config {}: unknown key `{k}`", path.display());
            }
            base.insert(k, v);
        }
        cfg = base.try_into().map_err(|e: toml::de::Error| anyhow!("malformed config {}: {}", path.display(), e.message()))?;
    }
    if c.head.is_some() {
        cfg.head = head;
    }
    if let Some(p) = &c.preset {
        cfg.preset = p.clone();
    }
    if let Some(b) = &c.base_range {
        cfg.base_range = b.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join("config.toml"), toml::to_string(cfg)?)?;
    Ok(())
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
}

fn cmd_lattice(cfg: &RunConfig, out: &Path) -> Result<()> {
    let lat = Lattice::build(cfg.lattice_spec()?)?;
    write(out, "lattice.csv", lat.to_csv())?;
    println!("{} layers", lat.len());
    Ok(())
}

fn cmd_assign_stats(cfg: &RunConfig, out: &Path, boxes: &[BBox]) -> Result<()> {
    let lat = Lattice::build(cfg.lattice_spec()?)?;
    let mut per_layer = vec![0usize; lat.len()];
    let mut multiplicity = vec![0usize; lat.len() + 1];
    for b in boxes.iter().filter(|b| b.is_valid()) {
        let a = lat.assign(b);
        multiplicity[a.len()] += 1;
        for i in a {
            per_layer[i] += 1;
        }
    }
    let mut csv = String::from("r,c,boxes\n");
    for (l, n) in lat.layers().iter().zip(&per_layer) {
        csv.push_str(&format!("{},{},{}\n", l.id.r, l.id.c, n));
    }
    write(out, "assign.csv", csv)?;
    while multiplicity.len() > 1 && multiplicity.last() == Some(&0) {
        multiplicity.pop();
    }
    let summary = json!({
        "boxes": boxes.len(),
        "unassigned": multiplicity[0],
        "layers_per_box": multiplicity,
    });
    write(out, "assign.json", serde_json::to_string_pretty(&summary)?)?;
    println!("{} boxes, {} fit no layer", boxes.len(), multiplicity[0]);
    Ok(())
}

/// Boxes and `(h, w)` per image.
type Frames = Vec<(Vec<BBox>, (usize, usize))>;

fn roundtrip_frames(cfg: &RunConfig, n: usize, annotations: Option<&Path>) -> Result<(Frames, usize)> {
    match annotations {
        Some(path) => {
            let ds = load_coco_json(path)?;
            let mut by_image: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
            for g in &ds.annotations {
                by_image.entry(g.image_id).or_default().push(g.bbox);
            }
            let frames = ds
                .images
                .iter()
                .map(|im| (by_image.remove(&im.image_id).unwrap_or_default(), (im.height, im.width)))
                .collect();
            Ok((frames, ds.categories.len().max(1)))
        }
        None => {
            let p = synth_params(cfg, cfg.seed, n, 0);
            p.validate()?;
            Ok(((0..n as u64).map(|i| gen_scene(&p, i)).map(|s| (s.boxes, s.image.hw())).collect(), cfg.num_classes))
        }
    }
}

fn cmd_roundtrip(cfg: &RunConfig, out: &Path, n: usize, annotations: Option<&Path>) -> Result<()> {
    let lat = Lattice::build(cfg.lattice_spec()?)?;
    let (frames, num_classes) = roundtrip_frames(cfg, n, annotations)?;
    let n = frames.len();
    let (mut objects, mut collisions, mut dets_total, mut skipped) = (0usize, 0usize, 0usize, 0usize);
    let mut max_err: f64 = 0.0;
    let mut min_iou: f64 = 1.0;
    for (boxes, hw) in &frames {
        let hw = *hw;
        let dets = match cfg.head {
            HeadKind::Corners => {
                let t = encode_corners(&lat, boxes, num_classes, hw)?;
                collisions += t.stats.collisions;
                skipped += t.stats.skipped;
                let (tls, brs) = decode_corners(&lat, &t.as_outputs(), cfg.k_corners, hw)?;
                match_corners(&tls, &brs, cfg.match_tol)
            }
            HeadKind::Centers => {
                let t = encode_centers(&lat, boxes, num_classes, hw)?;
                collisions += t.stats.collisions;
                skipped += t.stats.skipped;
                decode_centers(&lat, &t.as_outputs(), cfg.k_centers)?.0
            }
        };
        dets_total += dets.len();
        for b in boxes.iter().filter(|b| !lat.assign(b).is_empty()) {
            objects += 1;
            let best = dets
                .iter()
                .filter(|d| d.bbox.class_id == b.class_id)
                .max_by(|x, y| x.bbox.iou(b).total_cmp(&y.bbox.iou(b)));
            match best {
                Some(d) => {
                    min_iou = min_iou.min(d.bbox.iou(b));
                    let e = [d.bbox.x1 - b.x1, d.bbox.y1 - b.y1, d.bbox.x2 - b.x2, d.bbox.y2 - b.y2];
                    max_err = e.iter().fold(max_err, |m, v| m.max(v.abs()));
                }
                None => {
                    min_iou = 0.0;
                    max_err = f64::INFINITY;
                }
            }
        }
    }
    let report = json!({
        "head": cfg.head,
        "images": n,
        "objects": objects,
        "detections": dets_total,
        "collisions": collisions,
        "unassigned": skipped,
        "max_corner_error": max_err,
        "min_iou": min_iou,
    });
    write(out, "roundtrip.json", serde_json::to_string_pretty(&report)?)?;
    println!("{n} images, {objects} encoded objects ({skipped} fit no layer): max corner error {max_err:.3e}, min IoU {min_iou:.6}");
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path, n: usize, heldout: bool) -> Result<()> {
    let scenes = if heldout {
        heldout_scenes(cfg, n)?
    } else {
        gen_synthetic(&synth_params(cfg, cfg.seed, n, 0))?
    };
    save_dataset(out, &scenes, cfg.num_classes)?;
    save_coco_json(&scenes_to_coco(&scenes, cfg.num_classes), out.join("annotations.json"))?;
    println!("{} images, {} boxes", scenes.len(), scenes.iter().map(|s| s.boxes.len()).sum::<usize>());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path, data: Option<&Path>) -> Result<()> {
    let mut model = XNetModel::new(pipeline::model_config(cfg)?, cfg.seed)?;
    let mut log = Vec::new();
    let every = (cfg.iters / 20).max(1);
    let progress = |i: usize, l: f64| {
        if i % every == 0 || i + 1 == cfg.iters {
            eprintln!("iter {i:>6}  loss {l:.4}");
        }
    };
    let report = match data {
        Some(dir) => {
            let (scenes, nc) = load_dataset(dir)?;
            if scenes.is_empty() {
                bail!("dataset {} has no images", dir.display());
            }
            if nc != cfg.num_classes {
                bail!("dataset has {nc} classes, config has {}", cfg.num_classes);
            }
            train_with(&mut model, cfg, |i| Ok(scenes[i as usize % scenes.len()].clone()), progress)?
        }
        None => {
            let p = synth_params(cfg, cfg.seed, 0, 0);
            p.validate()?;
            train_with(&mut model, cfg, |i| Ok(gen_scene(&p, i)), progress)?
        }
    };
    for (i, ((t, h), r)) in report.losses.iter().zip(&report.heat_losses).zip(&report.reg_losses).enumerate() {
        log.push(format!("{i},{t},{h},{r}"));
    }
    write(out, "loss.csv", format!("iter,total,heat,reg\n{}\n", log.join("\n")))?;
    let run = serde_json::to_value(cfg)?;
    Checkpoint::from_model(&model, run)?.save(out.join("model.ckpt"))?;
    let summary = json!({ "iters": cfg.iters, "encode": report.encode, "final_loss": report.losses.last() });
    write(out, "train.json", serde_json::to_string_pretty(&summary)?)?;
    let (first, last) = report.head_tail(50);
    println!("trained {} iters in {:.1}s, loss {first:.4} -> {last:.4}", cfg.iters, report.seconds);
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, out: &Path, ckpt: &Path, data: &Path) -> Result<()> {
    let model = Checkpoint::load(ckpt)?.into_model()?;
    let (scenes, _): (Vec<Scene>, _) = load_dataset(data)?;
    let mut cfg = cfg.clone();
    cfg.head = model.config().head;
    cfg.num_classes = model.config().num_classes;
    let dets = detect_scenes(&model, &scenes, &cfg)?;
    let mut f = std::io::BufWriter::new(fs::File::create(out.join("detections.jsonl"))?);
    for d in &dets {
        let b = d.bbox;
        let line = json!({"image_id": d.image_id, "class": b.class_id, "score": d.score, "bbox": [b.x1, b.y1, b.x2, b.y2]});
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    println!("{} detections on {} images", dets.len(), scenes.len());
    Ok(())
}

fn read_detections(path: &Path) -> Result<Vec<ScoredBox>> {
    let f = fs::File::open(path).with_context(|| format!("cannot read detections {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| anyhow!("{}:{}: {what}", path.display(), i + 1);
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(&format!("malformed JSON: {e}")))?;
        let num = |k: &str| v.get(k).and_then(|x| x.as_f64()).ok_or_else(|| bad(&format!("missing number `{k}`")));
        let bbox = v
            .get("bbox")
            .and_then(|b| b.as_array())
            .filter(|b| b.len() == 4)
            .ok_or_else(|| bad("`bbox` must be [x1, y1, x2, y2]"))?;
        let c: Vec<f64> = bbox.iter().map(|x| x.as_f64().ok_or_else(|| bad("non-numeric bbox"))).collect::<Result<_>>()?;
        let class = v.get("class").and_then(|x| x.as_u64()).ok_or_else(|| bad("missing integer `class`"))?;
        out.push(ScoredBox {
            image_id: v.get("image_id").and_then(|x| x.as_u64()).ok_or_else(|| bad("missing integer `image_id`"))?,
            bbox: BBox::new(c[0], c[1], c[2], c[3], class as usize),
            score: num("score")?,
        });
    }
    Ok(out)
}

fn cmd_eval(out: &Path, dets: &Path, ann: &Path) -> Result<()> {
    let dets = read_detections(dets)?;
    let ds = load_coco_json(ann)?;
    let gts: Vec<GroundTruth> = ds.annotations;
    let m = evaluate(&dets, &gts, &EvalParams::default());
    write(out, "metrics.json", serde_json::to_string_pretty(&m)?)?;
    write(out, "per_class.csv", m.per_class_csv())?;
    println!("AP {:.4}  AP50 {:.4}  AP75 {:.4}  AR100 {:.4}", m.ap, m.ap50, m.ap75, m.ar_100);
    Ok(())
}

fn cmd_hist(out: &Path, boxes: &[BBox], bin_width: f64, max_ratio: f64) -> Result<()> {
    if !(bin_width > 0.0 && max_ratio > 1.0) {
        bail!("--bin-width must be positive and --max-ratio above 1");
    }
    let s = aspect_stats(boxes, bin_width, max_ratio);
    write(out, "hist.csv", s.to_csv())?;
    write(out, "hist.svg", s.to_svg())?;
    write(out, "hist.json", serde_json::to_string_pretty(&s)?)?;
    println!("{} boxes; ratio > 1.75: {:.4}; ratio > 3: {:.4}", s.total, s.fraction_gt_175, s.fraction_gt_3);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Lattice { common }
        | Command::AssignStats { common, .. }
        | Command::Roundtrip { common, .. }
        | Command::Synth { common, .. }
        | Command::Train { common, .. }
        | Command::Infer { common, .. }
        | Command::Eval { common, .. }
        | Command::Hist { common, .. } => common.clone(),
    };
    let mut cfg = resolve(&common)?;
    if let Command::Train { iters, lr, batch, .. } = &cli.command {
        cfg.iters = iters.unwrap_or(cfg.iters);
        cfg.lr = lr.unwrap_or(cfg.lr);
        cfg.batch = batch.unwrap_or(cfg.batch);
        cfg.lr_drop_iter = cfg.lr_drop_iter.min(cfg.iters);
        cfg.validate()?;
    }
    let out = common.out.as_path();
    prepare_out(out, &cfg)?;
    with_threads(cfg.threads, || match &cli.command {
        Command::Lattice { .. } => cmd_lattice(&cfg, out),
        Command::AssignStats { boxes, .. } => cmd_assign_stats(&cfg, out, &boxes.load()?),
        Command::Roundtrip { scenes, annotations, .. } => cmd_roundtrip(&cfg, out, *scenes, annotations.as_deref()),
        Command::Synth { images, heldout, .. } => cmd_synth(&cfg, out, *images, *heldout),
        Command::Train { data, .. } => cmd_train(&cfg, out, data.as_deref()),
        Command::Infer { checkpoint, data, .. } => cmd_infer(&cfg, out, checkpoint, data),
        Command::Eval { detections, annotations, .. } => cmd_eval(out, detections, annotations),
        Command::Hist { boxes, bin_width, max_ratio, .. } => cmd_hist(out, &boxes.load()?, *bin_width, *max_ratio),
    })?
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
