use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adicurb::adi::{compute_adi, encode_f32_dump, normalize_to_8bit};
use adicurb::annotator::{encode_png, generate_training_pair, write_training_pair};
use adicurb::evaluation::{compute_metrics, macro_average, match_with_tolerance, micro_average, ConfusionCounts, Metrics};
use adicurb::kitti_io::{
    list_stems, load_calibration_for_camera, read_velodyne_with, write_atomic, Calibration, DatasetLayout, PointCloud,
};
use adicurb::postprocess::{
    candidates_csv, ipm_from_calibration, postprocess_mask, read_mask_png, BevGrid, Homography, PostprocessOutput,
};
use adicurb::projection::project_cloud;
use adicurb::synth::{generate_scene, ground_truth_bev, scene_suite, write_scene, GtProjection, SceneSpec};
use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::report::{stage_stats, stats, write_json, write_run, RunRecord, Stats};
use crate::{AdiArgs, AnnotateArgs, BenchArgs, EvalArgs, Outcome, PostprocessArgs, SynthArgs};

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn create_dirs(root: &Path, subs: &[&str]) -> Result<()> {
    for sub in subs {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_cloud(path: &Path, cfg: &PipelineConfig) -> Result<PointCloud> {
    let frame = read_velodyne_with(path, cfg.io.num_rings, cfg.io.ring_assignment)?;
    Ok(frame.cloud)
}

fn load_calib(path: &Path, cfg: &PipelineConfig) -> Result<Calibration> {
    Ok(load_calibration_for_camera(path, &cfg.io.camera)?)
}

/// Where frames and their calibration come from.
enum FrameSource {
    Dataset(DatasetLayout),
    Files { dir: PathBuf, ids: Vec<String> },
}

impl FrameSource {
    fn open(input: &Path) -> Result<Self> {
        if input.is_file() {
            let dir = input.parent().unwrap_or(Path::new(".")).to_path_buf();
            let id = input
                .file_stem()
                .and_then(|s| s.to_str())
                .context("input file has no usable name")?
                .to_string();
            return Ok(FrameSource::Files { dir, ids: vec![id] });
        }
        ensure!(input.is_dir(), "input {} does not exist", input.display());
        if input.join("velodyne").is_dir() {
            return Ok(FrameSource::Dataset(DatasetLayout::new(input)));
        }
        Ok(FrameSource::Files { dir: input.to_path_buf(), ids: list_stems(input, "bin")? })
    }

    fn ids(&self) -> Result<Vec<String>> {
        match self {
            FrameSource::Dataset(d) => Ok(d.frame_ids()?),
            FrameSource::Files { ids, .. } => Ok(ids.clone()),
        }
    }

    fn cloud_path(&self, id: &str) -> PathBuf {
        match self {
            FrameSource::Dataset(d) => d.frame_path(id),
            FrameSource::Files { dir, .. } => dir.join(format!("{id}.bin")),
        }
    }

    fn calib_path(&self, id: &str, explicit: Option<&Path>) -> Result<PathBuf> {
        if let Some(p) = explicit {
            ensure!(p.is_file(), "missing calibration: {} not found", p.display());
            return Ok(p.to_path_buf());
        }
        match self {
            FrameSource::Dataset(d) => d.calib_path(id),
            FrameSource::Files { dir, .. } => {
                let shared = dir.join("calib.txt");
                shared.is_file().then_some(shared)
            }
        }
        .with_context(|| format!("missing calibration for frame {id}; pass --calib"))
    }
}

#[derive(Debug, Serialize)]
struct FrameFailure {
    frame_id: String,
    error: String,
}

#[derive(Debug, Serialize)]
struct BatchSummary {
    frames_total: usize,
    frames_ok: usize,
    frames_skipped: usize,
    skipped: Vec<FrameFailure>,
    warnings: BTreeMap<String, usize>,
    timings_ms: BTreeMap<String, Stats>,
    config_hash: String,
}

pub fn cmd_synth(cfg: &PipelineConfig, args: &SynthArgs) -> Result<Outcome> {
    let base: SceneSpec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("invalid spec {}", p.display()))?
        }
        None => cfg.synth.clone(),
    };
    base.validate()?;
    let specs: Vec<SceneSpec> = if args.suite {
        scene_suite(args.frames)
    } else {
        (0..args.frames)
            .map(|i| SceneSpec { seed: base.seed.wrapping_add(i), ..base.clone() })
            .collect()
    };
    create_dirs(&args.out, &["gt_bev"])?;
    let t0 = Instant::now();
    specs
        .par_iter()
        .enumerate()
        .try_for_each(|(i, spec)| -> Result<()> {
            let id = format!("{i:06}");
            let scene = generate_scene(spec)?;
            write_scene(&args.out, &id, &scene)?;
            let h = ipm_from_calibration(&scene.calibration, &cfg.postprocess.bev, cfg.postprocess.ground_height)?;
            let gt = ground_truth_bev(
                &scene.curbs,
                &cfg.postprocess.bev,
                GtProjection::Image { calib: &scene.calibration, homography: &h },
            );
            write_atomic(&args.out.join("gt_bev").join(format!("{id}.png")), &encode_png(&gt.to_binary_image())?)?;
            Ok(())
        })?;
    let mut run = RunRecord::new("synth", &cfg.hash(), specs.len());
    run.timings_ms.insert("total".into(), ms_since(t0));
    write_run(&args.out, &run)?;
    println!("synth: {} frames written to {}", specs.len(), args.out.display());
    Ok(Outcome::Success)
}

pub fn cmd_adi(cfg: &PipelineConfig, args: &AdiArgs) -> Result<Outcome> {
    let source = FrameSource::open(&args.input)?;
    let ids = source.ids()?;
    create_dirs(&args.out, &["adi", "adi_f32"])?;
    let t0 = Instant::now();
    let timings: Vec<BTreeMap<String, f64>> = ids
        .par_iter()
        .map(|id| -> Result<BTreeMap<String, f64>> {
            let calib = load_calib(&source.calib_path(id, args.calib.as_deref())?, cfg)?;
            let t = Instant::now();
            let cloud = load_cloud(&source.cloud_path(id), cfg)?;
            let read_ms = ms_since(t);
            let t = Instant::now();
            let samples: Vec<_> = project_cloud(&calib, &cloud).into_iter().map(|(_, s)| s).collect();
            let adi = compute_adi(&samples, calib.image_width as usize, calib.image_height as usize, &cfg.annotator.adi);
            let adi_ms = ms_since(t);
            let preview = normalize_to_8bit(&adi, cfg.annotator.adi.clip)?;
            write_atomic(&args.out.join("adi").join(format!("{id}.png")), &encode_png(&preview)?)?;
            write_atomic(&args.out.join("adi_f32").join(format!("{id}.bin")), &encode_f32_dump(&adi))?;
            Ok(BTreeMap::from([("read".to_string(), read_ms), ("adi".to_string(), adi_ms)]))
        })
        .collect::<Result<_>>()?;
    let summary = BatchSummary {
        frames_total: ids.len(),
        frames_ok: ids.len(),
        frames_skipped: 0,
        skipped: Vec::new(),
        warnings: BTreeMap::new(),
        timings_ms: stage_stats(&timings),
        config_hash: cfg.hash(),
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    let mut run = RunRecord::new("adi", &cfg.hash(), ids.len());
    run.timings_ms.insert("total".into(), ms_since(t0));
    write_run(&args.out, &run)?;
    println!("adi: {} frames", ids.len());
    Ok(Outcome::Success)
}

pub fn cmd_annotate(cfg: &PipelineConfig, args: &AnnotateArgs) -> Result<Outcome> {
    let layout = DatasetLayout::new(&args.dataset);
    ensure!(layout.velodyne_dir().is_dir(), "{} has no velodyne/ directory", args.dataset.display());
    let ids = layout.frame_ids()?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let hash = cfg.hash();
    let t0 = Instant::now();
    let results: Vec<Result<adicurb::annotator::TrainingPair>> = ids
        .par_iter()
        .map(|id| -> Result<adicurb::annotator::TrainingPair> {
            let t = Instant::now();
            let calib_path = layout.calib_path(id).with_context(|| format!("missing calibration for frame {id}"))?;
            let calib = load_calib(&calib_path, cfg)?;
            let cloud = load_cloud(&layout.frame_path(id), cfg)?;
            let read_ms = ms_since(t);
            let mut pair = generate_training_pair(&cloud, &calib, &cfg.annotator)?;
            for w in &pair.detection.warnings {
                log::warn!("frame {id}: {w:?}");
            }
            let t = Instant::now();
            write_training_pair(&args.out, id, &pair, cloud.len(), &hash, cfg.annotator.adi.clip)?;
            pair.detection.timings.insert("read".into(), read_ms);
            pair.detection.timings.insert("write".into(), ms_since(t));
            Ok(pair)
        })
        .collect();

    let mut skipped = Vec::new();
    let mut warnings: BTreeMap<String, usize> = BTreeMap::new();
    let mut timings = Vec::new();
    for (id, r) in ids.iter().zip(results) {
        match r {
            Ok(pair) => {
                for w in &pair.detection.warnings {
                    *warnings.entry(format!("{w:?}")).or_default() += 1;
                }
                timings.push(pair.detection.timings);
            }
            Err(e) => {
                if args.strict {
                    return Err(e.context(format!("frame {id}")));
                }
                log::warn!("frame {id} skipped: {e:#}");
                skipped.push(FrameFailure { frame_id: id.clone(), error: format!("{e:#}") });
            }
        }
    }
    let summary = BatchSummary {
        frames_total: ids.len(),
        frames_ok: ids.len() - skipped.len(),
        frames_skipped: skipped.len(),
        skipped,
        warnings,
        timings_ms: stage_stats(&timings),
        config_hash: hash.clone(),
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    let mut run = RunRecord::new("annotate", &hash, summary.frames_ok);
    run.timings_ms.insert("total".into(), ms_since(t0));
    for (k, s) in &summary.timings_ms {
        run.timings_ms.insert(format!("{k}_median"), s.median_ms);
    }
    write_run(&args.out, &run)?;
    println!(
        "annotate: {} of {} frames, {} skipped",
        summary.frames_ok, summary.frames_total, summary.frames_skipped
    );
    Ok(if summary.frames_skipped > 0 { Outcome::Partial } else { Outcome::Success })
}

fn write_postprocess_outputs(root: &Path, id: &str, out: &PostprocessOutput) -> Result<()> {
    write_atomic(&root.join("bev").join(format!("{id}.png")), &encode_png(&out.bev.to_binary_image())?)?;
    write_atomic(&root.join("candidates").join(format!("{id}.csv")), candidates_csv(&out.candidates).as_bytes())?;
    write_json(&root.join("curves").join(format!("{id}.json")), &out.curves)?;
    write_atomic(&root.join("final").join(format!("{id}.png")), &encode_png(&out.rasterized.to_binary_image())?)?;
    Ok(())
}

pub fn cmd_postprocess(cfg: &PipelineConfig, args: &PostprocessArgs) -> Result<Outcome> {
    ensure!(args.masks.is_dir(), "mask directory {} does not exist", args.masks.display());
    let ids = list_stems(&args.masks, "png")?;
    create_dirs(&args.out, &["bev", "candidates", "curves", "final"])?;
    let shared: Option<Homography> = if args.calib.is_file() {
        let calib = load_calib(&args.calib, cfg)?;
        Some(ipm_from_calibration(&calib, &cfg.postprocess.bev, cfg.postprocess.ground_height)?)
    } else {
        ensure!(args.calib.is_dir(), "missing calibration: {} not found", args.calib.display());
        None
    };
    let layout = DatasetLayout::new(&args.calib);
    let t0 = Instant::now();
    let timings: Vec<BTreeMap<String, f64>> = ids
        .par_iter()
        .map(|id| -> Result<BTreeMap<String, f64>> {
            let h = match shared {
                Some(h) => h,
                None => {
                    let p = layout.calib_path(id).with_context(|| format!("missing calibration for frame {id}"))?;
                    ipm_from_calibration(&load_calib(&p, cfg)?, &cfg.postprocess.bev, cfg.postprocess.ground_height)?
                }
            };
            let mask = read_mask_png(&args.masks.join(format!("{id}.png")))?;
            let t = Instant::now();
            let out = postprocess_mask(&mask, &h, &cfg.postprocess)?;
            let post_ms = ms_since(t);
            for w in &out.warnings {
                log::warn!("frame {id}: {w}");
            }
            write_postprocess_outputs(&args.out, id, &out)?;
            Ok(BTreeMap::from([("postprocess".to_string(), post_ms)]))
        })
        .collect::<Result<_>>()?;
    let mut run = RunRecord::new("postprocess", &cfg.hash(), ids.len());
    run.timings_ms.insert("total".into(), ms_since(t0));
    if let Some(s) = stage_stats(&timings).get("postprocess") {
        run.timings_ms.insert("postprocess_median".into(), s.median_ms);
    }
    write_run(&args.out, &run)?;
    println!("postprocess: {} frames", ids.len());
    Ok(Outcome::Success)
}

#[derive(Debug, Serialize)]
pub struct FrameMetrics {
    pub frame_id: String,
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub tolerance: u32,
    pub frames: Vec<FrameMetrics>,
    pub missing_gt: Vec<String>,
    pub micro: Metrics,
    #[serde(rename = "macro")]
    pub macro_: Metrics,
}

fn read_bev(path: &Path) -> Result<BevGrid> {
    Ok(BevGrid::from_image(&read_mask_png(path)?))
}

pub fn evaluate_dirs(pred: &Path, gt: &Path, tolerance: u32) -> Result<EvalReport> {
    let ids = list_stems(pred, "png")?;
    let results: Vec<Option<(String, ConfusionCounts)>> = ids
        .par_iter()
        .map(|id| -> Result<Option<(String, ConfusionCounts)>> {
            let gt_path = gt.join(format!("{id}.png"));
            if !gt_path.is_file() {
                return Ok(None);
            }
            let p = read_bev(&pred.join(format!("{id}.png")))?;
            let g = read_bev(&gt_path)?;
            Ok(Some((id.clone(), match_with_tolerance(&p, &g, tolerance)?)))
        })
        .collect::<Result<_>>()?;
    let mut frames = Vec::new();
    let mut missing_gt = Vec::new();
    for (id, r) in ids.iter().zip(results) {
        match r {
            Some((id, counts)) => frames.push(FrameMetrics { frame_id: id, counts, metrics: compute_metrics(&counts) }),
            None => missing_gt.push(id.clone()),
        }
    }
    let counts: Vec<ConfusionCounts> = frames.iter().map(|f| f.counts).collect();
    Ok(EvalReport { tolerance, micro: micro_average(&counts), macro_: macro_average(&counts), frames, missing_gt })
}

fn metrics_csv(report: &EvalReport) -> String {
    let mut out = String::from("frame,tp,fp,fn,precision,recall,f1\n");
    for f in &report.frames {
        let (c, m) = (&f.counts, &f.metrics);
        out.push_str(&format!("{},{},{},{},{},{},{}\n", f.frame_id, c.tp, c.fp, c.fn_, m.precision, m.recall, m.f1));
    }
    for (name, m) in [("micro", report.micro), ("macro", report.macro_)] {
        out.push_str(&format!("{name},,,,{},{},{}\n", m.precision, m.recall, m.f1));
    }
    out
}

pub fn cmd_eval(cfg: &PipelineConfig, args: &EvalArgs) -> Result<Outcome> {
    ensure!(args.pred.is_dir(), "prediction directory {} does not exist", args.pred.display());
    ensure!(args.gt.is_dir(), "ground-truth directory {} does not exist", args.gt.display());
    let t0 = Instant::now();
    let report = evaluate_dirs(&args.pred, &args.gt, cfg.evaluation.tolerance)?;
    if args.strict && !report.missing_gt.is_empty() {
        bail!("missing ground truth for frames {:?}", report.missing_gt);
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_json(&args.out.join("metrics.json"), &report)?;
    write_atomic(&args.out.join("metrics.csv"), metrics_csv(&report).as_bytes())?;
    let mut run = RunRecord::new("eval", &cfg.hash(), report.frames.len());
    run.timings_ms.insert("total".into(), ms_since(t0));
    write_run(&args.out, &run)?;
    println!(
        "eval: {} frames, micro P={:.4} R={:.4} F1={:.4}, {} missing gt",
        report.frames.len(),
        report.micro.precision,
        report.micro.recall,
        report.micro.f1,
        report.missing_gt.len()
    );
    Ok(if report.missing_gt.is_empty() { Outcome::Success } else { Outcome::Partial })
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub points: usize,
    pub iterations: usize,
    pub warmup: usize,
    /// Cloud to ADI.
    pub pre: Stats,
    /// Perspective mask to fitted curves.
    pub post: Stats,
    /// Every iteration produced the same ADI bytes and curves.
    pub deterministic: bool,
}

/// Time pre- and post-processing on one frame.
pub fn run_bench(cloud: &PointCloud, calib: &Calibration, cfg: &PipelineConfig, iterations: usize, warmup: usize) -> Result<BenchReport> {
    if iterations == 0 {
        bail!("nothing to measure");
    }
    let (w, h) = (calib.image_width as usize, calib.image_height as usize);
    let pair = generate_training_pair(cloud, calib, &cfg.annotator)?;
    let mask = pair.label.to_image();
    let homography = ipm_from_calibration(calib, &cfg.postprocess.bev, cfg.postprocess.ground_height)?;
    let reference_adi = encode_f32_dump(&pair.adi);
    let mut reference_curves = None;
    let mut deterministic = true;
    let (mut pre, mut post) = (Vec::with_capacity(iterations), Vec::with_capacity(iterations));
    for i in 0..warmup + iterations {
        let t = Instant::now();
        let samples: Vec<_> = project_cloud(calib, cloud).into_iter().map(|(_, s)| s).collect();
        let adi = compute_adi(&samples, w, h, &cfg.annotator.adi);
        let pre_ms = ms_since(t);
        let t = Instant::now();
        let out = postprocess_mask(&mask, &homography, &cfg.postprocess)?;
        let post_ms = ms_since(t);
        deterministic &= encode_f32_dump(&adi) == reference_adi;
        let curves = serde_json::to_string(&out.curves)?;
        deterministic &= reference_curves.get_or_insert_with(|| curves.clone()) == &curves;
        if i >= warmup {
            pre.push(pre_ms);
            post.push(post_ms);
        }
    }
    Ok(BenchReport { points: cloud.len(), iterations, warmup, pre: stats(&pre), post: stats(&post), deterministic })
}

pub fn cmd_bench(cfg: &PipelineConfig, args: &BenchArgs) -> Result<Outcome> {
    let iterations = args.iterations.unwrap_or(cfg.bench.iterations);
    let warmup = args.warmup.unwrap_or(cfg.bench.warmup);
    if iterations == 0 {
        bail!("nothing to measure");
    }
    let (cloud, calib) = match &args.dataset {
        Some(root) => {
            let layout = DatasetLayout::new(root);
            let id = match &args.frame {
                Some(id) => id.clone(),
                None => layout.frame_ids()?.into_iter().next().context("dataset has no frames")?,
            };
            let calib_path = layout.calib_path(&id).with_context(|| format!("missing calibration for frame {id}"))?;
            (load_cloud(&layout.frame_path(&id), cfg)?, load_calib(&calib_path, cfg)?)
        }
        None => {
            let spec: SceneSpec = match &args.spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
                    toml::from_str(&text).with_context(|| format!("invalid spec {}", p.display()))?
                }
                None => cfg.synth.clone(),
            };
            let scene = generate_scene(&spec)?;
            (scene.cloud, scene.calibration)
        }
    };
    let report = run_bench(&cloud, &calib, cfg, iterations, warmup)?;
    println!(
        "bench: {} points, {} iterations; pre median {:.3} ms p95 {:.3} ms; post median {:.3} ms p95 {:.3} ms; deterministic {}",
        report.points,
        report.iterations,
        report.pre.median_ms,
        report.pre.p95_ms,
        report.post.median_ms,
        report.post.p95_ms,
        report.deterministic
    );
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_json(&out.join("bench.json"), &report)?;
        let mut run = RunRecord::new("bench", &cfg.hash(), 1);
        run.timings_ms.insert("pre_median".into(), report.pre.median_ms);
        run.timings_ms.insert("post_median".into(), report.post.median_ms);
        write_run(out, &run)?;
    }
    Ok(Outcome::Success)
}
