//! Automatic curb labels: 3D curb detection on the full sweep, projection of
//! the detected curb points into the camera, and paired ADI emission.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use image::{GrayImage, ImageEncoder, Luma};
use serde::{Deserialize, Serialize};

use crate::adi::{compute_adi, encode_f32_dump, normalize_to_8bit, AdiConfig, AltitudeDifferenceImage};
use crate::beam_classify::{build_beam_model, find_dominant_extremes, split_left_right, BeamConfig, RoadSegmentationLine};
use crate::curb_features::{extract_feature_points, organize_layers, FeaturePoint, FeatureThresholds};
use crate::error::{Error, Result};
use crate::gpr_filter::{iterative_filter, GprHyperparams};
use crate::ground_seg::{dynamic_object_keep_indices, segment_ground, DynamicObjectConfig, GroundSegConfig};
use crate::kitti_io::{write_atomic, Calibration, PointCloud, RawPoint};
use crate::projection::{project_cloud, Projector};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotatorConfig {
    pub ground: GroundSegConfig,
    pub dynamic: DynamicObjectConfig,
    pub features: FeatureThresholds,
    pub beam: BeamConfig,
    pub gpr: GprHyperparams,
    pub adi: AdiConfig,
    pub label: LabelConfig,
    pub obstacle_foot: ObstacleFootConfig,
}

/// Feature points lying at the foot of a static vertical structure (the
/// lowest band of a wall falls inside the ground tolerance) are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObstacleFootConfig {
    pub enabled: bool,
    /// Horizontal search radius around a feature point, meters.
    pub radius: f64,
    /// Extra radius per meter of feature range; returns from a wall thin out
    /// with distance.
    pub radius_per_meter: f64,
    /// Only non-ground points at most this far above the feature count.
    pub max_height: f64,
}

impl Default for ObstacleFootConfig {
    fn default() -> Self {
        Self { enabled: true, radius: 0.2, radius_per_meter: 0.015, max_height: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// Disk radius stamped around each projected curb point, pixels.
    pub dilation_width: u32,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { dilation_width: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionWarning {
    FallbackFrontDirection,
    FallbackRearDirection,
    EmptyLeft,
    EmptyRight,
    SmallLeftSet,
    SmallRightSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurbDetection3D {
    pub left: Vec<RawPoint>,
    pub right: Vec<RawPoint>,
    /// Indices into the input cloud, parallel to `left` / `right`.
    pub left_indices: Vec<usize>,
    pub right_indices: Vec<usize>,
    pub line: RoadSegmentationLine,
    pub warnings: Vec<DetectionWarning>,
    /// Wall-clock milliseconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl CurbDetection3D {
    pub fn all_points(&self) -> impl Iterator<Item = &RawPoint> {
        self.left.iter().chain(self.right.iter())
    }
}

/// Keep features with no static non-ground point within `radius` (xy) and
/// `max_height` above them.
pub fn suppress_obstacle_feet(
    features: Vec<FeaturePoint>,
    non_ground: &[RawPoint],
    cfg: &ObstacleFootConfig,
) -> Vec<FeaturePoint> {
    if !cfg.enabled || non_ground.is_empty() || features.is_empty() {
        return features;
    }
    let max_range = features
        .iter()
        .map(|f| (f.point.x as f64).hypot(f.point.y as f64))
        .fold(0.0, f64::max);
    let cell = (cfg.radius + cfg.radius_per_meter * max_range).max(1e-3);
    let key = |x: f64, y: f64| ((x / cell).floor() as i64, (y / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in non_ground.iter().enumerate() {
        grid.entry(key(p.x as f64, p.y as f64)).or_default().push(i);
    }
    features
        .into_iter()
        .filter(|f| {
            let (fx, fy, fz) = (f.point.x as f64, f.point.y as f64, f.point.z as f64);
            let r = cfg.radius + cfg.radius_per_meter * fx.hypot(fy);
            let r2 = r * r;
            let (cx, cy) = key(fx, fy);
            for gx in cx - 1..=cx + 1 {
                for gy in cy - 1..=cy + 1 {
                    let Some(members) = grid.get(&(gx, gy)) else { continue };
                    for &i in members {
                        let q = non_ground[i];
                        let (dx, dy) = (q.x as f64 - fx, q.y as f64 - fy);
                        if dx * dx + dy * dy <= r2 && q.z as f64 - fz <= cfg.max_height {
                            return false;
                        }
                    }
                }
            }
            true
        })
        .collect()
}

struct Stopwatch {
    last: Instant,
    timings: BTreeMap<String, f64>,
}

impl Stopwatch {
    fn new() -> Self {
        Self { last: Instant::now(), timings: BTreeMap::new() }
    }

    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.timings.insert(name.to_string(), (now - self.last).as_secs_f64() * 1e3);
        self.last = now;
    }
}

/// Filter one side in road-aligned coordinates; returns kept features.
fn filter_side(features: &[FeaturePoint], line: &RoadSegmentationLine, gpr: &GprHyperparams) -> Result<(Vec<FeaturePoint>, bool)> {
    let (s, c) = (-line.direction_front).sin_cos();
    let pts: Vec<(f64, f64)> = features
        .iter()
        .map(|f| {
            let (x, y) = (f.point.x as f64, f.point.y as f64);
            (c * x - s * y, s * x + c * y)
        })
        .collect();
    let out = iterative_filter(&pts, gpr)?;
    Ok((out.inliers.iter().map(|&i| features[i]).collect(), out.too_few_points))
}

/// Ground segmentation, movable-object removal, per-ring features, beam
/// split and GPR filtering on one sweep.
pub fn detect_curbs_3d(cloud: &PointCloud, cfg: &AnnotatorConfig) -> Result<CurbDetection3D> {
    let mut sw = Stopwatch::new();
    let part = segment_ground(cloud, &cfg.ground);
    sw.lap("ground_segmentation");

    let keep = dynamic_object_keep_indices(&part.non_ground, &cfg.dynamic, |x, y| {
        part.ground_height_at(x, y).unwrap_or(cfg.dynamic.ground_z)
    });
    let static_non_ground = part.non_ground.select(&keep);
    sw.lap("dynamic_removal");

    let layers = organize_layers(&part.ground);
    let mut features = extract_feature_points(&layers, &cfg.features);
    for f in features.iter_mut() {
        f.source_index = part.ground_indices[f.source_index];
    }
    let features = suppress_obstacle_feet(features, &part.non_ground.points, &cfg.obstacle_foot);
    sw.lap("feature_extraction");

    let beams = build_beam_model(&static_non_ground, cfg.beam.n_beams, cfg.beam.max_range);
    let line = find_dominant_extremes(&beams, cfg.beam.min_separation, cfg.beam.smoothing_window);
    let (left_f, right_f) = split_left_right(&features, &line);
    sw.lap("classification");

    let (left_res, right_res) = rayon::join(
        || filter_side(&left_f, &line, &cfg.gpr),
        || filter_side(&right_f, &line, &cfg.gpr),
    );
    let (left_kept, left_small) = left_res?;
    let (right_kept, right_small) = right_res?;
    sw.lap("gpr_filter");

    let mut warnings = Vec::new();
    if line.front_fallback {
        warnings.push(DetectionWarning::FallbackFrontDirection);
    }
    if line.rear_fallback {
        warnings.push(DetectionWarning::FallbackRearDirection);
    }
    if left_kept.is_empty() {
        warnings.push(DetectionWarning::EmptyLeft);
    } else if left_small {
        warnings.push(DetectionWarning::SmallLeftSet);
    }
    if right_kept.is_empty() {
        warnings.push(DetectionWarning::EmptyRight);
    } else if right_small {
        warnings.push(DetectionWarning::SmallRightSet);
    }
    Ok(CurbDetection3D {
        left: left_kept.iter().map(|f| f.point).collect(),
        right: right_kept.iter().map(|f| f.point).collect(),
        left_indices: left_kept.iter().map(|f| f.source_index).collect(),
        right_indices: right_kept.iter().map(|f| f.source_index).collect(),
        line,
        warnings,
        timings: sw.timings,
    })
}

/// Binary curb mask in camera pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub dilation_width: u32,
    /// Row-major, 1 for curb.
    pub values: Vec<u8>,
}

impl LabelMask {
    pub fn empty(width: usize, height: usize, dilation_width: u32) -> Self {
        Self { width, height, dilation_width, values: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    /// Set every pixel within `radius` (Euclidean) of `(cx, cy)`.
    pub fn stamp_disk(&mut self, cx: i64, cy: i64, radius: u32) {
        let r = radius as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
                    self.values[y as usize * self.width + x as usize] = 1;
                }
            }
        }
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) != 0 { 255 } else { 0 }])
        })
    }
}

/// Project curb points into the image and stamp a disk at each in-bounds
/// pixel.
pub fn render_label_mask<'a>(
    points: impl IntoIterator<Item = &'a RawPoint>,
    calib: &Calibration,
    dilation_width: u32,
) -> LabelMask {
    let projector = Projector::new(calib);
    let mut mask = LabelMask::empty(calib.image_width as usize, calib.image_height as usize, dilation_width);
    for p in points {
        if let Some(s) = projector.project_xyz(p.xyz()) {
            let (u, v) = (s.u.round(), s.v.round());
            if u >= 0.0 && v >= 0.0 && u < mask.width as f64 && v < mask.height as f64 {
                mask.stamp_disk(u as i64, v as i64, dilation_width);
            }
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub adi: AltitudeDifferenceImage,
    pub label: LabelMask,
    pub detection: CurbDetection3D,
}

/// ADI of the frustum-cropped sweep, paired with the label mask of curbs
/// detected on the full sweep.
pub fn generate_training_pair(cloud: &PointCloud, calib: &Calibration, cfg: &AnnotatorConfig) -> Result<TrainingPair> {
    let t0 = Instant::now();
    let samples: Vec<_> = project_cloud(calib, cloud).into_iter().map(|(_, s)| s).collect();
    let adi = compute_adi(&samples, calib.image_width as usize, calib.image_height as usize, &cfg.adi);
    let adi_ms = t0.elapsed().as_secs_f64() * 1e3;

    let mut detection = detect_curbs_3d(cloud, cfg)?;
    let t1 = Instant::now();
    let label = render_label_mask(detection.all_points(), calib, cfg.label.dilation_width);
    detection.timings.insert("adi".into(), adi_ms);
    detection.timings.insert("label_render".into(), t1.elapsed().as_secs_f64() * 1e3);
    Ok(TrainingPair { adi, label, detection })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame_id: String,
    pub num_points: usize,
    pub left_points: usize,
    pub right_points: usize,
    pub warnings: Vec<DetectionWarning>,
    pub timings_ms: BTreeMap<String, f64>,
    pub config_hash: String,
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::L8)
        .map_err(|source| Error::Image { path: "<memory>".into(), source })?;
    Ok(buf)
}

/// Write `adi/ID.png`, `adi_f32/ID.bin`, `label/ID.png` and `meta/ID.json`
/// under `root`, each file atomically.
pub fn write_training_pair(
    root: &Path,
    frame_id: &str,
    pair: &TrainingPair,
    num_points: usize,
    config_hash: &str,
    adi_clip: f64,
) -> Result<()> {
    for sub in ["adi", "adi_f32", "label", "meta"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let preview = normalize_to_8bit(&pair.adi, adi_clip)?;
    write_atomic(&root.join("adi").join(format!("{frame_id}.png")), &encode_png(&preview)?)?;
    write_atomic(&root.join("adi_f32").join(format!("{frame_id}.bin")), &encode_f32_dump(&pair.adi))?;
    write_atomic(&root.join("label").join(format!("{frame_id}.png")), &encode_png(&pair.label.to_image())?)?;
    let meta = FrameMeta {
        frame_id: frame_id.to_string(),
        num_points,
        left_points: pair.detection.left.len(),
        right_points: pair.detection.right.len(),
        warnings: pair.detection.warnings.clone(),
        timings_ms: pair.detection.timings.clone(),
        config_hash: config_hash.to_string(),
    };
    let meta_path = root.join("meta").join(format!("{frame_id}.json"));
    let text = serde_json::to_vec_pretty(&meta).map_err(|source| Error::Json { path: meta_path.clone(), source })?;
    write_atomic(&meta_path, &text)
}
