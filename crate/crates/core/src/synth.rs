//! Ray-cast synthetic street scenes with known curb geometry.
//!
//! The road is the plane `z = -sensor_height` between two vertical curb
//! faces `y = c0 + c1 x + c2 x^2`; the sidewalks beyond are raised by
//! `curb_height`. Optional building walls and box obstacles complete the
//! scene.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Matrix4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam_classify::Side;
use crate::error::{Error, Result};
use crate::kitti_io::{write_point_cloud, Calibration, PointCloud, RawPoint};
use crate::postprocess::{BevGrid, BevSpec, Homography};
use crate::projection::Projector;

/// Lateral offset added to a curb's nominal position: `linear x + quadratic x^2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurbProfile {
    pub linear: f64,
    pub quadratic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxObstacle {
    pub center: [f64; 2],
    /// Length (along yaw), width, overall height above the road.
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    /// Gap between the road and the underside of the box.
    #[serde(default)]
    pub ground_clearance: f64,
}

impl BoxObstacle {
    pub fn parked_car(x: f64, y: f64) -> Self {
        Self { center: [x, y], size: [4.5, 1.8, 1.5], yaw: 0.0, ground_clearance: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub road_width: f64,
    pub curb_height: f64,
    /// Without curbs the road plane extends to the walls.
    pub curbs: bool,
    pub left_profile: CurbProfile,
    pub right_profile: CurbProfile,
    pub sidewalk_width: f64,
    /// Height of the building walls behind the sidewalks; 0 disables them.
    pub wall_height: f64,
    pub sensor_height: f64,
    pub rings: u32,
    /// Lowest and highest beam elevation, degrees.
    pub vertical_fov: [f64; 2],
    /// Horizontal step between firings, radians.
    pub azimuth_resolution: f64,
    pub max_range: f64,
    pub obstacles: Vec<BoxObstacle>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            road_width: 8.0,
            curb_height: 0.15,
            curbs: true,
            left_profile: CurbProfile::default(),
            right_profile: CurbProfile::default(),
            sidewalk_width: 3.0,
            wall_height: 4.0,
            sensor_height: 1.73,
            rings: 64,
            vertical_fov: [-24.8, 2.0],
            azimuth_resolution: 0.2f64.to_radians(),
            max_range: 80.0,
            obstacles: vec![BoxObstacle::parked_car(12.0, -2.8)],
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

/// Evaluation suite: even indices are straight roads, odd indices bend with
/// curvature `+0.002` (index % 4 == 1) or `-0.002`. All keep the default
/// parked car and noise; `seed` equals the index.
pub fn scene_suite(count: u64) -> Vec<SceneSpec> {
    (0..count)
        .map(|seed| {
            let mut spec = SceneSpec { seed, ..Default::default() };
            if seed % 2 == 1 {
                let q = if seed % 4 == 1 { 0.002 } else { -0.002 };
                spec.left_profile.quadratic = q;
                spec.right_profile.quadratic = q;
            }
            spec
        })
        .collect()
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.road_width > 0.0
            && self.curb_height > 0.0
            && self.curb_height < self.sensor_height
            && self.noise_sigma >= 0.0
            && self.sensor_height > 0.0
            && self.sidewalk_width > 0.0
            && self.wall_height >= 0.0
            && self.rings >= 1
            && self.vertical_fov[0] < self.vertical_fov[1]
            && self.azimuth_resolution > 0.0
            && self.max_range > 0.0
            && self
                .obstacles
                .iter()
                .all(|o| o.size.iter().all(|&s| s > 0.0) && o.ground_clearance >= 0.0 && o.ground_clearance < o.size[2]);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("invalid scene spec".into()))
        }
    }

    /// Curb line coefficients `[c0, c1, c2]` of one side.
    pub fn curb_coefficients(&self, side: Side) -> [f64; 3] {
        let (offset, p) = match side {
            Side::Left => (self.road_width / 2.0, self.left_profile),
            Side::Right => (-self.road_width / 2.0, self.right_profile),
        };
        [offset, p.linear, p.quadratic]
    }

    fn step(&self) -> f64 {
        if self.curbs {
            self.curb_height
        } else {
            0.0
        }
    }

    pub fn ring_elevations(&self) -> Vec<f64> {
        let [lo, hi] = self.vertical_fov;
        let n = self.rings;
        (0..n)
            .map(|k| {
                let t = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
                (lo + t * (hi - lo)).to_radians()
            })
            .collect()
    }

    pub fn azimuths(&self) -> Vec<f64> {
        let n = (2.0 * PI / self.azimuth_resolution).round() as usize;
        (0..n).map(|j| -PI + j as f64 * self.azimuth_resolution).collect()
    }
}

#[inline]
fn poly(c: [f64; 3], x: f64) -> f64 {
    c[0] + c[1] * x + c[2] * x * x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    Road,
    Sidewalk,
    CurbFace(Side),
    Wall,
    Obstacle(usize),
}

/// Exact curb line of one side with the span the sensor observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthCurb {
    pub side: Side,
    pub coefficients: [f64; 3],
    pub x_min: f64,
    pub x_max: f64,
    /// Height of the polyline (middle of the curb face), sensor frame.
    pub z: f64,
    pub polyline: Vec<[f64; 3]>,
    /// Per polyline vertex: no obstacle between the camera and the vertex.
    /// Empty means every vertex is visible.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub camera_visible: Vec<bool>,
}

impl GroundTruthCurb {
    pub fn lateral_at(&self, x: f64) -> f64 {
        poly(self.coefficients, x)
    }

    pub fn is_camera_visible(&self, vertex: usize) -> bool {
        self.camera_visible.get(vertex).copied().unwrap_or(true)
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub cloud: PointCloud,
    pub surfaces: Vec<Surface>,
    pub curbs: Vec<GroundTruthCurb>,
    pub calibration: Calibration,
}

/// KITTI-like front camera: 1242x375, f = 721.5 px, mounted 0.27 m ahead of
/// and 0.08 m below the lidar.
pub fn default_calibration() -> Calibration {
    #[rustfmt::skip]
    let extr = Matrix4::new(
        0.0, -1.0, 0.0, 0.0,
        0.0, 0.0, -1.0, -0.08,
        1.0, 0.0, 0.0, -0.27,
        0.0, 0.0, 0.0, 1.0,
    );
    Calibration::pinhole(721.5, 721.5, 609.6, 172.9, extr, 1242, 375).expect("valid built-in calibration")
}

/// Smallest positive root of `a t^2 + b t + c = 0` accepted by `keep`.
fn smallest_root(a: f64, b: f64, c: f64, keep: impl Fn(f64) -> bool) -> Option<f64> {
    let mut roots = [f64::NAN; 2];
    if a.abs() < 1e-12 {
        if b.abs() > 1e-15 {
            roots[0] = -c / b;
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        roots[0] = q / a;
        roots[1] = if q != 0.0 { c / q } else { f64::NAN };
    }
    roots
        .into_iter()
        .filter(|t| t.is_finite() && *t > 1e-9 && keep(*t))
        .min_by(f64::total_cmp)
}

/// Intersection of the ray `t d` with the vertical surface
/// `y = poly(coeffs, x)` inside `z_range`.
fn hit_vertical(d: [f64; 3], coeffs: [f64; 3], z_range: (f64, f64)) -> Option<f64> {
    let a = coeffs[2] * d[0] * d[0];
    let b = coeffs[1] * d[0] - d[1];
    smallest_root(a, b, coeffs[0], |t| {
        let z = t * d[2];
        z >= z_range.0 && z <= z_range.1
    })
}

fn hit_box(d: [f64; 3], o: &BoxObstacle, ground: f64) -> Option<f64> {
    hit_box_from([0.0; 3], d, o, ground)
}

/// Ray `origin + t d` against a box; smallest positive `t`.
fn hit_box_from(origin: [f64; 3], d: [f64; 3], o: &BoxObstacle, ground: f64) -> Option<f64> {
    let (s, c) = o.yaw.sin_cos();
    // ray in the box frame, rotated by -yaw
    let (ox, oy) = (origin[0] - o.center[0], origin[1] - o.center[1]);
    let org = [c * ox + s * oy, -s * ox + c * oy, origin[2]];
    let dir = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let lo = [-o.size[0] / 2.0, -o.size[1] / 2.0, ground + o.ground_clearance];
    let hi = [o.size[0] / 2.0, o.size[1] / 2.0, ground + o.size[2]];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if dir[k].abs() < 1e-15 {
            if org[k] < lo[k] || org[k] > hi[k] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[k] - org[k]) / dir[k], (hi[k] - org[k]) / dir[k]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t0 > t1 || t1 <= 1e-9 {
        return None;
    }
    Some(if t0 > 1e-9 { t0 } else { t1 })
}

/// First surface hit by the unit ray `d` from the sensor, if any.
pub fn cast_ray(spec: &SceneSpec, d: [f64; 3]) -> Option<(f64, Surface)> {
    let ground = -spec.sensor_height;
    let step = spec.step();
    let left = spec.curb_coefficients(Side::Left);
    let right = spec.curb_coefficients(Side::Right);
    let mut best: Option<(f64, Surface)> = None;
    let mut offer = |t: f64, s: Surface| {
        if best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, s));
        }
    };

    if d[2] < 0.0 {
        let t = ground / d[2];
        let (x, y) = (t * d[0], t * d[1]);
        let on_road = !spec.curbs || (y <= poly(left, x) && y >= poly(right, x));
        if on_road {
            offer(t, Surface::Road);
        }
        if spec.curbs {
            let t = (ground + step) / d[2];
            let (x, y) = (t * d[0], t * d[1]);
            if y > poly(left, x) || y < poly(right, x) {
                offer(t, Surface::Sidewalk);
            }
        }
    }
    if spec.curbs {
        for (side, coeffs) in [(Side::Left, left), (Side::Right, right)] {
            if let Some(t) = hit_vertical(d, coeffs, (ground, ground + step)) {
                offer(t, Surface::CurbFace(side));
            }
        }
    }
    if spec.wall_height > 0.0 {
        for (sign, coeffs) in [(1.0, left), (-1.0, right)] {
            let shifted = [coeffs[0] + sign * spec.sidewalk_width, coeffs[1], coeffs[2]];
            if let Some(t) = hit_vertical(d, shifted, (ground + step, ground + step + spec.wall_height)) {
                offer(t, Surface::Wall);
            }
        }
    }
    for (k, o) in spec.obstacles.iter().enumerate() {
        if let Some(t) = hit_box(d, o, ground) {
            offer(t, Surface::Obstacle(k));
        }
    }
    best.filter(|(t, _)| {
        let horiz = t * (d[0] * d[0] + d[1] * d[1]).sqrt();
        horiz <= spec.max_range
    })
}

/// Sample one frame: every (ring, azimuth) firing that hits something
/// yields a point, ordered ring-major then by azimuth.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let elevations = spec.ring_elevations();
    let azimuths = spec.azimuths();
    let hits: Vec<Vec<([f64; 3], Surface)>> = elevations
        .par_iter()
        .map(|&el| {
            let (se, ce) = el.sin_cos();
            azimuths
                .iter()
                .filter_map(|&az| {
                    let (sa, ca) = az.sin_cos();
                    let d = [ce * ca, ce * sa, se];
                    cast_ray(spec, d).map(|(t, s)| ([t * d[0], t * d[1], t * d[2]], s))
                })
                .collect()
        })
        .collect();

    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::new();
    let mut rings = Vec::new();
    let mut surfaces = Vec::new();
    let mut face_x: [Option<(f64, f64)>; 2] = [None, None];
    for (ring, ring_hits) in hits.into_iter().enumerate() {
        for (p, s) in ring_hits {
            let dz = if spec.noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            points.push(RawPoint::new(p[0] as f32, p[1] as f32, (p[2] + dz) as f32, 0.0));
            rings.push(ring as u32);
            surfaces.push(s);
            if let Surface::CurbFace(side) = s {
                let slot = &mut face_x[(side == Side::Right) as usize];
                *slot = Some(match *slot {
                    None => (p[0], p[0]),
                    Some((lo, hi)) => (lo.min(p[0]), hi.max(p[0])),
                });
            }
        }
    }
    let cloud = PointCloud::new(points, rings, spec.rings)?;

    let calibration = default_calibration();
    let camera = camera_center(&calibration);
    let z = -spec.sensor_height + spec.step() / 2.0;
    let curbs = [Side::Left, Side::Right]
        .into_iter()
        .zip(face_x)
        .filter_map(|(side, span)| {
            let (x_min, x_max) = span?;
            let coefficients = spec.curb_coefficients(side);
            let n = ((x_max - x_min) / 0.1).ceil().max(1.0) as usize;
            let polyline: Vec<[f64; 3]> = (0..=n)
                .map(|k| {
                    let x = x_min + (x_max - x_min) * k as f64 / n as f64;
                    [x, poly(coefficients, x), z]
                })
                .collect();
            let camera_visible = polyline.iter().map(|p| !occluded(spec, camera, *p)).collect();
            Some(GroundTruthCurb { side, coefficients, x_min, x_max, z, polyline, camera_visible })
        })
        .collect();

    Ok(Scene { cloud, surfaces, curbs, calibration })
}

/// Camera optical center in the sensor frame.
pub fn camera_center(calib: &Calibration) -> [f64; 3] {
    let m = calib.lidar_to_cam;
    let r = m.fixed_view::<3, 3>(0, 0);
    let t = m.fixed_view::<3, 1>(0, 3);
    let c = -(r.transpose() * t);
    [c[0], c[1], c[2]]
}

/// True when an obstacle box blocks the segment from `eye` to `target`.
fn occluded(spec: &SceneSpec, eye: [f64; 3], target: [f64; 3]) -> bool {
    let d = [target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]];
    let ground = -spec.sensor_height;
    spec.obstacles
        .iter()
        .any(|o| hit_box_from(eye, d, o, ground).is_some_and(|t| t < 1.0))
}

/// How ground-truth polylines reach the BEV raster.
#[derive(Debug, Clone, Copy)]
pub enum GtProjection<'a> {
    /// Drop z and place `(x, y)` by the BEV metric convention.
    Metric,
    /// Project into the camera image, keep visible samples, then map with
    /// the image -> BEV homography.
    Image { calib: &'a Calibration, homography: &'a Homography },
}

/// 8-connected line between two pixels.
pub fn draw_line(grid: &mut BevGrid, from: (i64, i64), to: (i64, i64), value: u32) {
    let (mut x, mut y) = from;
    let (dx, dy) = ((to.0 - x).abs(), -(to.1 - y).abs());
    let (sx, sy) = (if x < to.0 { 1 } else { -1 }, if y < to.1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        grid.set_checked(x, y, value);
        if (x, y) == to {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub fn ground_truth_bev(curbs: &[GroundTruthCurb], bev: &BevSpec, mode: GtProjection<'_>) -> BevGrid {
    let mut grid = BevGrid::from_spec(bev);
    let projector = match mode {
        GtProjection::Image { calib, .. } => Some(Projector::new(calib)),
        GtProjection::Metric => None,
    };
    // generous clip so lines entering the raster are drawn
    let limit = 4.0 * (bev.width + bev.height) as f64;
    for curb in curbs {
        let mut prev: Option<(i64, i64)> = None;
        for (k, p) in curb.polyline.iter().enumerate() {
            let px = match mode {
                GtProjection::Metric => Some(bev.metric_to_pixel(p[0], p[1])),
                GtProjection::Image { homography, .. } => projector
                    .as_ref()
                    .filter(|_| curb.is_camera_visible(k))
                    .and_then(|pr| pr.project_xyz(*p).filter(|s| pr.in_image(s)))
                    .and_then(|s| homography.apply(s.u, s.v)),
            };
            let cur = px
                .filter(|(c, r)| c.abs() < limit && r.abs() < limit)
                .map(|(c, r)| (c.round() as i64, r.round() as i64));
            match (prev, cur) {
                (Some(a), Some(b)) => draw_line(&mut grid, a, b, 1),
                (None, Some(b)) => draw_line(&mut grid, b, b, 1),
                _ => {}
            }
            prev = cur;
        }
    }
    grid
}

/// Write a frame as `velodyne/ID.bin`, `calib/ID.txt`, `ground_truth/ID.json`.
pub fn write_scene(root: &Path, frame_id: &str, scene: &Scene) -> Result<()> {
    for sub in ["velodyne", "calib", "ground_truth"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    write_point_cloud(&root.join("velodyne").join(format!("{frame_id}.bin")), &scene.cloud)?;
    let calib_path = root.join("calib").join(format!("{frame_id}.txt"));
    std::fs::write(&calib_path, scene.calibration.to_kitti_text("P2")).map_err(|e| Error::io(&calib_path, e))?;
    let gt_path = root.join("ground_truth").join(format!("{frame_id}.json"));
    let text = serde_json::to_string_pretty(&scene.curbs).map_err(|source| Error::Json { path: gt_path.clone(), source })?;
    std::fs::write(&gt_path, text).map_err(|e| Error::io(&gt_path, e))
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthCurb>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}
