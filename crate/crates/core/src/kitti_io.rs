//! KITTI sensor I/O: velodyne `.bin` frames, calibration text files, ring
//! reconstruction and camera-frustum cropping.
//!
//! Velodyne frames are headerless little-endian `f32` quadruples
//! `(x, y, z, intensity)`. They carry no ring ID, so rings are rebuilt per
//! frame by binning the vertical angle of every point.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Matrix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::Projector;

/// Bytes per velodyne record.
pub const RECORD_BYTES: usize = 16;
/// Ring count of the HDL-64E used by KITTI.
pub const DEFAULT_NUM_RINGS: u32 = 64;
/// KITTI color image size used when the calibration file does not carry one.
pub const DEFAULT_IMAGE_SIZE: (u32, u32) = (1242, 375);

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RawPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl RawPoint {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    #[inline]
    pub fn xyz(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }

    /// Horizontal distance to the sensor origin.
    #[inline]
    pub fn range_xy(&self) -> f64 {
        (self.x as f64).hypot(self.y as f64)
    }

    #[inline]
    pub fn azimuth(&self) -> f64 {
        (self.y as f64).atan2(self.x as f64)
    }

    #[inline]
    pub fn vertical_angle(&self) -> f64 {
        (self.z as f64).atan2(self.range_xy())
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Bitwise equality, used for provenance checks.
    pub fn bit_eq(&self, other: &RawPoint) -> bool {
        self.x.to_bits() == other.x.to_bits()
            && self.y.to_bits() == other.y.to_bits()
            && self.z.to_bits() == other.z.to_bits()
            && self.intensity.to_bits() == other.intensity.to_bits()
    }
}

/// A sensor frame with per-point ring IDs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<RawPoint>,
    pub ring_ids: Vec<u32>,
    pub num_rings: u32,
}

impl PointCloud {
    pub fn new(points: Vec<RawPoint>, ring_ids: Vec<u32>, num_rings: u32) -> Result<Self> {
        if points.len() != ring_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} points but {} ring ids",
                points.len(),
                ring_ids.len()
            )));
        }
        if let Some(&bad) = ring_ids.iter().find(|&&r| r >= num_rings) {
            return Err(Error::InvalidArgument(format!(
                "ring id {bad} out of range for {num_rings} rings"
            )));
        }
        Ok(Self {
            points,
            ring_ids,
            num_rings,
        })
    }

    /// Cloud with every point on ring 0.
    pub fn from_points(points: Vec<RawPoint>) -> Self {
        let n = points.len();
        Self {
            points,
            ring_ids: vec![0; n],
            num_rings: if n == 0 { 0 } else { 1 },
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud of the given indices, keeping ring IDs and ring count.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            ring_ids: indices.iter().map(|&i| self.ring_ids[i]).collect(),
            num_rings: self.num_rings,
        }
    }
}

/// Result of decoding a velodyne frame.
#[derive(Debug, Clone)]
pub struct VelodyneFrame {
    pub cloud: PointCloud,
    /// Records dropped because a coordinate was not finite.
    pub dropped_non_finite: usize,
}

/// Decode velodyne bytes. `path` is only used for error messages.
pub fn decode_velodyne(bytes: &[u8], path: &Path) -> Result<(Vec<RawPoint>, usize)> {
    let trailing = bytes.len() % RECORD_BYTES;
    if trailing != 0 {
        let offset = (bytes.len() - trailing) as u64;
        let unit = if trailing == 1 { "byte" } else { "bytes" };
        return Err(Error::BinaryParse {
            path: path.to_path_buf(),
            offset,
            message: format!("trailing {trailing} {unit}"),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    let mut dropped = 0;
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let f = |k: usize| f32::from_le_bytes([rec[k], rec[k + 1], rec[k + 2], rec[k + 3]]);
        let p = RawPoint::new(f(0), f(4), f(8), f(12));
        if !p.is_finite() {
            dropped += 1;
            continue;
        }
        let intensity = if p.intensity.is_finite() {
            p.intensity.clamp(0.0, 1.0)
        } else {
            0.0
        };
        points.push(RawPoint { intensity, ..p });
    }
    Ok((points, dropped))
}

pub fn encode_velodyne(points: &[RawPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * RECORD_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// How ring IDs are rebuilt for clouds that do not carry them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingAssignment {
    /// Uniform vertical-angle bins, see [`assign_ring_ids`].
    #[default]
    VerticalAngle,
    /// Azimuth wrap-arounds in storage order, see [`assign_ring_ids_scan_order`].
    ScanOrder,
}

impl RingAssignment {
    pub fn apply(self, cloud: PointCloud, num_rings: u32) -> PointCloud {
        match self {
            RingAssignment::VerticalAngle => assign_ring_ids(cloud, num_rings),
            RingAssignment::ScanOrder => assign_ring_ids_scan_order(cloud, num_rings),
        }
    }
}

/// Read a velodyne frame and rebuild rings with `num_rings` bins.
pub fn read_velodyne(path: &Path, num_rings: u32) -> Result<VelodyneFrame> {
    read_velodyne_with(path, num_rings, RingAssignment::VerticalAngle)
}

pub fn read_velodyne_with(path: &Path, num_rings: u32, method: RingAssignment) -> Result<VelodyneFrame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (points, dropped_non_finite) = decode_velodyne(&bytes, path)?;
    if dropped_non_finite > 0 {
        log::warn!(
            "{}: dropped {dropped_non_finite} points with non-finite coordinates",
            path.display()
        );
    }
    let cloud = method.apply(PointCloud::from_points(points), num_rings);
    Ok(VelodyneFrame {
        cloud,
        dropped_non_finite,
    })
}

/// Load a KITTI velodyne frame with the default 64-ring reconstruction.
pub fn load_point_cloud(path: &Path) -> Result<PointCloud> {
    read_velodyne(path, DEFAULT_NUM_RINGS).map(|f| f.cloud)
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_velodyne(&cloud.points))
        .map_err(|e| Error::io(path, e))
}

/// Rebuild ring IDs by quantizing each point's vertical angle.
///
/// The observed `[min, max]` vertical-angle span is divided into `num_rings`
/// uniformly spaced levels (both ends inclusive) and each point snaps to the
/// nearest level, so ring 0 is the lowest beam and `num_rings - 1` the highest.
pub fn assign_ring_ids(cloud: PointCloud, num_rings: u32) -> PointCloud {
    let num_rings = num_rings.max(1);
    let points = cloud.points;
    if points.is_empty() {
        return PointCloud::default();
    }
    let angles: Vec<f64> = points.iter().map(RawPoint::vertical_angle).collect();
    let (lo, hi) = angles
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
            (lo.min(a), hi.max(a))
        });
    let span = hi - lo;
    let ring_ids = if span <= 0.0 || num_rings == 1 {
        vec![0; points.len()]
    } else {
        let top = (num_rings - 1) as f64;
        angles
            .iter()
            .map(|&a| (((a - lo) / span) * top).round().clamp(0.0, top) as u32)
            .collect()
    };
    PointCloud {
        points,
        ring_ids,
        num_rings,
    }
}

/// Rebuild ring IDs from storage order. Scanners emit each laser's sweep in
/// azimuth order, so a new ring starts wherever the azimuth jumps back by more
/// than half a turn. The sweep direction is taken from the majority of small
/// steps. If more rings are found than `num_rings`, the count grows to fit.
pub fn assign_ring_ids_scan_order(cloud: PointCloud, num_rings: u32) -> PointCloud {
    let points = cloud.points;
    if points.is_empty() {
        return PointCloud::default();
    }
    let az: Vec<f64> = points.iter().map(RawPoint::azimuth).collect();
    let mut balance = 0i64;
    for w in az.windows(2) {
        let d = w[1] - w[0];
        if d.abs() < std::f64::consts::PI {
            balance += d.signum() as i64;
        }
    }
    let dir = if balance >= 0 { 1.0 } else { -1.0 };
    let mut ring = 0u32;
    let mut ring_ids = Vec::with_capacity(points.len());
    ring_ids.push(0);
    for w in az.windows(2) {
        if dir * (w[1] - w[0]) < -std::f64::consts::PI {
            ring += 1;
        }
        ring_ids.push(ring);
    }
    PointCloud {
        points,
        ring_ids,
        num_rings: num_rings.max(ring + 1),
    }
}

/// Rectified camera model plus the lidar extrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Rectified 3x4 camera matrix.
    pub projection: Matrix3x4<f64>,
    /// Rectifying rotation padded to 4x4.
    pub rect_rotation: Matrix4<f64>,
    /// Rigid lidar -> camera transform.
    pub lidar_to_cam: Matrix4<f64>,
    pub image_width: u32,
    pub image_height: u32,
}

impl Calibration {
    /// Build and validate. `rotation_tol` bounds the orthonormality error of
    /// the extrinsic rotation.
    pub fn new(
        projection: Matrix3x4<f64>,
        rect_rotation: Matrix4<f64>,
        lidar_to_cam: Matrix4<f64>,
        image_width: u32,
        image_height: u32,
        rotation_tol: f64,
    ) -> Result<Self> {
        let calib = Self {
            projection,
            rect_rotation,
            lidar_to_cam,
            image_width,
            image_height,
        };
        calib.validate(rotation_tol)?;
        Ok(calib)
    }

    /// Simple pinhole with the given intrinsics and extrinsic.
    pub fn pinhole(
        fu: f64,
        fv: f64,
        cu: f64,
        cv: f64,
        lidar_to_cam: Matrix4<f64>,
        image_width: u32,
        image_height: u32,
    ) -> Result<Self> {
        #[rustfmt::skip]
        let projection = Matrix3x4::new(
            fu, 0.0, cu, 0.0,
            0.0, fv, cv, 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        Self::new(
            projection,
            Matrix4::identity(),
            lidar_to_cam,
            image_width,
            image_height,
            1e-6,
        )
    }

    pub fn validate(&self, rotation_tol: f64) -> Result<()> {
        let r: Matrix3<f64> = self.lidar_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho_err = (r.transpose() * r - Matrix3::identity()).amax();
        if ortho_err > rotation_tol {
            return Err(Error::InvalidCalibration(format!(
                "lidar_to_cam rotation is not orthonormal (error {ortho_err:.3e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > rotation_tol {
            return Err(Error::InvalidCalibration(format!(
                "lidar_to_cam rotation has determinant {det:.6}"
            )));
        }
        let last = self.projection.row(2);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 1.0 || last[3] != 0.0 {
            return Err(Error::InvalidCalibration(format!(
                "projection row 3 must be [0 0 1 0], got {last}"
            )));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::InvalidCalibration("empty image size".into()));
        }
        Ok(())
    }

    /// Lidar -> rectified camera transform `R_rect * Tr`.
    pub fn lidar_to_rect(&self) -> Matrix4<f64> {
        self.rect_rotation * self.lidar_to_cam
    }

    /// Lidar -> image matrix `P * R_rect * Tr`.
    pub fn lidar_to_image(&self) -> Matrix3x4<f64> {
        self.projection * self.lidar_to_rect()
    }

    /// Serialize in the KITTI object-calibration text layout.
    pub fn to_kitti_text(&self, camera_key: &str) -> String {
        let row_major = |vals: Vec<f64>| {
            vals.iter()
                .map(|v| format!("{v:e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let p: Vec<f64> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| self.projection[(r, c)])
            .collect();
        let r0: Vec<f64> = (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .map(|(r, c)| self.rect_rotation[(r, c)])
            .collect();
        let tr: Vec<f64> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| self.lidar_to_cam[(r, c)])
            .collect();
        format!(
            "{camera_key}: {}\nR0_rect: {}\nTr_velo_to_cam: {}\nS_rect_02: {} {}\n",
            row_major(p),
            row_major(r0),
            row_major(tr),
            self.image_width,
            self.image_height
        )
    }
}

fn parse_values(path: &Path, line_no: usize, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| Error::TextParse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("not a number: {tok:?}"),
            })
        })
        .collect()
}

struct CalibEntry {
    line: usize,
    values: Vec<f64>,
}

fn take_matrix(
    entries: &std::collections::HashMap<String, CalibEntry>,
    path: &Path,
    key: &str,
    expected: usize,
) -> Result<Option<Vec<f64>>> {
    match entries.get(key) {
        None => Ok(None),
        Some(e) if e.values.len() != expected => Err(Error::TextParse {
            path: path.to_path_buf(),
            line: e.line,
            message: format!("{key} has {} values, expected {expected}", e.values.len()),
        }),
        Some(e) => Ok(Some(e.values.clone())),
    }
}

/// Parse a KITTI calibration file using camera matrix `P2`.
pub fn load_calibration(path: &Path) -> Result<Calibration> {
    load_calibration_for_camera(path, "P2")
}

/// Parse a KITTI calibration file, anchoring the image on `camera_key`.
///
/// Accepts the object layout (`R0_rect`, `Tr_velo_to_cam`) and the odometry
/// layout (`Tr`, no rectification). Image size comes from `S_rect_02` when
/// present, else the KITTI default.
pub fn load_calibration_for_camera(path: &Path, camera_key: &str) -> Result<Calibration> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            return Err(Error::TextParse {
                path: path.to_path_buf(),
                line: line_no,
                message: "expected `KEY: values`".into(),
            });
        };
        // calib_cam_to_cam has a non-numeric calib_time entry.
        if key.trim() == "calib_time" {
            continue;
        }
        let values = parse_values(path, line_no, rest)?;
        entries.insert(
            key.trim().to_string(),
            CalibEntry {
                line: line_no,
                values,
            },
        );
    }
    let missing = |key: &str| Error::MissingKey {
        path: path.to_path_buf(),
        key: key.to_string(),
    };

    let p = take_matrix(&entries, path, camera_key, 12)?.ok_or_else(|| missing(camera_key))?;
    let projection = Matrix3x4::from_row_slice(&p);

    let (tr, odometry) = match take_matrix(&entries, path, "Tr_velo_to_cam", 12)? {
        Some(tr) => (tr, false),
        None => match take_matrix(&entries, path, "Tr", 12)? {
            Some(tr) => (tr, true),
            None => return Err(missing("Tr_velo_to_cam")),
        },
    };
    let mut lidar_to_cam = Matrix4::identity();
    lidar_to_cam
        .fixed_view_mut::<3, 4>(0, 0)
        .copy_from(&Matrix3x4::from_row_slice(&tr));

    let mut rect_rotation = Matrix4::identity();
    match take_matrix(&entries, path, "R0_rect", 9)? {
        Some(r0) => rect_rotation
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&Matrix3::from_row_slice(&r0)),
        None if odometry => {}
        None => return Err(missing("R0_rect")),
    }

    let (w, h) = match entries.get("S_rect_02") {
        Some(e) if e.values.len() == 2 => (e.values[0].round() as u32, e.values[1].round() as u32),
        _ => DEFAULT_IMAGE_SIZE,
    };
    Calibration::new(projection, rect_rotation, lidar_to_cam, w, h, 1e-3)
}

/// Keep the points that project inside the image with positive depth.
pub fn crop_to_frustum(cloud: &PointCloud, calib: &Calibration) -> PointCloud {
    let projector = Projector::new(calib);
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| projector.project_in_image(&cloud.points[i]).is_some())
        .collect();
    cloud.select(&keep)
}

/// KITTI odometry-style sequence layout: `velodyne/NNNNNN.bin` plus either a
/// shared `calib.txt` or per-frame `calib/NNNNNN.txt`.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn velodyne_dir(&self) -> PathBuf {
        self.root.join("velodyne")
    }

    /// Frame IDs (file stems) of all `.bin` files, sorted.
    pub fn frame_ids(&self) -> Result<Vec<String>> {
        list_stems(&self.velodyne_dir(), "bin")
    }

    pub fn frame_path(&self, id: &str) -> PathBuf {
        self.velodyne_dir().join(format!("{id}.bin"))
    }

    /// Per-frame calibration when present, else the shared `calib.txt`.
    pub fn calib_path(&self, id: &str) -> Option<PathBuf> {
        let per_frame = self.root.join("calib").join(format!("{id}.txt"));
        if per_frame.is_file() {
            return Some(per_frame);
        }
        let shared = self.root.join("calib.txt");
        shared.is_file().then_some(shared)
    }
}

/// Write through a sibling temp file and rename, so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Sorted file stems with the given extension; a missing directory is empty.
pub fn list_stems(dir: &Path, extension: &str) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(extension) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
