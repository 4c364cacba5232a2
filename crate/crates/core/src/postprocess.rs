//! Perspective mask to bird's-eye view, per-row candidates and quadratic
//! curve fitting.
//!
//! BEV pixel convention: column `W/2 - y/res`, row `H - x/res`, with `(x, y)`
//! metric ground coordinates in the sensor frame. Rows grow towards the
//! vehicle; the left road side has columns below `W/2`.

use std::collections::BTreeMap;
use std::path::Path;

use image::{GrayImage, Luma};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kitti_io::Calibration;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevSpec {
    pub width: usize,
    pub height: usize,
    /// Meters per pixel.
    pub resolution: f64,
}

impl Default for BevSpec {
    fn default() -> Self {
        Self { width: 400, height: 800, resolution: 0.05 }
    }
}

impl BevSpec {
    /// Continuous BEV coordinates `(col, row)` of a ground point.
    pub fn metric_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.width as f64 / 2.0 - y / self.resolution,
            self.height as f64 - x / self.resolution,
        )
    }

    pub fn pixel_to_metric(&self, col: f64, row: f64) -> (f64, f64) {
        (
            (self.height as f64 - row) * self.resolution,
            (self.width as f64 / 2.0 - col) * self.resolution,
        )
    }

    /// Affine map from metric ground `(x, y, 1)` to BEV pixels.
    pub fn metric_matrix(&self) -> Matrix3<f64> {
        let r = self.resolution;
        Matrix3::new(
            0.0, -1.0 / r, self.width as f64 / 2.0,
            -1.0 / r, 0.0, self.height as f64,
            0.0, 0.0, 1.0,
        )
    }
}

/// Raster with 0 as background; positive values are foreground or instance
/// labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BevGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u32>,
}

impl BevGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0; width * height] }
    }

    pub fn from_spec(spec: &BevSpec) -> Self {
        Self::new(spec.width, spec.height)
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> u32 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: u32) {
        self.values[row * self.width + col] = value;
    }

    /// Set `(col, row)` if it falls inside the grid.
    pub fn set_checked(&mut self, col: i64, row: i64, value: u32) -> bool {
        if col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height {
            self.set(col as usize, row as usize, value);
            true
        } else {
            false
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_binary_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |c, r| {
            Luma([if self.get(c as usize, r as usize) != 0 { 255 } else { 0 }])
        })
    }

    pub fn from_image(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            values: img.as_raw().iter().map(|&p| u32::from(p != 0)).collect(),
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_binary_image()
            .save(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

pub fn read_mask_png(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_luma8())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub matrix: Matrix3<f64>,
}

impl Homography {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        let det = matrix.determinant();
        if !det.is_finite() || det.abs() <= 1e-12 * matrix.norm().powi(3).max(1e-300) {
            return Err(Error::InvalidArgument(format!("singular homography (det {det:e})")));
        }
        let s = matrix[(2, 2)];
        let m = if s.abs() > 1e-12 * matrix.norm() { matrix / s } else { matrix };
        Ok(Self { matrix: m })
    }

    pub fn identity() -> Self {
        Self { matrix: Matrix3::identity() }
    }

    /// Map `(u, v)`; `None` for points sent to infinity or behind the
    /// projective horizon.
    #[inline]
    pub fn apply(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        let p = self.matrix * Vector3::new(u, v, 1.0);
        if p.z.abs() < 1e-12 {
            return None;
        }
        Some((p.x / p.z, p.y / p.z))
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("homography not invertible".into()))?;
        Self::new(inv)
    }

    /// `other` applied after `self`.
    pub fn then(&self, other: &Homography) -> Result<Self> {
        Self::new(other.matrix * self.matrix)
    }
}

fn collinear(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let scale = ((b[0] - a[0]).hypot(b[1] - a[1]) * (c[0] - a[0]).hypot(c[1] - a[1])).max(1e-300);
    cross.abs() <= 1e-9 * scale
}

fn any_three_collinear(q: &[[f64; 2]; 4]) -> bool {
    [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
        .iter()
        .any(|&(i, j, k)| collinear(q[i], q[j], q[k]))
}

/// Homography taking each `src[i]` to `dst[i]`.
pub fn ipm_from_correspondences(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<Homography> {
    if any_three_collinear(src) || any_three_collinear(dst) {
        return Err(Error::CollinearCorrespondences);
    }
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ([x, y], [u, v]) = (src[i], dst[i]);
        let r = 2 * i;
        a.set_row(r, &SMatrix::<f64, 1, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(r + 1, &SMatrix::<f64, 1, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b).ok_or(Error::CollinearCorrespondences)?;
    Homography::new(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

/// Ground plane `z = ground_height` (sensor frame) to image, as a 3x3 map
/// from metric `(x, y, 1)` to homogeneous pixels.
pub fn ground_to_image(calib: &Calibration, ground_height: f64) -> Matrix3<f64> {
    let p = calib.lidar_to_image();
    Matrix3::from_columns(&[
        p.column(0).into_owned(),
        p.column(1).into_owned(),
        p.column(2) * ground_height + p.column(3),
    ])
}

/// Perspective image -> BEV homography under the flat-ground assumption.
pub fn ipm_from_calibration(calib: &Calibration, bev: &BevSpec, ground_height: f64) -> Result<Homography> {
    let m = ground_to_image(calib, ground_height);
    let det = m.determinant();
    if det.abs() <= 1e-12 * m.norm().powi(3) {
        return Err(Error::InvalidArgument("camera center lies on the ground plane".into()));
    }
    let inv = m.try_inverse().ok_or_else(|| Error::InvalidArgument("ground map not invertible".into()))?;
    Homography::new(bev.metric_matrix() * inv)
}

/// Generic nearest-neighbor inverse warp of a row-major raster, mapping
/// each sampled value through `f`.
fn warp_values<T: Copy + Sync, U: Copy + Default + Send>(
    src: &[T],
    src_w: usize,
    src_h: usize,
    h: &Homography,
    dst_w: usize,
    dst_h: usize,
    f: impl Fn(T) -> U + Sync,
) -> Result<Vec<U>> {
    let m = h.inverse()?.matrix;
    let (sw, sh) = (src_w as f64, src_h as f64);
    let mut out = vec![U::default(); dst_w * dst_h];
    out.par_chunks_mut(dst_w.max(1)).enumerate().for_each(|(r, row)| {
        let r = r as f64;
        let (bx, by, bz) = (m[(0, 1)] * r + m[(0, 2)], m[(1, 1)] * r + m[(1, 2)], m[(2, 1)] * r + m[(2, 2)]);
        for (c, px) in row.iter_mut().enumerate() {
            let c = c as f64;
            let z = m[(2, 0)] * c + bz;
            if z.abs() < 1e-12 {
                continue;
            }
            let iz = 1.0 / z;
            // Shifted by half a pixel so truncation rounds to nearest.
            let u = (m[(0, 0)] * c + bx) * iz + 0.5;
            let v = (m[(1, 0)] * c + by) * iz + 0.5;
            if u >= 0.0 && v >= 0.0 && u < sw && v < sh {
                *px = f(src[v as usize * src_w + u as usize]);
            }
        }
    });
    Ok(out)
}

/// Inverse-warp a perspective mask into a binary BEV grid.
pub fn warp_to_bev(mask: &GrayImage, h: &Homography, bev: &BevSpec) -> Result<BevGrid> {
    let (w, ht) = mask.dimensions();
    let values = warp_values(mask.as_raw(), w as usize, ht as usize, h, bev.width, bev.height, |p| u32::from(p != 0))?;
    Ok(BevGrid { width: bev.width, height: bev.height, values })
}

/// Inverse-warp a grid, keeping label values.
pub fn warp_grid(grid: &BevGrid, h: &Homography, width: usize, height: usize) -> Result<BevGrid> {
    let values = warp_values(&grid.values, grid.width, grid.height, h, width, height, |v| v)?;
    Ok(BevGrid { width, height, values })
}

/// 8-connected components of the nonzero pixels. Labels start at 1 in
/// raster order of each component's first pixel.
pub fn connected_components(grid: &BevGrid) -> (Vec<u32>, u32) {
    let (w, h) = (grid.width, grid.height);
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if grid.values[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (c, r) = ((i % w) as i64, (i / w) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nc, nr) = (c + dc, r + dr);
                    if nc < 0 || nr < 0 || nc >= w as i64 || nr >= h as i64 {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if grid.values[j] != 0 && labels[j] == 0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidateConfig {
    /// Same-side components closer than this many rows form one instance.
    pub max_row_gap: usize,
    /// Instances spanning fewer rows are dropped.
    pub min_instance_rows: usize,
    /// Keep only the longest instances per road side (0 keeps all).
    pub max_instances_per_side: usize,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self { max_row_gap: 160, min_instance_rows: 10, max_instances_per_side: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub instance: usize,
    pub row: usize,
    pub col: f64,
}

struct Component {
    pixels: Vec<(usize, usize)>,
    row_min: usize,
    row_max: usize,
    left: bool,
}

fn median_sorted(v: &[usize]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// One candidate per instance and occupied row, at the median column.
///
/// Instances come from the grid's own labels when it carries more than one
/// label value, otherwise from 8-connected components merged per side.
pub fn select_candidates(bev: &BevGrid, cfg: &CandidateConfig) -> Vec<Candidate> {
    let max_label = bev.values.iter().copied().max().unwrap_or(0);
    let (labels, count) = if max_label > 1 {
        (bev.values.clone(), max_label)
    } else {
        connected_components(bev)
    };
    if count == 0 {
        return Vec::new();
    }
    let mut comps: Vec<Component> = (0..count)
        .map(|_| Component { pixels: Vec::new(), row_min: usize::MAX, row_max: 0, left: false })
        .collect();
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let c = &mut comps[l as usize - 1];
        let (col, row) = (i % bev.width, i / bev.width);
        c.pixels.push((row, col));
        c.row_min = c.row_min.min(row);
        c.row_max = c.row_max.max(row);
    }
    comps.retain(|c| !c.pixels.is_empty());
    for c in comps.iter_mut() {
        let mut cols: Vec<usize> = c.pixels.iter().map(|p| p.1).collect();
        cols.sort_unstable();
        c.left = median_sorted(&cols) < bev.width as f64 / 2.0;
    }

    let mut instances: Vec<Component> = Vec::new();
    if max_label > 1 {
        instances = comps;
    } else {
        comps.sort_by_key(|c| (c.row_min, c.row_max));
        for c in comps {
            let slot = instances.iter_mut().find(|g| {
                let gap = c.row_min.saturating_sub(g.row_max).max(g.row_min.saturating_sub(c.row_max));
                g.left == c.left && gap <= cfg.max_row_gap
            });
            match slot {
                Some(g) => {
                    g.row_min = g.row_min.min(c.row_min);
                    g.row_max = g.row_max.max(c.row_max);
                    g.pixels.extend(c.pixels);
                }
                None => instances.push(c),
            }
        }
    }

    let mut per_instance: Vec<(bool, Vec<(usize, f64)>)> = instances
        .into_iter()
        .map(|inst| {
            let mut rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (r, c) in inst.pixels {
                rows.entry(r).or_default().push(c);
            }
            let cands = rows
                .into_iter()
                .map(|(r, mut cols)| {
                    cols.sort_unstable();
                    (r, median_sorted(&cols))
                })
                .collect();
            (inst.left, cands)
        })
        .filter(|(_, c): &(bool, Vec<(usize, f64)>)| c.len() >= cfg.min_instance_rows.max(1))
        .collect();

    if cfg.max_instances_per_side > 0 {
        let mut kept = Vec::new();
        for side in [true, false] {
            let mut group: Vec<_> = per_instance.iter().filter(|p| p.0 == side).cloned().collect();
            // longest first, ties by first row
            group.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.1[0].0.cmp(&b.1[0].0)));
            group.truncate(cfg.max_instances_per_side);
            kept.extend(group);
        }
        per_instance = kept;
    }
    // left instances first, then by first row
    per_instance.sort_by(|a, b| b.0.cmp(&a.0).then(a.1[0].0.cmp(&b.1[0].0)));
    per_instance
        .into_iter()
        .enumerate()
        .flat_map(|(k, (_, cands))| {
            cands.into_iter().map(move |(row, col)| Candidate { instance: k, row, col })
        })
        .collect()
}

/// `u(v) = a v^2 + b v + c` over rows `v_min..=v_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCurve {
    pub instance: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub v_min: usize,
    pub v_max: usize,
}

impl QuadraticCurve {
    #[inline]
    pub fn eval(&self, v: f64) -> f64 {
        (self.a * v + self.b) * v + self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// The quadratic system was near-singular and a line was fitted instead.
    pub linear_fallback: bool,
}

/// Least-squares `u = a v^2 + b v + c` over `(v, u)` samples.
pub fn fit_quadratic(samples: &[(f64, f64)]) -> Result<QuadraticFit> {
    let mut rows: Vec<f64> = samples.iter().map(|s| s.0).collect();
    rows.sort_by(f64::total_cmp);
    rows.dedup();
    if rows.len() < 3 {
        return Err(Error::Underdetermined(rows.len()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let scale = samples.iter().map(|s| (s.0 - mean).abs()).fold(0.0, f64::max);
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for &(v, u) in samples {
        let t = (v - mean) / scale;
        let basis = Vector3::new(t * t, t, 1.0);
        ata += basis * basis.transpose();
        atb += basis * u;
    }
    let (alpha, beta, gamma, linear_fallback) = match solve_spd3(&ata, &atb) {
        Some(x) => (x[0], x[1], x[2], false),
        None => {
            log::warn!("quadratic fit near-singular, using a line");
            let (s_tt, s_t, s_1) = (ata[(1, 1)], ata[(1, 2)], ata[(2, 2)]);
            let det = s_tt * s_1 - s_t * s_t;
            let beta = (s_1 * atb[1] - s_t * atb[2]) / det;
            let gamma = (s_tt * atb[2] - s_t * atb[1]) / det;
            (0.0, beta, gamma, true)
        }
    };
    let s2 = scale * scale;
    Ok(QuadraticFit {
        a: alpha / s2,
        b: -2.0 * alpha * mean / s2 + beta / scale,
        c: alpha * mean * mean / s2 - beta * mean / scale + gamma,
        linear_fallback,
    })
}

fn solve_spd3(a: &Matrix3<f64>, b: &Vector3<f64>) -> Option<Vector3<f64>> {
    // reject systems whose normalized Gram matrix is numerically singular
    let d = Vector3::new(a[(0, 0)].sqrt(), a[(1, 1)].sqrt(), a[(2, 2)].sqrt());
    if d.iter().any(|&x| x <= 0.0) {
        return None;
    }
    let norm = Matrix3::from_fn(|i, j| a[(i, j)] / (d[i] * d[j]));
    if norm.determinant() < 1e-12 {
        return None;
    }
    a.cholesky().map(|c| c.solve(b))
}

/// Fit one curve per instance. Instances with fewer than three distinct rows
/// are skipped.
pub fn fit_instances(candidates: &[Candidate]) -> (Vec<QuadraticCurve>, Vec<String>) {
    let mut groups: BTreeMap<usize, Vec<&Candidate>> = BTreeMap::new();
    for c in candidates {
        groups.entry(c.instance).or_default().push(c);
    }
    let mut curves = Vec::new();
    let mut warnings = Vec::new();
    for (instance, cands) in groups {
        let samples: Vec<(f64, f64)> = cands.iter().map(|c| (c.row as f64, c.col)).collect();
        match fit_quadratic(&samples) {
            Ok(fit) => {
                if fit.linear_fallback {
                    warnings.push(format!("instance {instance}: linear fallback"));
                }
                curves.push(QuadraticCurve {
                    instance,
                    a: fit.a,
                    b: fit.b,
                    c: fit.c,
                    v_min: cands.iter().map(|c| c.row).min().unwrap_or(0),
                    v_max: cands.iter().map(|c| c.row).max().unwrap_or(0),
                });
            }
            Err(e) => warnings.push(format!("instance {instance}: {e}")),
        }
    }
    (curves, warnings)
}

/// One pixel per row over each curve's row range.
pub fn rasterize_curves(curves: &[QuadraticCurve], bev: &BevSpec) -> BevGrid {
    let mut grid = BevGrid::from_spec(bev);
    for curve in curves {
        let hi = curve.v_max.min(bev.height.saturating_sub(1));
        for v in curve.v_min..=hi {
            let u = curve.eval(v as f64).round();
            if u.is_finite() {
                grid.set_checked(u as i64, v as i64, 1);
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub bev: BevSpec,
    /// Ground plane height in the sensor frame.
    pub ground_height: f64,
    pub candidates: CandidateConfig,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { bev: BevSpec::default(), ground_height: -1.73, candidates: CandidateConfig::default() }
    }
}

/// Every intermediate of the mask -> curves chain.
#[derive(Debug, Clone)]
pub struct PostprocessOutput {
    pub bev: BevGrid,
    pub candidates: Vec<Candidate>,
    pub curves: Vec<QuadraticCurve>,
    pub rasterized: BevGrid,
    pub warnings: Vec<String>,
}

pub fn postprocess_mask(mask: &GrayImage, h: &Homography, cfg: &PostprocessConfig) -> Result<PostprocessOutput> {
    let bev = warp_to_bev(mask, h, &cfg.bev)?;
    let candidates = select_candidates(&bev, &cfg.candidates);
    let (curves, warnings) = fit_instances(&candidates);
    let rasterized = rasterize_curves(&curves, &cfg.bev);
    Ok(PostprocessOutput { bev, candidates, curves, rasterized, warnings })
}

pub fn candidates_csv(candidates: &[Candidate]) -> String {
    let mut out = String::from("instance,row,col\n");
    for c in candidates {
        out.push_str(&format!("{},{},{}\n", c.instance, c.row, c.col));
    }
    out
}

pub fn write_curves_json(path: &Path, curves: &[QuadraticCurve]) -> Result<()> {
    let text = serde_json::to_string_pretty(curves).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kitti_like() -> Calibration {
        let extr = Matrix4::new(
            0.0, -1.0, 0.0, 0.0,
            0.0, 0.0, -1.0, -0.08,
            1.0, 0.0, 0.0, -0.27,
            0.0, 0.0, 0.0, 1.0,
        );
        Calibration::pinhole(721.5, 721.5, 609.6, 172.9, extr, 1242, 375).unwrap()
    }

    #[test]
    fn identity_and_scaling_correspondences() {
        let q = [[0.0, 0.0], [10.0, 0.0], [10.0, 7.0], [0.0, 7.0]];
        let h = ipm_from_correspondences(&q, &q).unwrap();
        assert!((h.matrix - Matrix3::identity()).abs().max() < 1e-12);
        let d = q.map(|p| [2.0 * p[0], 2.0 * p[1]]);
        let h = ipm_from_correspondences(&q, &d).unwrap();
        assert!((h.matrix - Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn collinear_rejected() {
        let src = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 5.0]];
        let dst = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(matches!(ipm_from_correspondences(&src, &dst), Err(Error::CollinearCorrespondences)));
        assert!(matches!(ipm_from_correspondences(&dst, &src), Err(Error::CollinearCorrespondences)));
    }

    #[test]
    fn random_quads_map_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tested = 0;
        while tested < 50 {
            let mut quad = || -> [[f64; 2]; 4] {
                // perturbed square keeps quads convex and non-degenerate
                let base = [[0.0, 0.0], [100.0, 0.0], [100.0, 100.0], [0.0, 100.0]];
                base.map(|p| [p[0] + rng.random_range(-20.0..20.0), p[1] + rng.random_range(-20.0..20.0)])
            };
            let (src, dst) = (quad(), quad());
            let h = ipm_from_correspondences(&src, &dst).unwrap();
            for i in 0..4 {
                let (u, v) = h.apply(src[i][0], src[i][1]).unwrap();
                assert!((u - dst[i][0]).abs() <= 1e-6 && (v - dst[i][1]).abs() <= 1e-6);
            }
            tested += 1;
        }
    }

    #[test]
    fn calibration_ipm_ground_point() {
        let calib = kitti_like();
        let bev = BevSpec::default();
        let h = ipm_from_calibration(&calib, &bev, -1.73).unwrap();
        let s = crate::projection::project_point(&calib, [10.0, 0.0, -1.73]).unwrap();
        let (c, r) = h.apply(s.u, s.v).unwrap();
        assert!((c - 200.0).abs() < 1e-6 && (r - (800.0 - 200.0)).abs() < 1e-6, "{c} {r}");
    }

    #[test]
    fn ground_height_shift_is_consistent() {
        // identity extrinsics: camera looks down +z, ground planes are z = const
        let calib = Calibration::pinhole(500.0, 500.0, 320.0, 240.0, Matrix4::identity(), 640, 480).unwrap();
        let bev = BevSpec { width: 400, height: 400, resolution: 0.01 };
        for gh in [2.0, 3.0] {
            let h = ipm_from_calibration(&calib, &bev, gh).unwrap();
            for &(x, y) in &[(0.3, -0.2), (-0.5, 0.4), (0.1, 0.1)] {
                let s = crate::projection::project_point(&calib, [x, y, gh]).unwrap();
                let (c, r) = h.apply(s.u, s.v).unwrap();
                let (ec, er) = bev.metric_to_pixel(x, y);
                assert!((c - ec).abs() < 1e-6 && (r - er).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn calibration_ipm_matches_correspondences() {
        let calib = kitti_like();
        let bev = BevSpec::default();
        let h = ipm_from_calibration(&calib, &bev, -1.73).unwrap();
        let ground = [[8.0, 3.0], [8.0, -3.0], [30.0, -5.0], [30.0, 5.0]];
        let mut src = [[0.0; 2]; 4];
        let mut dst = [[0.0; 2]; 4];
        for i in 0..4 {
            let s = crate::projection::project_point(&calib, [ground[i][0], ground[i][1], -1.73]).unwrap();
            src[i] = [s.u, s.v];
            let (c, r) = bev.metric_to_pixel(ground[i][0], ground[i][1]);
            dst[i] = [c, r];
        }
        let h2 = ipm_from_correspondences(&src, &dst).unwrap();
        let mut worst: f64 = 0.0;
        for v in (180..375).step_by(13) {
            for u in (0..1242).step_by(37) {
                let a = h.apply(u as f64, v as f64).unwrap();
                let b = h2.apply(u as f64, v as f64).unwrap();
                worst = worst.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
            }
        }
        assert!(worst <= 1e-6, "max deviation {worst}");
    }

    #[test]
    fn warp_identity_and_empty() {
        let mut img = GrayImage::new(40, 30);
        img.put_pixel(5, 7, Luma([255]));
        img.put_pixel(39, 29, Luma([1]));
        let spec = BevSpec { width: 40, height: 30, resolution: 0.05 };
        let out = warp_to_bev(&img, &Homography::identity(), &spec).unwrap();
        assert_eq!(out, BevGrid::from_image(&img));
        let empty = warp_to_bev(&GrayImage::new(40, 30), &Homography::identity(), &spec).unwrap();
        assert_eq!(empty.count_nonzero(), 0);
    }

    #[test]
    fn warp_scaled_blob_centroid() {
        let mut img = GrayImage::new(100, 100);
        for y in 20..25 {
            for x in 30..35 {
                img.put_pixel(x, y, Luma([255]));
            }
        }
        let h = Homography::new(Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 1.0))).unwrap();
        let spec = BevSpec { width: 200, height: 200, resolution: 0.05 };
        let out = warp_to_bev(&img, &h, &spec).unwrap();
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for r in 0..200 {
            for c in 0..200 {
                if out.get(c, r) != 0 {
                    sx += c as f64;
                    sy += r as f64;
                    n += 1.0;
                }
            }
        }
        assert!((sx / n - 64.0).abs() <= 1.0 && (sy / n - 44.0).abs() <= 1.0, "{} {}", sx / n, sy / n);
    }

    #[test]
    fn warp_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut grid = BevGrid::new(60, 60);
        for _ in 0..200 {
            grid.set(rng.random_range(0..60), rng.random_range(0..60), 1);
        }
        let h1 = Homography::new(Matrix3::new(1.0, 0.0, 3.0, 0.0, 1.0, -2.0, 0.0, 0.0, 1.0)).unwrap();
        let h2 = Homography::new(Matrix3::new(1.0, 0.0, -5.0, 0.0, 1.0, 4.0, 0.0, 0.0, 1.0)).unwrap();
        let twice = warp_grid(&warp_grid(&grid, &h1, 60, 60).unwrap(), &h2, 60, 60).unwrap();
        let once = warp_grid(&grid, &h1.then(&h2).unwrap(), 60, 60).unwrap();
        // integer shifts quantize identically except pixels shifted out and back in
        for r in 6..54 {
            for c in 6..54 {
                assert_eq!(twice.get(c, r), once.get(c, r));
            }
        }
    }

    #[test]
    fn components_eight_connected() {
        let mut g = BevGrid::new(10, 10);
        g.set(1, 1, 1);
        g.set(2, 2, 1);
        g.set(5, 5, 1);
        let (labels, n) = connected_components(&g);
        assert_eq!(n, 2);
        assert_eq!(labels[11], labels[22]);
        assert_ne!(labels[11], labels[55]);
    }

    #[test]
    fn vertical_bar_median() {
        let mut g = BevGrid::new(400, 800);
        for r in 100..300 {
            for c in 100..=104 {
                g.set(c, r, 1);
            }
        }
        let cands = select_candidates(&g, &CandidateConfig::default());
        assert_eq!(cands.len(), 200);
        assert!(cands.iter().all(|c| c.col == 102.0 && c.instance == 0));
        assert!(select_candidates(&BevGrid::new(10, 10), &CandidateConfig::default()).is_empty());
    }

    fn dense_two_curb_bev() -> BevGrid {
        let mut g = BevGrid::new(400, 800);
        for r in 0..800 {
            let v = r as f64;
            let left = (120.0 + 0.00005 * (v - 400.0).powi(2)) as usize;
            let right = (280.0 - 0.00003 * (v - 400.0).powi(2)) as usize;
            for d in 0..19 {
                g.set(left - 9 + d, r, 1);
                g.set(right - 9 + d, r, 1);
            }
        }
        g
    }

    #[test]
    fn candidate_reduction() {
        let g = dense_two_curb_bev();
        let pixels = g.count_nonzero();
        assert!((29_000..=31_000).contains(&pixels), "{pixels}");
        let cands = select_candidates(&g, &CandidateConfig::default());
        assert!(cands.len() <= 1600);
        assert!(1.0 - cands.len() as f64 / pixels as f64 > 0.9);
        let instances: std::collections::BTreeSet<usize> = cands.iter().map(|c| c.instance).collect();
        assert_eq!(instances.len(), 2);
        // at most one candidate per instance and row
        let mut keys: Vec<(usize, usize)> = cands.iter().map(|c| (c.instance, c.row)).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), cands.len());
    }

    #[test]
    fn gap_merging_joins_dashed_curb() {
        let mut g = BevGrid::new(400, 800);
        for r in (0..800).filter(|r| (r / 50) % 2 == 0) {
            g.set(100, r, 1);
        }
        let cands = select_candidates(&g, &CandidateConfig::default());
        assert!(cands.iter().all(|c| c.instance == 0));
        assert_eq!(cands.len(), 400);
        let strict = CandidateConfig { max_row_gap: 10, max_instances_per_side: 0, ..Default::default() };
        let split = select_candidates(&g, &strict);
        assert_eq!(split.iter().map(|c| c.instance).max(), Some(7));
    }

    #[test]
    fn row_overlapping_pieces_on_one_side_merge() {
        // two disjoint strokes sharing rows 40..60, both left of center
        let mut g = BevGrid::new(400, 800);
        for r in 0..60 {
            g.set(100, r, 1);
        }
        for r in 40..120 {
            g.set(110, r, 1);
        }
        let cands = select_candidates(&g, &CandidateConfig::default());
        assert!(cands.iter().all(|c| c.instance == 0));
        assert_eq!(cands.len(), 120);
        let mid = cands.iter().find(|c| c.row == 50).unwrap();
        assert_eq!(mid.col, 105.0);
    }

    #[test]
    fn label_mode_uses_instance_values() {
        let mut g = BevGrid::new(50, 50);
        for r in 0..20 {
            g.set(10, r, 2);
            g.set(11, r, 3);
        }
        let cfg = CandidateConfig { max_instances_per_side: 0, ..Default::default() };
        let cands = select_candidates(&g, &cfg);
        assert_eq!(cands.iter().filter(|c| c.instance == 0).count(), 20);
        assert_eq!(cands.iter().filter(|c| c.instance == 1).count(), 20);
    }

    #[test]
    fn exact_parabola_recovery() {
        let samples: Vec<(f64, f64)> = (0..50)
            .map(|i| {
                let v = i as f64 * 16.0;
                (v, 0.001 * v * v - 0.5 * v + 300.0)
            })
            .collect();
        let fit = fit_quadratic(&samples).unwrap();
        assert!((fit.a - 0.001).abs() < 1e-9);
        assert!((fit.b + 0.5).abs() < 1e-9);
        assert!((fit.c - 300.0).abs() < 1e-9);
        assert!(!fit.linear_fallback);
    }

    #[test]
    fn collinear_points_have_zero_curvature() {
        let fit = fit_quadratic(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]).unwrap();
        assert!(fit.a.abs() < 1e-9 && (fit.b - 2.0).abs() < 1e-9 && (fit.c - 1.0).abs() < 1e-9);
        assert!(matches!(fit_quadratic(&[(0.0, 1.0), (0.0, 2.0), (1.0, 3.0)]), Err(Error::Underdetermined(2))));
    }

    #[test]
    fn noisy_fit_matches_full_lstsq() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<(f64, f64)> = (0..800)
            .map(|v| {
                let v = v as f64;
                (v, 0.0002 * v * v - 0.1 * v + 150.0 + rng.random_range(-2.0..2.0))
            })
            .collect();
        let fit = fit_quadratic(&samples).unwrap();
        let rms = (samples.iter().map(|&(v, u)| (u - ((fit.a * v + fit.b) * v + fit.c)).powi(2)).sum::<f64>()
            / samples.len() as f64)
            .sqrt();
        assert!(rms <= 2.0);
        // independent solver: QR of the raw design matrix
        let a = nalgebra::DMatrix::from_fn(samples.len(), 3, |i, j| samples[i].0.powi(2 - j as i32));
        let b = nalgebra::DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
        let x = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
        assert!((x[0] - fit.a).abs() < 1e-9);
        assert!((x[1] - fit.b).abs() < 1e-7);
        assert!((x[2] - fit.c).abs() < 1e-5);
    }

    #[test]
    fn rasterize_examples() {
        let spec = BevSpec::default();
        let line = QuadraticCurve { instance: 0, a: 0.0, b: 0.0, c: 120.0, v_min: 0, v_max: 799 };
        let g = rasterize_curves(&[line], &spec);
        assert_eq!(g.count_nonzero(), 800);
        assert!((0..800).all(|r| g.get(120, r) == 1));
        let off = QuadraticCurve { instance: 0, a: 0.0, b: 1.0, c: 0.0, v_min: 0, v_max: 799 };
        assert_eq!(rasterize_curves(&[off], &spec).count_nonzero(), 400);
    }

    #[test]
    fn fit_rasterize_round_trip() {
        let cands: Vec<Candidate> = (0..800)
            .map(|r| {
                let v = r as f64;
                Candidate { instance: 0, row: r, col: (0.0001 * v * v - 0.05 * v + 150.0).round() }
            })
            .collect();
        let (curves, _) = fit_instances(&cands);
        let g = rasterize_curves(&curves, &BevSpec::default());
        for c in &cands {
            let hit = (-1i64..=1).any(|d| {
                let col = c.col as i64 + d;
                col >= 0 && g.get(col as usize, c.row) == 1
            });
            assert!(hit, "row {}", c.row);
        }
    }

    proptest! {
        #[test]
        fn fit_column_translation(
            a in -1e-3f64..1e-3, b in -1.0f64..1.0, c in 0.0f64..400.0, delta in -100.0f64..100.0,
            noise in proptest::collection::vec(-2.0f64..2.0, 30)
        ) {
            let s: Vec<(f64, f64)> = noise.iter().enumerate().map(|(i, n)| {
                let v = i as f64 * 20.0;
                (v, a * v * v + b * v + c + n)
            }).collect();
            let t: Vec<(f64, f64)> = s.iter().map(|&(v, u)| (v, u + delta)).collect();
            let f1 = fit_quadratic(&s).unwrap();
            let f2 = fit_quadratic(&t).unwrap();
            prop_assert!((f1.a - f2.a).abs() < 1e-9);
            prop_assert!((f1.b - f2.b).abs() < 1e-9);
            prop_assert!((f2.c - f1.c - delta).abs() < 1e-9);
        }

        #[test]
        fn candidates_one_per_row(
            pix in proptest::collection::vec((0usize..64, 0usize..64), 0..300)
        ) {
            let mut g = BevGrid::new(64, 64);
            for (c, r) in pix { g.set(c, r, 1); }
            let cfg = CandidateConfig { min_instance_rows: 1, max_instances_per_side: 0, ..Default::default() };
            let cands = select_candidates(&g, &cfg);
            let mut keys: Vec<(usize, usize)> = cands.iter().map(|c| (c.instance, c.row)).collect();
            let n = keys.len();
            keys.sort_unstable();
            keys.dedup();
            prop_assert_eq!(keys.len(), n);
            let instances = cands.iter().map(|c| c.instance + 1).max().unwrap_or(0);
            prop_assert!(n <= instances * 64);
        }
    }
}
