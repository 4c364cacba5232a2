//! Piecewise ground-plane fitting and removal of movable objects.
//!
//! The frame is cut into equal-width slabs along x. In each slab, seeds are
//! drawn from the lowest points and a plane is refined a few times by total
//! least squares on the current inliers.

use std::collections::HashMap;

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kitti_io::{PointCloud, RawPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundSegConfig {
    pub n_segments: usize,
    /// Number of lowest points averaged for the seed level.
    pub num_lpr: usize,
    pub seed_margin: f64,
    pub n_iter: usize,
    pub inlier_threshold: f64,
}

impl Default for GroundSegConfig {
    fn default() -> Self {
        Self {
            n_segments: 3,
            num_lpr: 20,
            seed_margin: 0.4,
            n_iter: 3,
            inlier_threshold: 0.2,
        }
    }
}

/// Plane `normal . p + offset = 0` with an upward unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneModel {
    pub normal: [f64; 3],
    pub offset: f64,
    pub inlier_threshold: f64,
}

impl PlaneModel {
    pub fn horizontal(z: f64, inlier_threshold: f64) -> Self {
        Self {
            normal: [0.0, 0.0, 1.0],
            offset: -z,
            inlier_threshold,
        }
    }

    #[inline]
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        self.normal[0] * p[0] + self.normal[1] * p[1] + self.normal[2] * p[2] + self.offset
    }

    #[inline]
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        self.signed_distance(p).abs()
    }

    #[inline]
    pub fn is_inlier(&self, p: [f64; 3]) -> bool {
        self.distance(p) <= self.inlier_threshold
    }

    /// Plane height at `(x, y)`; falls back to `-offset` for vertical planes.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let nz = self.normal[2];
        if nz.abs() < 1e-9 {
            return -self.offset;
        }
        -(self.normal[0] * x + self.normal[1] * y + self.offset) / nz
    }
}

/// Least-squares plane through `pts` (smallest covariance eigenvector), or
/// `None` when the points do not span a plane.
fn fit_plane_tls(pts: &[[f64; 3]], inlier_threshold: f64) -> Option<PlaneModel> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mean = pts
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
        / n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = Vector3::from(*p) - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    let scale = eig.eigenvalues[order[2]].max(f64::MIN_POSITIVE);
    // rank <= 1: collinear or coincident
    if l1 <= 1e-12 * scale || scale <= 1e-18 {
        return None;
    }
    let _ = l0;
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    normal.normalize_mut();
    if normal.z < 0.0 {
        normal = -normal;
    }
    Some(PlaneModel {
        normal: [normal.x, normal.y, normal.z],
        offset: -normal.dot(&mean),
        inlier_threshold,
    })
}

/// Re-select inliers of `plane` among `pts` and refit once.
pub fn refine_plane(pts: &[[f64; 3]], plane: &PlaneModel) -> (PlaneModel, Vec<usize>) {
    let inliers: Vec<usize> = (0..pts.len()).filter(|&i| plane.is_inlier(pts[i])).collect();
    let sel: Vec<[f64; 3]> = inliers.iter().map(|&i| pts[i]).collect();
    let refit = fit_plane_tls(&sel, plane.inlier_threshold).unwrap_or(*plane);
    (refit, inliers)
}

/// Iterative ground-plane fit of one slab.
pub fn fit_ground_plane(points: &[RawPoint], config: &GroundSegConfig) -> Result<PlaneModel> {
    if points.len() < 3 {
        return Err(Error::DegenerateSegment(points.len()));
    }
    let pts: Vec<[f64; 3]> = points.iter().map(RawPoint::xyz).collect();
    let mut zs: Vec<f64> = pts.iter().map(|p| p[2]).collect();
    zs.sort_by(f64::total_cmp);
    let lpr_n = config.num_lpr.clamp(1, zs.len());
    let lpr = zs[..lpr_n].iter().sum::<f64>() / lpr_n as f64;
    let seeds: Vec<[f64; 3]> = pts
        .iter()
        .copied()
        .filter(|p| p[2] < lpr + config.seed_margin)
        .collect();
    let threshold = config.inlier_threshold;
    let seed_mean_z = seeds.iter().map(|p| p[2]).sum::<f64>() / seeds.len().max(1) as f64;
    let mut plane = match fit_plane_tls(&seeds, threshold) {
        Some(p) => p,
        None => return Ok(PlaneModel::horizontal(seed_mean_z, threshold)),
    };
    for _ in 0..config.n_iter {
        let inliers: Vec<[f64; 3]> = pts.iter().copied().filter(|p| plane.is_inlier(*p)).collect();
        match fit_plane_tls(&inliers, threshold) {
            Some(p) => plane = p,
            None => break,
        }
    }
    Ok(plane)
}

/// Indices of each x-slab. Boundaries belong to the lower slab, except the
/// last edge which closes the top slab.
pub fn split_segment_indices(cloud: &PointCloud, n_segments: usize) -> Vec<Vec<usize>> {
    let n = n_segments.max(1);
    let mut out = vec![Vec::new(); n];
    if cloud.is_empty() {
        return out;
    }
    let (lo, hi) = x_range(&cloud.points);
    let width = (hi - lo) / n as f64;
    for (i, p) in cloud.points.iter().enumerate() {
        out[segment_of(p.x as f64, lo, width, n)].push(i);
    }
    out
}

fn x_range(points: &[RawPoint]) -> (f64, f64) {
    points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.x as f64), hi.max(p.x as f64))
    })
}

fn segment_of(x: f64, lo: f64, width: f64, n: usize) -> usize {
    if width <= 0.0 {
        return 0;
    }
    // first edge strictly greater than x wins; exact edges go to the lower bin
    let t = (x - lo) / width;
    let k = t.ceil() as isize - 1;
    k.clamp(0, n as isize - 1) as usize
}

pub fn split_segments(cloud: &PointCloud, n_segments: usize) -> Vec<PointCloud> {
    split_segment_indices(cloud, n_segments)
        .iter()
        .map(|idx| cloud.select(idx))
        .collect()
}

/// A fitted slab `[x_min, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlane {
    pub x_min: f64,
    pub x_max: f64,
    pub plane: PlaneModel,
}

#[derive(Debug, Clone, Default)]
pub struct GroundPartition {
    pub ground: PointCloud,
    pub non_ground: PointCloud,
    /// Indices into the input cloud, parallel to `ground.points`.
    pub ground_indices: Vec<usize>,
    pub non_ground_indices: Vec<usize>,
    pub segments: Vec<SegmentPlane>,
}

impl GroundPartition {
    /// Ground height below `(x, y)` according to the slab containing `x`
    /// (nearest slab outside the fitted range).
    pub fn ground_height_at(&self, x: f64, y: f64) -> Option<f64> {
        let seg = self.segments.iter().min_by(|a, b| {
            let da = (a.x_min - x).max(x - a.x_max).max(0.0);
            let db = (b.x_min - x).max(x - b.x_max).max(0.0);
            da.total_cmp(&db)
        })?;
        Some(seg.plane.height_at(x, y))
    }
}

/// Split the cloud into ground and non-ground points.
pub fn segment_ground(cloud: &PointCloud, config: &GroundSegConfig) -> GroundPartition {
    if cloud.is_empty() {
        return GroundPartition::default();
    }
    let n = config.n_segments.max(1);
    let (lo, hi) = x_range(&cloud.points);
    let width = (hi - lo) / n as f64;
    let slabs = split_segment_indices(cloud, n);

    let fitted: Vec<Option<PlaneModel>> = slabs
        .iter()
        .map(|idx| {
            let pts: Vec<RawPoint> = idx.iter().map(|&i| cloud.points[i]).collect();
            fit_ground_plane(&pts, config).ok()
        })
        .collect();
    let planes: Vec<PlaneModel> = (0..n)
        .map(|k| {
            fitted[k].unwrap_or_else(|| {
                (0..n)
                    .filter_map(|j| fitted[j].map(|p| (k.abs_diff(j), j, p)))
                    .min_by_key(|&(d, j, _)| (d, j))
                    .map(|(_, _, p)| p)
                    .unwrap_or_else(|| {
                        // nothing fitted anywhere: flat plane through the lowest point
                        let zmin = cloud.points.iter().map(|p| p.z as f64).fold(f64::INFINITY, f64::min);
                        PlaneModel::horizontal(zmin, config.inlier_threshold)
                    })
            })
        })
        .collect();

    let mut ground_indices = Vec::new();
    let mut non_ground_indices = Vec::new();
    for (k, idx) in slabs.iter().enumerate() {
        for &i in idx {
            if planes[k].is_inlier(cloud.points[i].xyz()) {
                ground_indices.push(i);
            } else {
                non_ground_indices.push(i);
            }
        }
    }
    ground_indices.sort_unstable();
    non_ground_indices.sort_unstable();
    let segments = planes
        .iter()
        .enumerate()
        .map(|(k, &plane)| SegmentPlane {
            x_min: lo + width * k as f64,
            x_max: if k + 1 == n { hi } else { lo + width * (k + 1) as f64 },
            plane,
        })
        .collect();
    GroundPartition {
        ground: cloud.select(&ground_indices),
        non_ground: cloud.select(&non_ground_indices),
        ground_indices,
        non_ground_indices,
        segments,
    }
}

/// Envelope of movable objects (vehicles, pedestrians) removed before the
/// beam model is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicObjectConfig {
    pub enabled: bool,
    pub cluster_tolerance: f64,
    pub min_cluster_size: usize,
    pub max_length: f64,
    pub max_width: f64,
    pub min_height: f64,
    pub max_height: f64,
    /// Maximum gap between the cluster bottom and the local ground.
    pub max_ground_gap: f64,
    /// Ground z used when no fitted plane is available.
    pub ground_z: f64,
}

impl Default for DynamicObjectConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            cluster_tolerance: 0.5,
            min_cluster_size: 10,
            max_length: 8.0,
            max_width: 4.0,
            min_height: 0.5,
            max_height: 3.0,
            max_ground_gap: 0.5,
            ground_z: -1.73,
        }
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Euclidean clusters (single linkage at `tolerance`), each sorted, ordered by
/// smallest member.
pub fn euclidean_clusters(points: &[RawPoint], tolerance: f64) -> Vec<Vec<usize>> {
    if points.is_empty() {
        return Vec::new();
    }
    // Cells of edge tol/sqrt(3): all points sharing a cell are within tol.
    let cell = tolerance / 3f64.sqrt();
    let key = |p: &RawPoint| {
        (
            (p.x as f64 / cell).floor() as i64,
            (p.y as f64 / cell).floor() as i64,
            (p.z as f64 / cell).floor() as i64,
        )
    };
    let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        cells.entry(key(p)).or_default().push(i);
    }
    let mut keys: Vec<(i64, i64, i64)> = cells.keys().copied().collect();
    keys.sort_unstable();
    let cell_id: HashMap<(i64, i64, i64), usize> =
        keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut uf = UnionFind::new(keys.len());
    let tol2 = tolerance * tolerance;
    let reach = tolerance.div_euclid(cell) as i64 + 1;
    for (ci, k) in keys.iter().enumerate() {
        let members = &cells[k];
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let nk = (k.0 + dx, k.1 + dy, k.2 + dz);
                    let Some(&cj) = cell_id.get(&nk) else { continue };
                    if cj <= ci || uf.find(ci) == uf.find(cj) {
                        continue;
                    }
                    let others = &cells[&nk];
                    let linked = members.iter().any(|&a| {
                        let pa = points[a].xyz();
                        others.iter().any(|&b| {
                            let pb = points[b].xyz();
                            let d2 = (pa[0] - pb[0]).powi(2)
                                + (pa[1] - pb[1]).powi(2)
                                + (pa[2] - pb[2]).powi(2);
                            d2 <= tol2
                        })
                    });
                    if linked {
                        uf.union(ci, cj);
                    }
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for (ci, k) in keys.iter().enumerate() {
        let root = uf.find(ci);
        groups.entry(root).or_default().extend_from_slice(&cells[k]);
    }
    let mut clusters: Vec<Vec<usize>> = groups
        .into_values()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect();
    clusters.sort_by_key(|c| c[0]);
    clusters
}

/// Oriented footprint (length >= width) and vertical extent of a cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterBox {
    pub length: f64,
    pub width: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub center_xy: [f64; 2],
}

pub fn cluster_box(points: &[RawPoint], members: &[usize]) -> ClusterBox {
    let n = members.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for &i in members {
        mx += points[i].x as f64;
        my += points[i].y as f64;
    }
    mx /= n;
    my /= n;
    let mut cov = Matrix2::<f64>::zeros();
    for &i in members {
        let dx = points[i].x as f64 - mx;
        let dy = points[i].y as f64 - my;
        cov[(0, 0)] += dx * dx;
        cov[(0, 1)] += dx * dy;
        cov[(1, 1)] += dy * dy;
    }
    cov[(1, 0)] = cov[(0, 1)];
    let eig = SymmetricEigen::new(cov);
    let axis = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        eig.eigenvectors.column(0).into_owned()
    } else {
        eig.eigenvectors.column(1).into_owned()
    };
    let (ax, ay) = (axis[0], axis[1]);
    let mut ext = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    let (mut z_min, mut z_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in members {
        let dx = points[i].x as f64 - mx;
        let dy = points[i].y as f64 - my;
        let along = dx * ax + dy * ay;
        let across = -dx * ay + dy * ax;
        ext[0] = ext[0].min(along);
        ext[1] = ext[1].max(along);
        ext[2] = ext[2].min(across);
        ext[3] = ext[3].max(across);
        z_min = z_min.min(points[i].z as f64);
        z_max = z_max.max(points[i].z as f64);
    }
    let a = ext[1] - ext[0];
    let b = ext[3] - ext[2];
    ClusterBox {
        length: a.max(b),
        width: a.min(b),
        z_min,
        z_max,
        center_xy: [mx, my],
    }
}

impl DynamicObjectConfig {
    pub fn matches(&self, b: &ClusterBox, ground_z: f64) -> bool {
        let height = b.z_max - b.z_min;
        b.length <= self.max_length
            && b.width <= self.max_width
            && height >= self.min_height
            && height <= self.max_height
            && (b.z_min - ground_z) <= self.max_ground_gap
    }
}

/// Remove clusters that fit the movable-object envelope, using `ground_z(x, y)`
/// as the local ground level. Returns the kept indices into `non_ground`.
pub fn dynamic_object_keep_indices(
    non_ground: &PointCloud,
    config: &DynamicObjectConfig,
    ground_z: impl Fn(f64, f64) -> f64,
) -> Vec<usize> {
    if !config.enabled {
        return (0..non_ground.len()).collect();
    }
    let clusters = euclidean_clusters(&non_ground.points, config.cluster_tolerance);
    let mut keep = vec![true; non_ground.len()];
    for c in &clusters {
        if c.len() < config.min_cluster_size {
            continue;
        }
        let b = cluster_box(&non_ground.points, c);
        if config.matches(&b, ground_z(b.center_xy[0], b.center_xy[1])) {
            for &i in c {
                keep[i] = false;
            }
        }
    }
    (0..non_ground.len()).filter(|&i| keep[i]).collect()
}

/// Remove movable objects assuming flat ground at `config.ground_z`.
pub fn remove_dynamic_objects(non_ground: &PointCloud, config: &DynamicObjectConfig) -> PointCloud {
    let keep = dynamic_object_keep_indices(non_ground, config, |_, _| config.ground_z);
    non_ground.select(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_plane(f: impl Fn(f64, f64) -> f64, n: usize, step: f64) -> Vec<RawPoint> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let x = i as f64 * step - n as f64 * step / 2.0;
                let y = j as f64 * step - n as f64 * step / 2.0;
                pts.push(RawPoint::new(x as f32, y as f32, f(x, y) as f32, 0.0));
            }
        }
        pts
    }

    fn box_points(cx: f64, cy: f64, z0: f64, lx: f64, ly: f64, lz: f64, step: f64) -> Vec<RawPoint> {
        let mut pts = Vec::new();
        let (nx, ny, nz) = ((lx / step) as usize, (ly / step) as usize, (lz / step) as usize);
        for i in 0..=nx {
            for j in 0..=ny {
                for k in 0..=nz {
                    let on_face = i == 0 || i == nx || j == 0 || j == ny || k == nz;
                    if on_face {
                        pts.push(RawPoint::new(
                            (cx - lx / 2.0 + i as f64 * step) as f32,
                            (cy - ly / 2.0 + j as f64 * step) as f32,
                            (z0 + k as f64 * step) as f32,
                            0.0,
                        ));
                    }
                }
            }
        }
        pts
    }

    #[test]
    fn split_boundaries_go_low() {
        let cloud = PointCloud::from_points(
            [0.0, 5.0, 10.0].iter().map(|&x| RawPoint::new(x, 0.0, 0.0, 0.0)).collect(),
        );
        let segs = split_segment_indices(&cloud, 2);
        assert_eq!(segs, vec![vec![0, 1], vec![2]]);
        let one = split_segments(&cloud, 1);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], cloud);
        assert_eq!(split_segments(&PointCloud::default(), 4).len(), 4);
    }

    #[test]
    fn split_is_a_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<RawPoint> = (0..1000)
            .map(|_| RawPoint::new(rng.random_range(-50.0..50.0), 0.0, 0.0, 0.0))
            .collect();
        let cloud = PointCloud::from_points(pts);
        let mut all: Vec<usize> = split_segment_indices(&cloud, 7).concat();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn recovers_tilted_plane_and_rejects_outliers() {
        let f = |x: f64, y: f64| 0.1 * x + 0.2 * y + 3.0;
        let mut pts = grid_plane(f, 20, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = rng.random_range(-4.0..4.0);
            let y = rng.random_range(-4.0..4.0);
            pts.push(RawPoint::new(x as f32, y as f32, (f(x, y) + 1.0) as f32, 0.0));
        }
        let cfg = GroundSegConfig { inlier_threshold: 0.2, seed_margin: 2.0, ..Default::default() };
        let plane = fit_ground_plane(&pts, &cfg).unwrap();
        let truth = Vector3::new(-0.1, -0.2, 1.0).normalize();
        let got = Vector3::from(plane.normal);
        assert!(got.angle(&truth) < 1e-3, "angle {}", got.angle(&truth));
        for p in &pts[400..] {
            assert!(!plane.is_inlier(p.xyz()));
        }
        assert!((Vector3::from(plane.normal).norm() - 1.0).abs() < 1e-9);
        assert!(plane.normal[2] > 0.0);
    }

    #[test]
    fn coplanar_points_have_zero_residual() {
        let pts = grid_plane(|_, _| -1.7, 10, 1.0);
        let plane = fit_ground_plane(&pts, &GroundSegConfig::default()).unwrap();
        for p in &pts {
            assert!(plane.distance(p.xyz()) < 1e-6);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let two = vec![RawPoint::new(0.0, 0.0, 0.0, 0.0); 2];
        assert!(matches!(
            fit_ground_plane(&two, &GroundSegConfig::default()),
            Err(Error::DegenerateSegment(2))
        ));
        let line: Vec<RawPoint> = (0..10).map(|i| RawPoint::new(i as f32, 0.0, -1.5, 0.0)).collect();
        let plane = fit_ground_plane(&line, &GroundSegConfig::default()).unwrap();
        assert_eq!(plane.normal, [0.0, 0.0, 1.0]);
        assert!((plane.height_at(3.0, 1.0) + 1.5).abs() < 1e-6);
    }

    #[test]
    fn converged_plane_is_a_fixed_point() {
        let pts = grid_plane(|x, y| 0.02 * x - 0.01 * y - 1.7, 30, 0.4);
        let cfg = GroundSegConfig::default();
        let plane = fit_ground_plane(&pts, &cfg).unwrap();
        let xyz: Vec<[f64; 3]> = pts.iter().map(RawPoint::xyz).collect();
        let (p1, in1) = refine_plane(&xyz, &plane);
        let (_, in2) = refine_plane(&xyz, &p1);
        assert_eq!(in1, in2);
        assert_eq!(in1.len(), xyz.len());
    }

    #[test]
    fn flat_plane_is_ground_and_box_is_not() {
        let mut pts = grid_plane(|_, _| -1.73, 60, 0.5);
        let n_plane = pts.len();
        pts.extend(box_points(5.0, 3.0, -1.73 + 0.3, 1.0, 1.0, 2.0, 0.1));
        let cloud = PointCloud::from_points(pts);
        let part = segment_ground(&cloud, &GroundSegConfig::default());
        assert_eq!(part.ground.len() + part.non_ground.len(), cloud.len());
        let ground_plane = part.ground_indices.iter().filter(|&&i| i < n_plane).count();
        assert!(ground_plane as f64 >= 0.99 * n_plane as f64);
        assert!(part.ground_indices.iter().all(|&i| i < n_plane));
    }

    #[test]
    fn empty_cloud_partitions_empty() {
        let part = segment_ground(&PointCloud::default(), &GroundSegConfig::default());
        assert!(part.ground.is_empty() && part.non_ground.is_empty());
    }

    #[test]
    fn car_removed_wall_kept() {
        let mut pts = box_points(10.0, -3.0, -1.73 + 0.2, 4.0, 2.0, 1.5, 0.1);
        let n_car = pts.len();
        // wall: 20 m long, 6 m tall, thin
        for i in 0..=200 {
            for k in 0..=60 {
                pts.push(RawPoint::new(
                    (i as f64 * 0.1 - 10.0) as f32,
                    8.0,
                    (-1.73 + k as f64 * 0.1) as f32,
                    0.0,
                ));
            }
        }
        let cloud = PointCloud::from_points(pts);
        let kept = remove_dynamic_objects(&cloud, &DynamicObjectConfig::default());
        assert_eq!(kept.len(), cloud.len() - n_car);
        assert!(kept.points.iter().all(|p| p.y == 8.0));
        assert!(remove_dynamic_objects(&PointCloud::default(), &DynamicObjectConfig::default()).is_empty());
    }

    #[test]
    fn clusters_respect_tolerance() {
        let pts = vec![
            RawPoint::new(0.0, 0.0, 0.0, 0.0),
            RawPoint::new(0.45, 0.0, 0.0, 0.0),
            RawPoint::new(0.9, 0.0, 0.0, 0.0),
            RawPoint::new(1.5, 0.0, 0.0, 0.0),
        ];
        let c = euclidean_clusters(&pts, 0.5);
        assert_eq!(c, vec![vec![0, 1, 2], vec![3]]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn rotation_about_z_keeps_ground_labels(theta in -3.1f64..3.1) {
            let mut pts = grid_plane(|_, _| -1.73, 40, 0.5);
            pts.extend(box_points(4.0, 2.0, -1.43, 1.0, 1.0, 1.5, 0.25));
            let cloud = PointCloud::from_points(pts.clone());
            let (s, c) = theta.sin_cos();
            let rotated = PointCloud::from_points(pts.iter().map(|p| {
                let (x, y) = (p.x as f64, p.y as f64);
                RawPoint::new((c * x - s * y) as f32, (s * x + c * y) as f32, p.z, 0.0)
            }).collect());
            let cfg = GroundSegConfig::default();
            let a = segment_ground(&cloud, &cfg);
            let b = segment_ground(&rotated, &cfg);
            prop_assert_eq!(a.ground_indices, b.ground_indices);
        }
    }
}
