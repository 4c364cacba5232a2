//! Per-ring curb candidate extraction.
//!
//! Ground points are grouped into scan layers (one per laser) and each point
//! is tested against a clipped neighbor window along its layer.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kitti_io::{PointCloud, RawPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureThresholds {
    /// Lower bound of the window height range.
    pub h1: f64,
    /// Upper bound of the window height range.
    pub h2: f64,
    /// Floor on the window z standard deviation.
    pub h3: f64,
    pub t_s: f64,
    pub neighbor_half_window: usize,
    pub sensor_height: f64,
    /// Horizontal angular resolution in radians.
    pub angular_resolution: f64,
    /// Multiplier on the expected flat-ground spacing.
    pub spacing_multiplier: f64,
    /// Neighbor windows stop at gaps wider than this multiple of the
    /// expected spacing instead of reaching across them. Zero disables.
    pub window_gap_multiplier: f64,
    /// Points farther than this (xy, meters) are never features.
    pub max_range: f64,
}

impl Default for FeatureThresholds {
    fn default() -> Self {
        Self {
            h1: 0.05,
            h2: 0.3,
            h3: 0.04,
            t_s: 1e-4,
            neighbor_half_window: 5,
            sensor_height: 1.73,
            angular_resolution: 0.2f64.to_radians(),
            spacing_multiplier: 2.0,
            window_gap_multiplier: 8.0,
            max_range: 40.0,
        }
    }
}

impl FeatureThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.h1 > 0.0
            && self.h1 < self.h2
            && self.h3 > 0.0
            && self.t_s > 0.0
            && self.neighbor_half_window >= 1
            && self.sensor_height > 0.0
            && self.angular_resolution > 0.0
            && self.spacing_multiplier > 0.0
            && self.window_gap_multiplier >= 0.0
            && self.max_range > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid feature thresholds: {self:?}")))
        }
    }
}

/// Ground points of one laser, sorted by azimuth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanLayer {
    pub ring: u32,
    pub points: Vec<RawPoint>,
    /// Index of each point in the cloud the layer was built from.
    pub source_indices: Vec<usize>,
    /// Mean elevation angle of the layer, radians.
    pub vertical_angle: f64,
}

impl ScanLayer {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn azimuth_order(a: &RawPoint, b: &RawPoint) -> Ordering {
    a.azimuth()
        .total_cmp(&b.azimuth())
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
        .then(a.intensity.total_cmp(&b.intensity))
}

/// One layer per non-empty ring, in ring order.
pub fn organize_layers(ground: &PointCloud) -> Vec<ScanLayer> {
    let n_rings = ground.ring_ids.iter().map(|&r| r as usize + 1).max().unwrap_or(0);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n_rings];
    for (i, &r) in ground.ring_ids.iter().enumerate() {
        buckets[r as usize].push(i);
    }
    buckets
        .into_iter()
        .enumerate()
        .filter(|(_, idx)| !idx.is_empty())
        .map(|(ring, mut idx)| {
            idx.sort_by(|&a, &b| azimuth_order(&ground.points[a], &ground.points[b]).then(a.cmp(&b)));
            let points: Vec<RawPoint> = idx.iter().map(|&i| ground.points[i]).collect();
            let vertical_angle =
                points.iter().map(RawPoint::vertical_angle).sum::<f64>() / points.len() as f64;
            ScanLayer {
                ring: ring as u32,
                points,
                source_indices: idx,
                vertical_angle,
            }
        })
        .collect()
}

/// Neighbor window `[i - w, i + w]` clipped to the layer.
pub fn window(layer: &ScanLayer, i: usize, half: usize) -> Range<usize> {
    i.saturating_sub(half)..(i + half + 1).min(layer.len())
}

/// Height range and population standard deviation of z over the window.
pub fn height_statistics(layer: &ScanLayer, i: usize, th: &FeatureThresholds) -> Option<(f64, f64)> {
    let w = window(layer, i, th.neighbor_half_window);
    if w.len() < 2 {
        return None;
    }
    let zs: Vec<f64> = layer.points[w].iter().map(|p| p.z as f64).collect();
    let n = zs.len() as f64;
    let (lo, hi) = zs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| (lo.min(z), hi.max(z)));
    let mu = zs.iter().sum::<f64>() / n;
    let var = zs.iter().map(|z| (z - mu).powi(2)).sum::<f64>() / n;
    Some((hi - lo, var.sqrt()))
}

pub fn height_difference_pass(layer: &ScanLayer, i: usize, th: &FeatureThresholds) -> bool {
    match height_statistics(layer, i, th) {
        Some((range, std)) => th.h1 <= range && range <= th.h2 && std >= th.h3,
        None => false,
    }
}

/// Smoothness of point `i` over its window and whether it clears `t_s`.
pub fn smoothness_pass(layer: &ScanLayer, i: usize, th: &FeatureThresholds) -> (f64, bool) {
    let w = window(layer, i, th.neighbor_half_window);
    if w.len() < 3 {
        return (0.0, false);
    }
    let pi = layer.points[i].xyz();
    let norm = (pi[0] * pi[0] + pi[1] * pi[1] + pi[2] * pi[2]).sqrt();
    if norm < 1e-9 {
        return (0.0, false);
    }
    let mut acc = [0.0f64; 3];
    let size = w.len() as f64;
    for j in w {
        if j == i {
            continue;
        }
        let pj = layer.points[j].xyz();
        for a in 0..3 {
            acc[a] += pi[a] - pj[a];
        }
    }
    let s = (acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]).sqrt() / (size * norm);
    (s, s >= th.t_s)
}

/// Flat-ground spacing of consecutive points on the layer.
pub fn expected_point_spacing(layer: &ScanLayer, th: &FeatureThresholds) -> Result<f64> {
    let theta = layer.vertical_angle;
    if theta.abs() < 1e-6 {
        return Err(Error::HorizontalRing(theta));
    }
    let cot = theta.cos() / theta.sin();
    Ok(th.sensor_height * cot.abs() * std::f64::consts::PI * th.angular_resolution)
}

fn xy_gap(a: &RawPoint, b: &RawPoint) -> f64 {
    (a.x as f64 - b.x as f64).hypot(a.y as f64 - b.y as f64)
}

/// True when the gap from point `i` to its successor exceeds `k` times the
/// expected spacing.
pub fn horizontal_distance_pass(layer: &ScanLayer, i: usize, th: &FeatureThresholds, k: f64) -> bool {
    if i + 1 >= layer.len() {
        return false;
    }
    match expected_point_spacing(layer, th) {
        Ok(delta) => xy_gap(&layer.points[i], &layer.points[i + 1]) > k * delta,
        Err(_) => false,
    }
}

/// True when neither link adjacent to `i` is a spacing anomaly, i.e. the
/// point sits on a continuous stretch of its ring trace.
pub fn spacing_contiguous(layer: &ScanLayer, i: usize, th: &FeatureThresholds, k: f64) -> bool {
    if layer.len() < 2 {
        return false;
    }
    let Ok(delta) = expected_point_spacing(layer, th) else {
        return false;
    };
    let limit = k * delta;
    let prev_ok = i == 0 || xy_gap(&layer.points[i - 1], &layer.points[i]) <= limit;
    let next_ok = i + 1 >= layer.len() || xy_gap(&layer.points[i], &layer.points[i + 1]) <= limit;
    prev_ok && next_ok
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub height: bool,
    pub smoothness: bool,
    pub distance: bool,
}

impl FeatureFlags {
    pub fn all(&self) -> bool {
        self.height && self.smoothness && self.distance
    }

    pub fn count(&self) -> usize {
        self.height as usize + self.smoothness as usize + self.distance as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePoint {
    pub point: RawPoint,
    pub ring: u32,
    /// Index into the cloud the layers were built from.
    pub source_index: usize,
    pub smoothness: f64,
    pub passed: FeatureFlags,
}

/// Contiguous runs of a layer: index ranges whose consecutive xy gaps stay
/// within `k` times the expected spacing.
pub fn contiguous_runs(layer: &ScanLayer, th: &FeatureThresholds, k: f64) -> Vec<Range<usize>> {
    let Ok(delta) = expected_point_spacing(layer, th) else {
        return vec![0..layer.len()];
    };
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..layer.len() {
        if xy_gap(&layer.points[i - 1], &layer.points[i]) > k * delta {
            runs.push(start..i);
            start = i;
        }
    }
    if start < layer.len() {
        runs.push(start..layer.len());
    }
    runs
}

fn sub_layer(layer: &ScanLayer, r: Range<usize>) -> ScanLayer {
    ScanLayer {
        ring: layer.ring,
        points: layer.points[r.clone()].to_vec(),
        source_indices: layer.source_indices[r].to_vec(),
        vertical_angle: layer.vertical_angle,
    }
}

/// Feature flags for every point of a layer, in azimuth order.
pub fn evaluate_layer(layer: &ScanLayer, th: &FeatureThresholds) -> Vec<FeaturePoint> {
    let runs = if th.window_gap_multiplier > 0.0 {
        contiguous_runs(layer, th, th.window_gap_multiplier)
    } else {
        vec![0..layer.len()]
    };
    let mut out = Vec::with_capacity(layer.len());
    for r in runs {
        let offset = r.start;
        let run = sub_layer(layer, r);
        for j in 0..run.len() {
            let i = offset + j;
            let p = layer.points[i];
            let (s, smooth) = smoothness_pass(&run, j, th);
            let in_range = (p.x as f64).hypot(p.y as f64) <= th.max_range;
            out.push(FeaturePoint {
                point: p,
                ring: layer.ring,
                source_index: layer.source_indices[i],
                smoothness: s,
                passed: FeatureFlags {
                    height: in_range && height_difference_pass(&run, j, th),
                    smoothness: smooth,
                    distance: spacing_contiguous(layer, i, th, th.spacing_multiplier),
                },
            });
        }
    }
    out
}

/// Points passing all three tests, ordered by ring then azimuth.
pub fn extract_feature_points(layers: &[ScanLayer], th: &FeatureThresholds) -> Vec<FeaturePoint> {
    extract_with_min_votes(layers, th, 3)
}

/// Points passing at least `min_votes` of the three tests.
pub fn extract_with_min_votes(layers: &[ScanLayer], th: &FeatureThresholds, min_votes: usize) -> Vec<FeaturePoint> {
    layers
        .par_iter()
        .map(|layer| {
            evaluate_layer(layer, th)
                .into_iter()
                .filter(|f| f.passed.count() >= min_votes)
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat()
}

pub fn feature_points_csv(features: &[FeaturePoint]) -> String {
    let mut out = String::from("ring,x,y,z,height,smoothness,distance\n");
    for f in features {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            f.ring, f.point.x, f.point.y, f.point.z, f.passed.height as u8, f.passed.smoothness as u8, f.passed.distance as u8
        );
    }
    out
}
