//! Beam model over non-ground points, road direction from its dominant
//! maxima, and the left/right split of curb candidates.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::curb_features::FeaturePoint;
use crate::kitti_io::PointCloud;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub n_beams: usize,
    pub max_range: f64,
    pub smoothing_window: usize,
    pub min_separation: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            n_beams: 360,
            max_range: 50.0,
            smoothing_window: 5,
            min_separation: PI / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamModel {
    pub n_beams: usize,
    pub origin: [f64; 2],
    pub max_range: f64,
    /// Beam `b` covers azimuths `[-pi + b * w, -pi + (b + 1) * w)`.
    pub lengths: Vec<f64>,
}

impl BeamModel {
    pub fn beam_width(&self) -> f64 {
        TAU / self.n_beams as f64
    }

    pub fn beam_of(&self, azimuth: f64) -> usize {
        let t = (azimuth + PI).rem_euclid(TAU) / TAU;
        ((t * self.n_beams as f64).floor() as usize).min(self.n_beams - 1)
    }

    pub fn beam_center(&self, b: usize) -> f64 {
        -PI + (b as f64 + 0.5) * self.beam_width()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("azimuth,length\n");
        for (b, l) in self.lengths.iter().enumerate() {
            let _ = writeln!(out, "{},{}", self.beam_center(b), l);
        }
        out
    }
}

pub fn build_beam_model(non_ground: &PointCloud, n_beams: usize, max_range: f64) -> BeamModel {
    let n_beams = n_beams.max(8);
    let mut model = BeamModel {
        n_beams,
        origin: [0.0, 0.0],
        max_range,
        lengths: vec![max_range; n_beams],
    };
    for p in &non_ground.points {
        let (dx, dy) = (p.x as f64 - model.origin[0], p.y as f64 - model.origin[1]);
        let r = dx.hypot(dy);
        if r <= 0.0 || !r.is_finite() {
            continue;
        }
        let b = model.beam_of(dy.atan2(dx));
        if r < model.lengths[b] {
            model.lengths[b] = r;
        }
    }
    model
}

/// Road direction as front and rear azimuths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadSegmentationLine {
    pub direction_front: f64,
    pub direction_rear: f64,
    pub front_fallback: bool,
    pub rear_fallback: bool,
}

impl RoadSegmentationLine {
    pub fn straight() -> Self {
        Self {
            direction_front: 0.0,
            direction_rear: PI,
            front_fallback: false,
            rear_fallback: false,
        }
    }
}

/// Circular centered moving average.
pub fn smooth_circular(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len();
    if n == 0 || window <= 1 {
        return values.to_vec();
    }
    let half = (window / 2) as isize;
    let span = (2 * half + 1) as f64;
    (0..n as isize)
        .map(|i| {
            (-half..=half)
                .map(|d| values[(i + d).rem_euclid(n as isize) as usize])
                .sum::<f64>()
                / span
        })
        .collect()
}

fn same_level(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

/// Circular local maxima, with plateaus reduced to their midpoint. Returns
/// `(azimuth, value)` pairs; a constant signal has none.
pub fn local_maxima(model: &BeamModel, values: &[f64]) -> Vec<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    // start scanning right after a level change so plateaus are not split
    let Some(start) = (0..n).find(|&i| !same_level(values[i], values[(i + n - 1) % n])) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut k = 0;
    while k < n {
        let i = (start + k) % n;
        let mut len = 1;
        while len < n && same_level(values[(i + len) % n], values[i]) {
            len += 1;
        }
        let before = values[(i + n - 1) % n];
        let after = values[(i + len) % n];
        if values[i] > before && values[i] > after {
            let center = i as f64 + (len as f64 - 1.0) / 2.0;
            let az = -PI + (center + 0.5) * model.beam_width();
            out.push((wrap_angle(az), values[i]));
        }
        k += len;
    }
    out
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

pub fn angular_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

fn pick(candidates: impl Iterator<Item = (f64, f64)>, heading: f64) -> Option<(f64, f64)> {
    candidates.fold(None, |best: Option<(f64, f64)>, c| match best {
        None => Some(c),
        Some(b) => {
            let better = c.1 > b.1 && !same_level(c.1, b.1)
                || same_level(c.1, b.1) && angular_distance(c.0, heading) < angular_distance(b.0, heading);
            Some(if better { c } else { b })
        }
    })
}

/// Highest front (|azimuth| < pi/2) and rear maxima of the smoothed beam
/// lengths, at least `min_separation` apart.
pub fn find_dominant_extremes(model: &BeamModel, min_separation: f64, smoothing_window: usize) -> RoadSegmentationLine {
    let smooth = smooth_circular(&model.lengths, smoothing_window);
    let maxima = local_maxima(model, &smooth);
    let front = pick(maxima.iter().copied().filter(|m| m.0.abs() < FRAC_PI_2), 0.0);
    let front_dir = front.map_or(0.0, |f| f.0);
    let rear = pick(
        maxima
            .iter()
            .copied()
            .filter(|m| m.0.abs() >= FRAC_PI_2 && angular_distance(m.0, front_dir) >= min_separation),
        PI,
    );
    let line = RoadSegmentationLine {
        direction_front: front_dir,
        direction_rear: rear.map_or(PI, |r| r.0),
        front_fallback: front.is_none(),
        rear_fallback: rear.is_none(),
    };
    if line.front_fallback || line.rear_fallback {
        log::warn!("beam model: no dominant maximum (front fallback {}, rear fallback {})", line.front_fallback, line.rear_fallback);
    }
    line
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Side of `(x, y)` relative to the polyline rear -> origin -> front.
pub fn side_of(line: &RoadSegmentationLine, x: f64, y: f64) -> Side {
    let (sf, cf) = line.direction_front.sin_cos();
    let (sr, cr) = line.direction_rear.sin_cos();
    let along_front = x * cf + y * sf;
    let along_rear = x * cr + y * sr;
    // travel direction on the rear ray points back towards the origin
    let s = if along_front >= along_rear {
        cf * y - sf * x
    } else {
        -cr * y + sr * x
    };
    if s > 0.0 {
        Side::Left
    } else {
        Side::Right
    }
}

pub fn split_left_right(
    features: &[FeaturePoint],
    line: &RoadSegmentationLine,
) -> (Vec<FeaturePoint>, Vec<FeaturePoint>) {
    features
        .iter()
        .partition(|f| side_of(line, f.point.x as f64, f.point.y as f64) == Side::Left)
}
