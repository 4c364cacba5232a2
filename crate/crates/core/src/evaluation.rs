//! Pixel precision / recall / F1 between BEV curb masks with a distance
//! tolerance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::BevGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tolerance: u32,
}

impl ConfusionCounts {
    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

const INF: f64 = 1e20;

/// 1D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            // k == 0: the new parabola dominates everything seen so far
            v[0] = q;
            z[1] = f64::INFINITY;
        } else {
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest nonzero
/// pixel of `mask`. Pixels are `INF`-like (≥ 1e20) when the mask is empty.
pub fn squared_distance_transform(mask: &BevGrid) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    let mut d: Vec<f64> = mask.values.iter().map(|&v| if v != 0 { 0.0 } else { INF }).collect();
    let n = w.max(h);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = d[y * w + x];
        }
        dt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            d[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&d[y * w..(y + 1) * w]);
        dt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        d[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    d
}

/// A predicted pixel is a true positive when some ground-truth pixel lies
/// within `tol` (Euclidean, inclusive); a ground-truth pixel is a false
/// negative when no predicted pixel lies within `tol`.
pub fn match_with_tolerance(pred: &BevGrid, gt: &BevGrid, tol: u32) -> Result<ConfusionCounts> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::DimensionMismatch(pred.width, pred.height, gt.width, gt.height));
    }
    let t2 = (tol as f64) * (tol as f64);
    let dist_to_gt = squared_distance_transform(gt);
    let dist_to_pred = squared_distance_transform(pred);
    let mut c = ConfusionCounts { tolerance: tol, ..Default::default() };
    for i in 0..pred.values.len() {
        if pred.values[i] != 0 {
            if dist_to_gt[i] <= t2 {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        if gt.values[i] != 0 && dist_to_pred[i] > t2 {
            c.fn_ += 1;
        }
    }
    Ok(c)
}

pub fn compute_metrics(c: &ConfusionCounts) -> Metrics {
    let ratio = |a: u64, b: u64| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let precision = ratio(c.tp, c.fp);
    let recall = ratio(c.tp, c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics { precision, recall, f1 }
}

/// Sum counts over frames, then compute metrics once.
pub fn micro_average(per_frame: &[ConfusionCounts]) -> Metrics {
    let mut total = ConfusionCounts::default();
    for c in per_frame {
        total.add(c);
    }
    compute_metrics(&total)
}

/// Mean of per-frame metrics.
pub fn macro_average(per_frame: &[ConfusionCounts]) -> Metrics {
    if per_frame.is_empty() {
        return Metrics::default();
    }
    let n = per_frame.len() as f64;
    let mut m = Metrics::default();
    for c in per_frame {
        let x = compute_metrics(c);
        m.precision += x.precision / n;
        m.recall += x.recall / n;
        m.f1 += x.f1 / n;
    }
    m
}
