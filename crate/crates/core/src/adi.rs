//! Altitude Difference Image (ADI).
//!
//! Every populated pixel gets the mean, over its populated neighbors inside a
//! Chebyshev window, of `|Z(p) - Z(q)| / |p - q|`. Pixels with no projected
//! point, or with no populated neighbor, are zero.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::PixelSample;

/// Knobs for ADI construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdiConfig {
    /// Chebyshev neighborhood radius in pixels.
    pub radius: usize,
    /// Meters-per-pixel value mapped to 255 in the 8-bit preview.
    pub clip: f64,
    /// Fill empty pixels from the nearest populated pixel in the same column.
    pub vertical_fill: bool,
    /// Maximum row distance searched by the vertical fill.
    pub fill_max_rows: usize,
}

impl Default for AdiConfig {
    fn default() -> Self {
        Self {
            radius: 2,
            clip: 0.5,
            vertical_fill: false,
            fill_max_rows: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AltitudeCell {
    pub altitude: f64,
    pub depth: f64,
}

/// Sparse per-pixel altitude after z-buffering.
///
/// A dense slot table maps pixels into a compact cell list; a frame fills
/// only a few percent of the image, so the dense part stays small.
#[derive(Debug, Clone)]
pub struct AltitudeGrid {
    pub width: usize,
    pub height: usize,
    /// Row-major; `0` is empty, otherwise one past the index into `cells`.
    slots: Vec<u32>,
    /// `(pixel index, cell)`; entries whose slot was cleared are stale.
    cells: Vec<(u32, AltitudeCell)>,
}

impl PartialEq for AltitudeGrid {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && (0..self.width * self.height).all(|i| self.cell(i) == other.cell(i))
    }
}

impl AltitudeGrid {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, slots: vec![0; width * height], cells: Vec::new() }
    }

    #[inline]
    fn cell(&self, i: usize) -> Option<AltitudeCell> {
        match self.slots[i] {
            0 => None,
            k => Some(self.cells[k as usize - 1].1),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<AltitudeCell> {
        self.cell(y * self.width + x)
    }

    pub fn set(&mut self, x: usize, y: usize, cell: Option<AltitudeCell>) {
        let i = y * self.width + x;
        match (cell, self.slots[i]) {
            (Some(c), 0) => {
                self.cells.push((i as u32, c));
                self.slots[i] = self.cells.len() as u32;
            }
            (Some(c), k) => self.cells[k as usize - 1].1 = c,
            (None, _) => self.slots[i] = 0,
        }
    }

    /// Populated cells as `(pixel index, cell)`, in insertion order.
    pub fn populated(&self) -> impl Iterator<Item = (usize, AltitudeCell)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(k, (i, _))| self.slots[*i as usize] as usize == k + 1)
            .map(|(_, (i, c))| (*i as usize, *c))
    }

    pub fn populated_count(&self) -> usize {
        self.populated().count()
    }

    /// Apply `f` to every populated altitude.
    pub fn map_altitudes(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for (_, c) in &mut out.cells {
            c.altitude = f(c.altitude);
        }
        out
    }

    /// Copy each empty cell from the nearest populated cell in its column,
    /// searching at most `max_rows` rows away (ties prefer the lower row).
    pub fn vertical_fill(&self, max_rows: usize) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y).is_some() {
                    continue;
                }
                for d in 1..=max_rows {
                    let below = (y + d < self.height).then(|| self.get(x, y + d)).flatten();
                    let above = (y >= d).then(|| self.get(x, y - d)).flatten();
                    if let Some(c) = below.or(above) {
                        out.set(x, y, Some(c));
                        break;
                    }
                }
            }
        }
        out
    }
}

/// Rasterize samples with nearest-pixel rounding and a z-buffer (smallest
/// depth wins). Samples rounding outside the grid are clamped to the border
/// pixel; anything further out is ignored.
pub fn build_altitude_grid(samples: &[PixelSample], width: usize, height: usize) -> AltitudeGrid {
    let mut grid = AltitudeGrid::empty(width, height);
    if width == 0 || height == 0 {
        return grid;
    }
    for s in samples {
        if !(s.u >= -0.5 && s.v >= -0.5 && s.u < width as f64 && s.v < height as f64) {
            continue;
        }
        let x = (s.u.round() as usize).min(width - 1);
        let y = (s.v.round() as usize).min(height - 1);
        let cell = AltitudeCell { altitude: s.altitude, depth: s.depth };
        match grid.get(x, y) {
            Some(old) if old.depth <= s.depth => {}
            _ => grid.set(x, y, Some(cell)),
        }
    }
    grid
}

/// Dense ADI values.
#[derive(Debug, Clone, PartialEq)]
pub struct AltitudeDifferenceImage {
    pub width: usize,
    pub height: usize,
    pub neighborhood_radius: usize,
    /// Row-major values in meters per pixel distance.
    pub values: Vec<f64>,
}

impl AltitudeDifferenceImage {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Neighbor offsets of a Chebyshev window with their inverse distances.
fn window_offsets(radius: usize) -> Vec<(isize, isize, f64)> {
    let r = radius as isize;
    let mut out = Vec::with_capacity((2 * radius + 1).pow(2) - 1);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx == 0 && dy == 0 {
                continue;
            }
            out.push((dx, dy, 1.0 / ((dx * dx + dy * dy) as f64).sqrt()));
        }
    }
    out
}

/// Altitude difference transform over a Chebyshev window of `radius`.
pub fn altitude_difference_transform(grid: &AltitudeGrid, radius: usize) -> AltitudeDifferenceImage {
    let radius = radius.max(1);
    let (w, h) = (grid.width, grid.height);
    let offsets = window_offsets(radius);
    let cells: Vec<(usize, AltitudeCell)> = grid.populated().collect();
    let results: Vec<f64> = cells
        .par_iter()
        .map(|&(i, c)| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let mut sum = 0.0;
            let mut m = 0usize;
            for &(dx, dy, inv_dist) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                if let Some(n) = grid.cell(ny as usize * w + nx as usize) {
                    sum += (c.altitude - n.altitude).abs() * inv_dist;
                    m += 1;
                }
            }
            if m > 0 {
                sum / m as f64
            } else {
                0.0
            }
        })
        .collect();
    let mut values = vec![0.0; w * h];
    for ((i, _), v) in cells.iter().zip(results) {
        values[*i] = v;
    }
    AltitudeDifferenceImage {
        width: w,
        height: h,
        neighborhood_radius: radius,
        values,
    }
}

/// Samples -> grid -> (optional fill) -> ADI.
pub fn compute_adi(
    samples: &[PixelSample],
    width: usize,
    height: usize,
    config: &AdiConfig,
) -> AltitudeDifferenceImage {
    let grid = build_altitude_grid(samples, width, height);
    let grid = if config.vertical_fill {
        grid.vertical_fill(config.fill_max_rows)
    } else {
        grid
    };
    altitude_difference_transform(&grid, config.radius)
}

/// Linear 8-bit preview: `round(255 * min(v, clip) / clip)`.
pub fn normalize_to_8bit(adi: &AltitudeDifferenceImage, clip: f64) -> Result<GrayImage> {
    if !(clip > 0.0) {
        return Err(Error::InvalidArgument(format!("clip must be > 0, got {clip}")));
    }
    let pixels = adi
        .values
        .iter()
        .map(|&v| (255.0 * v.min(clip) / clip).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(GrayImage::from_raw(adi.width as u32, adi.height as u32, pixels)
        .expect("buffer size matches dimensions"))
}

/// Float dump: `u32 width, u32 height` then row-major `f32`, all little-endian.
pub fn encode_f32_dump(adi: &AltitudeDifferenceImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * adi.values.len());
    out.extend_from_slice(&(adi.width as u32).to_le_bytes());
    out.extend_from_slice(&(adi.height as u32).to_le_bytes());
    for &v in &adi.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_f32_dump(bytes: &[u8], path: &Path) -> Result<AltitudeDifferenceImage> {
    let err = |offset: usize, message: String| Error::BinaryParse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 8 {
        return Err(err(0, "missing 8-byte header".into()));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + 4 * width * height;
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!("expected {expected} bytes for {width}x{height}, got {}", bytes.len()),
        ));
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(AltitudeDifferenceImage {
        width,
        height,
        neighborhood_radius: 0,
        values,
    })
}

pub fn write_f32_dump(path: &Path, adi: &AltitudeDifferenceImage) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_f32_dump(adi))
        .map_err(|e| Error::io(path, e))
}

pub fn read_f32_dump(path: &Path) -> Result<AltitudeDifferenceImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32_dump(&bytes, path)
}
