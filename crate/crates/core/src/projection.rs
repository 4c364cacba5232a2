//! Pinhole projection of sensor-frame points onto the rectified image plane.

use nalgebra::{Matrix3x4, Matrix4, Vector4};

use crate::kitti_io::{Calibration, PointCloud, RawPoint};

/// Points closer than this to the camera plane are not projected.
pub const MIN_DEPTH: f64 = 1e-6;

/// Sub-pixel image sample of a sensor point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth in meters.
    pub depth: f64,
    /// Sensor-frame z of the source point.
    pub altitude: f64,
}

/// Precomputed lidar -> image mapping for repeated projection.
#[derive(Debug, Clone)]
pub struct Projector {
    to_rect: Matrix4<f64>,
    projection: Matrix3x4<f64>,
    width: f64,
    height: f64,
}

impl Projector {
    pub fn new(calib: &Calibration) -> Self {
        Self {
            to_rect: calib.lidar_to_rect(),
            projection: calib.projection,
            width: calib.image_width as f64,
            height: calib.image_height as f64,
        }
    }

    pub fn project_xyz(&self, p: [f64; 3]) -> Option<PixelSample> {
        let cam = self.to_rect * Vector4::new(p[0], p[1], p[2], 1.0);
        if cam.z <= MIN_DEPTH {
            return None;
        }
        let img = self.projection * cam;
        Some(PixelSample {
            u: img.x / img.z,
            v: img.y / img.z,
            depth: cam.z,
            altitude: p[2],
        })
    }

    #[inline]
    pub fn in_image(&self, s: &PixelSample) -> bool {
        s.u >= 0.0 && s.u < self.width && s.v >= 0.0 && s.v < self.height
    }

    /// Projection restricted to the image rectangle.
    #[inline]
    pub fn project_in_image(&self, p: &RawPoint) -> Option<PixelSample> {
        self.project_xyz(p.xyz()).filter(|s| self.in_image(s))
    }
}

/// Project one sensor-frame point; `None` when it is not in front of the camera.
pub fn project_point(calib: &Calibration, p: [f64; 3]) -> Option<PixelSample> {
    Projector::new(calib).project_xyz(p)
}

/// Project every point, keeping input order and dropping samples that fall
/// behind the camera or outside the image.
pub fn project_cloud(calib: &Calibration, cloud: &PointCloud) -> Vec<(usize, PixelSample)> {
    let projector = Projector::new(calib);
    cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| projector.project_in_image(p).map(|s| (i, s)))
        .collect()
}
