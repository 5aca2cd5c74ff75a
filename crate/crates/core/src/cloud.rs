//! Point clouds, the KITTI velodyne `.bin` layout and camera-frustum filtering.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point3;

/// Size of one KITTI record: four little-endian f32 values.
pub const RECORD_BYTES: usize = 16;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("byte length {len} is not a multiple of {RECORD_BYTES}; trailing record starts at offset {offset}")]
    TruncatedRecord { len: usize, offset: usize },
    #[error("point {index} has a non-finite value")]
    NonFinite { index: usize },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl LidarPoint {
    pub const fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn position(&self) -> Point3 {
        Point3::new(self.x as f64, self.y as f64, self.z as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn from_points(points: Vec<LidarPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[LidarPoint] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LidarPoint> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<LidarPoint> {
        self.points
    }
}

impl FromIterator<LidarPoint> for PointCloud {
    fn from_iter<I: IntoIterator<Item = LidarPoint>>(iter: I) -> Self {
        Self { points: iter.into_iter().collect() }
    }
}

/// Decodes a KITTI velodyne scan: consecutive records of (x, y, z, reflectance).
pub fn read_kitti_bin(bytes: &[u8]) -> Result<PointCloud, CloudError> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(CloudError::TruncatedRecord {
            len: bytes.len(),
            offset: bytes.len() - bytes.len() % RECORD_BYTES,
        });
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(index, rec)| {
            let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
            let p = LidarPoint::new(f(0), f(4), f(8), f(12));
            if p.is_finite() {
                Ok(p)
            } else {
                Err(CloudError::NonFinite { index })
            }
        })
        .collect()
}

pub fn write_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in cloud.iter() {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_kitti_bin(path: &Path) -> Result<PointCloud, CloudError> {
    let bytes = std::fs::read(path).map_err(|source| CloudError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_kitti_bin(&bytes)
}

/// Angular approximation of the forward camera field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frustum {
    /// Horizontal half angle, radians.
    pub half_angle_h: f64,
    /// Vertical half angle, radians.
    pub half_angle_v: f64,
}

impl Default for Frustum {
    /// +-40.5 degrees horizontally, +-15 degrees vertically.
    fn default() -> Self {
        Self { half_angle_h: 40.5f64.to_radians(), half_angle_v: 15f64.to_radians() }
    }
}

impl Frustum {
    pub fn contains(&self, p: &LidarPoint) -> bool {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        x > 0.0
            && y.atan2(x).abs() <= self.half_angle_h
            && z.atan2(x.hypot(y)).abs() <= self.half_angle_v
    }
}

/// Keeps the points inside the frustum, preserving order.
pub fn frustum_filter(cloud: &PointCloud, frustum: &Frustum) -> PointCloud {
    cloud.iter().filter(|p| frustum.contains(p)).copied().collect()
}
