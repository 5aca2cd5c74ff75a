//! Synthetic rotating-LiDAR scans: one ray per (azimuth, ring) pair cast
//! against a ground plane and oriented box obstacles.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Frustum, LidarPoint, PointCloud};
use crate::geometry::Point3;

/// Reflectance assigned to every synthetic return.
pub const SYNTH_INTENSITY: f32 = 0.5;

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("parsing scene: {0}")]
    Parse(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Invalid { field: field.into(), message: message.into() }
}

/// An obstacle: a box of size `[length, width, height]` centered at
/// `center`, rotated by `yaw` about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxObstacle {
    pub center: Point3,
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

impl BoxObstacle {
    /// A box of the given size resting on the ground plane `ground_z`.
    pub fn on_ground(x: f64, y: f64, ground_z: f64, size: [f64; 3], yaw: f64) -> Self {
        Self { center: Point3::new(x, y, ground_z + size[2] / 2.0), size, yaw }
    }

    /// Maps a world-frame point or direction into the box frame.
    fn local_frame(&self, v: [f64; 3], is_point: bool) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (x, y, z) = if is_point {
            (v[0] - self.center.x, v[1] - self.center.y, v[2] - self.center.z)
        } else {
            (v[0], v[1], v[2])
        };
        [c * x + s * y, -s * x + c * y, z]
    }

    /// Entry distance of the ray `o + t d` (slab test in the box frame).
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let o = self.local_frame(o, true);
        let d = self.local_frame(d, false);
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let h = self.size[a] / 2.0;
            if d[a] == 0.0 {
                if o[a] < -h || o[a] > h {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((-h - o[a]) / d[a], (h - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        if t0 > t1 {
            return None;
        }
        if t0 > HIT_EPS {
            Some(t0)
        } else if t1 > HIT_EPS {
            Some(t1)
        } else {
            None
        }
    }
}

fn default_max_range() -> f64 {
    120.0
}

/// Scanner layout and obstacles of a synthetic scene. Angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub origin: Point3,
    pub azimuth_start: f64,
    pub azimuth_span: f64,
    pub azimuth_count: usize,
    /// Ring elevations above the horizontal, one ray per ring per azimuth.
    pub elevations: Vec<f64>,
    pub ground_z: f64,
    #[serde(default)]
    pub boxes: Vec<BoxObstacle>,
    #[serde(default = "default_max_range")]
    pub max_range: f64,
}

impl SceneSpec {
    /// Full-turn scanner at `origin` with evenly spaced elevations in
    /// `[lowest, highest]` (degrees).
    pub fn full_turn(azimuth_count: usize, rings: usize, lowest_deg: f64, highest_deg: f64, ground_z: f64) -> Self {
        let elevations = (0..rings)
            .map(|i| {
                let f = if rings == 1 { 0.0 } else { i as f64 / (rings - 1) as f64 };
                (lowest_deg + f * (highest_deg - lowest_deg)).to_radians()
            })
            .collect();
        Self {
            origin: Point3::ORIGIN,
            azimuth_start: -PI,
            azimuth_span: TAU,
            azimuth_count,
            elevations,
            ground_z,
            boxes: Vec::new(),
            max_range: default_max_range(),
        }
    }

    /// Full-turn scanner whose rings hit flat ground at evenly spaced
    /// horizontal distances in `[near, far]` meters.
    pub fn ground_rings(azimuth_count: usize, rings: usize, near: f64, far: f64, sensor_height: f64) -> Self {
        let mut s = Self::full_turn(azimuth_count, 1, 0.0, 0.0, -sensor_height);
        s.elevations = (0..rings)
            .map(|i| {
                let f = if rings == 1 { 0.0 } else { i as f64 / (rings - 1) as f64 };
                -(sensor_height / (near + f * (far - near))).atan()
            })
            .collect();
        s
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !self.origin.is_finite() {
            return Err(invalid("origin", "must be finite"));
        }
        if self.azimuth_count == 0 {
            return Err(invalid("azimuth_count", "must be positive"));
        }
        if !self.azimuth_start.is_finite() {
            return Err(invalid("azimuth_start", "must be finite"));
        }
        if !(self.azimuth_span > 0.0 && self.azimuth_span <= TAU) {
            return Err(invalid("azimuth_span", "must lie in (0, 2*pi]"));
        }
        if self.elevations.is_empty() {
            return Err(invalid("elevations", "at least one ring is required"));
        }
        for (i, e) in self.elevations.iter().enumerate() {
            if !(e.is_finite() && e.abs() < PI / 2.0) {
                return Err(invalid(format!("elevations[{i}]"), "must lie in (-pi/2, pi/2)"));
            }
        }
        if !self.ground_z.is_finite() {
            return Err(invalid("ground_z", "must be finite"));
        }
        if self.max_range.is_nan() || self.max_range <= 0.0 {
            return Err(invalid("max_range", "must be positive"));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !b.center.is_finite() || !b.yaw.is_finite() {
                return Err(invalid(format!("boxes[{i}]"), "must be finite"));
            }
            if b.size.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(invalid(format!("boxes[{i}].size"), "extents must be positive"));
            }
            if b.center.z - b.size[2] / 2.0 < self.ground_z - 1e-9 {
                return Err(invalid(format!("boxes[{i}].center"), "box extends below the ground plane"));
            }
        }
        Ok(())
    }

    pub fn ray_count(&self) -> usize {
        self.azimuth_count * self.elevations.len()
    }
}

pub fn parse_scene(text: &str) -> Result<SceneSpec, SceneError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let s: SceneSpec = serde_path_to_error::deserialize(de)
        .map_err(|e| SceneError::Parse(format!("{}: {}", e.path(), e.inner())))?;
    s.validate()?;
    Ok(s)
}

/// What a synthetic return hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Ground,
    Box(usize),
}

/// A synthetic cloud with per-point provenance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthScan {
    pub cloud: PointCloud,
    pub provenance: Vec<Provenance>,
}

impl SynthScan {
    /// Keeps points (and their provenance) inside the frustum.
    pub fn filter(&self, f: &Frustum) -> SynthScan {
        let (pts, prov): (Vec<_>, Vec<_>) = self
            .cloud
            .iter()
            .zip(&self.provenance)
            .filter(|(p, _)| f.contains(p))
            .map(|(p, v)| (*p, *v))
            .unzip();
        SynthScan { cloud: PointCloud::from_points(pts), provenance: prov }
    }

    pub fn box_points(&self, id: usize) -> impl Iterator<Item = &LidarPoint> {
        self.cloud
            .iter()
            .zip(&self.provenance)
            .filter(move |(_, p)| **p == Provenance::Box(id))
            .map(|(pt, _)| pt)
    }
}

/// Azimuths of the scan columns. The seed only shifts the phase of the
/// whole fan by a fraction of one column spacing.
pub fn ray_azimuths(s: &SceneSpec, seed: u64) -> Vec<f64> {
    let phase: f64 = ChaCha8Rng::seed_from_u64(seed).gen_range(0.0..1.0);
    let step = s.azimuth_span / s.azimuth_count as f64;
    (0..s.azimuth_count)
        .map(|k| s.azimuth_start + (k as f64 + phase) * step)
        .collect()
}

pub fn ray_direction(azimuth: f64, elevation: f64) -> [f64; 3] {
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    [ce * ca, ce * sa, se]
}

/// Nearest hit along one ray, if within range.
fn cast(s: &SceneSpec, o: [f64; 3], d: [f64; 3]) -> Option<(f64, Provenance)> {
    let mut best: Option<(f64, Provenance)> = None;
    if d[2] < 0.0 {
        let t = (s.ground_z - o[2]) / d[2];
        if t > HIT_EPS {
            best = Some((t, Provenance::Ground));
        }
    }
    for (id, b) in s.boxes.iter().enumerate() {
        if let Some(t) = b.intersect(o, d) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, Provenance::Box(id)));
            }
        }
    }
    best.filter(|(t, _)| *t <= s.max_range)
}

/// Casts every ray of the scene. Output is azimuth-major, ring-minor and
/// identical for a given seed regardless of thread count.
pub fn synth_scene(s: &SceneSpec, seed: u64) -> Result<SynthScan, SceneError> {
    s.validate()?;
    let o = s.origin.to_array();
    let columns: Vec<Vec<(LidarPoint, Provenance)>> = ray_azimuths(s, seed)
        .par_iter()
        .map(|&az| {
            s.elevations
                .iter()
                .filter_map(|&el| {
                    let d = ray_direction(az, el);
                    cast(s, o, d).map(|(t, prov)| {
                        let p = [0, 1, 2].map(|a| (o[a] + t * d[a]) as f32);
                        (LidarPoint::new(p[0], p[1], p[2], SYNTH_INTENSITY), prov)
                    })
                })
                .collect()
        })
        .collect();
    let (pts, prov): (Vec<_>, Vec<_>) = columns.into_iter().flatten().unzip();
    Ok(SynthScan { cloud: PointCloud::from_points(pts), provenance: prov })
}
