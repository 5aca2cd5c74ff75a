//! Multi-view LiDAR geometry.
//!
//! A point cloud is voxelized in a bird's-eye (Cartesian) view and in any
//! number of perspective views (spherical or cylindrical, with the origin
//! placed anywhere in the scene). The perspective-view feature grids are then
//! fused onto the bird's-eye grid by projecting each bird's-eye voxel center
//! into every perspective frame and interpolating there, leaving the
//! bird's-eye features untouched.
//!
//! Modules:
//! - [`geometry`]: Cartesian <-> perspective-view transforms
//! - [`grid`]: half-open voxelization and handcrafted feature grids
//! - [`fusion`]: trilinear lookup, BEV-dominant fusion, point-bridged fusion
//! - [`cloud`], [`synth`], [`config`]: inputs (KITTI scans, synthetic scenes, view sets)
//! - [`export`], [`analysis`]: grid files, density/coverage reports, pipelines

pub mod analysis;
pub mod cloud;
pub mod config;
pub mod export;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod synth;

pub use cloud::{frustum_filter, read_kitti_bin, write_kitti_bin, Frustum, LidarPoint, PointCloud};
pub use config::{parse_config, FuseMode, ViewEntry, ViewSetConfig};
pub use fusion::{bdli_fuse, interpolate, mvf_fuse, FusedGrid, Parallelism};
pub use geometry::{from_view, to_view, Point3, ViewCoord, ViewKind, ViewSpec};
pub use grid::{aggregate, voxel_center, voxelize, Axis, FeatureGrid, FeatureSet, GridSpec, VoxelIndex};
pub use synth::{synth_scene, SceneSpec, SynthScan};
