//! BEV-dominant linear interpolation fusion of perspective-view feature grids
//! onto the BEV grid, and the voxel-point-voxel fusion it replaces.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::config::{FuseMode, ViewSetConfig};
use crate::geometry::{to_view, GeometryError, Point3};
use crate::grid::{voxel_center, voxelize, Axis, FeatureGrid, GridError, GridSpec};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("expected {expected} perspective grids, got {got}")]
    GridCount { expected: usize, got: usize },
    #[error("grid for view {view:?} does not match its configured {what}")]
    SpecMismatch { view: String, what: &'static str },
    #[error("add fusion needs equal channel counts, view {view:?} has {got} instead of {expected}")]
    ChannelMismatch { view: String, expected: usize, got: usize },
    #[error("building worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// How a stage spreads work over threads. Results never depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[default]
    Serial,
    /// Worker threads; 0 picks one per available core.
    Threads(usize),
}

impl Parallelism {
    pub(crate) fn pool(self) -> Result<Option<rayon::ThreadPool>, FusionError> {
        match self {
            Parallelism::Serial => Ok(None),
            Parallelism::Threads(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map(Some)
                .map_err(|e| FusionError::Pool(e.to_string())),
        }
    }
}

/// Interpolation stencil along one axis: two neighbouring voxel indices and
/// the weight of the second.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Stencil {
    lo: usize,
    hi: usize,
    t: f64,
}

fn stencil(axis: &Axis, v: f64, periodic: bool) -> Stencil {
    let n = axis.bins;
    let u = (v - axis.lo) / axis.pitch() - 0.5;
    if periodic {
        let mut i = u.floor() as i64;
        while v < axis.center(i) {
            i -= 1;
        }
        while v >= axis.center(i + 1) {
            i += 1;
        }
        let (c0, c1) = (axis.center(i), axis.center(i + 1));
        let wrap = |i: i64| i.rem_euclid(n as i64) as usize;
        return Stencil { lo: wrap(i), hi: wrap(i + 1), t: (v - c0) / (c1 - c0) };
    }
    if v <= axis.center(0) {
        return Stencil { lo: 0, hi: 0, t: 0.0 };
    }
    if v >= axis.center(n as i64 - 1) {
        return Stencil { lo: n - 1, hi: n - 1, t: 0.0 };
    }
    let mut i = (u.floor().max(0.0) as usize).min(n - 2);
    while i > 0 && v < axis.center(i as i64) {
        i -= 1;
    }
    while i + 2 < n && v >= axis.center(i as i64 + 1) {
        i += 1;
    }
    let (c0, c1) = (axis.center(i as i64), axis.center(i as i64 + 1));
    Stencil { lo: i, hi: i + 1, t: (v - c0) / (c1 - c0) }
}

/// Trilinear interpolation of `g` at `q` (grid coordinates) into `out`.
///
/// Returns `false` and writes zeros when `q` lies outside the grid extent.
/// Inside the extent but beyond the outermost voxel centers the lookup clamps
/// to those centers per axis; a periodic theta axis wraps instead.
pub fn interpolate_into(g: &FeatureGrid, q: [f64; 3], out: &mut [f64]) -> bool {
    let spec = &g.spec;
    let c = g.channels();
    debug_assert_eq!(out.len(), c);
    out.fill(0.0);
    let q = spec.canonical(q);
    if !(0..3).all(|a| q[a] >= spec.axes[a].lo && q[a] < spec.axes[a].hi) {
        return false;
    }
    let s = [0, 1, 2].map(|a| stencil(&spec.axes[a], q[a], a == 1 && spec.periodic_theta));
    let [_, n1, n2] = spec.shape();
    let data = g.data();
    for (ci, wi) in [(s[0].lo, 1.0 - s[0].t), (s[0].hi, s[0].t)] {
        for (cj, wj) in [(s[1].lo, 1.0 - s[1].t), (s[1].hi, s[1].t)] {
            for (ck, wk) in [(s[2].lo, 1.0 - s[2].t), (s[2].hi, s[2].t)] {
                let w = wi * wj * wk;
                if w == 0.0 {
                    continue;
                }
                let base = ((ci * n1 + cj) * n2 + ck) * c;
                for (o, v) in out.iter_mut().zip(&data[base..base + c]) {
                    *o += w * v;
                }
            }
        }
    }
    true
}

/// Result of [`interpolate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolated {
    pub values: Vec<f64>,
    pub in_support: bool,
}

pub fn interpolate(g: &FeatureGrid, q: [f64; 3]) -> Interpolated {
    let mut values = vec![0.0; g.channels()];
    let in_support = interpolate_into(g, q, &mut values);
    Interpolated { values, in_support }
}

/// Which view filled which run of fused channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelBlock {
    pub view: String,
    pub start: usize,
    pub len: usize,
}

/// A BEV-shaped grid carrying the fused features.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedGrid {
    pub grid: FeatureGrid,
    pub mode: FuseMode,
    pub blocks: Vec<ChannelBlock>,
    /// Per perspective view, the number of lookups that fell outside its grid.
    pub out_of_support: Vec<usize>,
}

fn check_inputs(
    bev: &FeatureGrid,
    cfg: &ViewSetConfig,
    pv_grids: &[FeatureGrid],
) -> Result<(), FusionError> {
    let mismatch = |view: &str, what| FusionError::SpecMismatch { view: view.to_string(), what };
    if bev.spec != cfg.bev.grid {
        return Err(mismatch(&cfg.bev.name, "grid"));
    }
    if bev.view != cfg.bev.view() {
        return Err(mismatch(&cfg.bev.name, "view"));
    }
    if pv_grids.len() != cfg.k() {
        return Err(FusionError::GridCount { expected: cfg.k(), got: pv_grids.len() });
    }
    for (g, e) in pv_grids.iter().zip(&cfg.pvs) {
        if g.spec != e.grid {
            return Err(mismatch(&e.name, "grid"));
        }
        if g.view != e.view() {
            return Err(mismatch(&e.name, "view"));
        }
        if cfg.fuse_mode == FuseMode::Add && g.channels() != bev.channels() {
            return Err(FusionError::ChannelMismatch {
                view: e.name.clone(),
                expected: bev.channels(),
                got: g.channels(),
            });
        }
    }
    Ok(())
}

fn layout(bev: &FeatureGrid, cfg: &ViewSetConfig, pv_grids: &[FeatureGrid]) -> (usize, Vec<ChannelBlock>) {
    match cfg.fuse_mode {
        FuseMode::Concat => {
            let mut blocks = vec![ChannelBlock { view: cfg.bev.name.clone(), start: 0, len: bev.channels() }];
            let mut start = bev.channels();
            for (g, e) in pv_grids.iter().zip(&cfg.pvs) {
                blocks.push(ChannelBlock { view: e.name.clone(), start, len: g.channels() });
                start += g.channels();
            }
            (start, blocks)
        }
        FuseMode::Add => {
            let c = bev.channels();
            let blocks = cfg
                .views()
                .map(|e| ChannelBlock { view: e.name.clone(), start: 0, len: c })
                .collect();
            (c, blocks)
        }
    }
}

/// Looks up every perspective grid at Cartesian point `p` and combines the
/// results with `base` (the BEV features) into `out`. Returns a bitmask of
/// the views whose lookup fell outside their grid.
fn fuse_at(
    p: Point3,
    base: &[f64],
    cfg: &ViewSetConfig,
    pv_grids: &[FeatureGrid],
    scratch: &mut [f64],
    out: &mut [f64],
) -> Result<u64, GeometryError> {
    let mut missed = 0u64;
    let cb = base.len();
    out[..cb].copy_from_slice(base);
    let mut start = cb;
    for (v, g) in pv_grids.iter().enumerate() {
        let q = to_view(p, &cfg.pvs[v].view())?.coord.to_array();
        let c = g.channels();
        match cfg.fuse_mode {
            FuseMode::Concat => {
                if !interpolate_into(g, q, &mut out[start..start + c]) {
                    missed |= 1 << v.min(63);
                }
                start += c;
            }
            FuseMode::Add => {
                let s = &mut scratch[..c];
                if !interpolate_into(g, q, s) {
                    missed |= 1 << v.min(63);
                }
                for (o, x) in out.iter_mut().zip(s.iter()) {
                    *o += x;
                }
            }
        }
    }
    Ok(missed)
}

fn count_missed(masks: impl Iterator<Item = u64>, k: usize) -> Vec<usize> {
    let mut counts = vec![0usize; k];
    for m in masks {
        for (v, c) in counts.iter_mut().enumerate() {
            if m & (1 << v.min(63)) != 0 {
                *c += 1;
            }
        }
    }
    counts
}

/// Fuses the perspective-view grids onto the BEV grid in one pass.
///
/// Each BEV voxel center is mapped into every perspective frame, each
/// perspective grid is interpolated there, and the results are appended to
/// (concat) or summed with (add) the BEV features. In concat mode the BEV
/// channels of the output are bit-identical to the input. Every voxel
/// depends on read-only inputs only, so sharding voxels over threads yields
/// the same bytes as the serial loop.
pub fn bdli_fuse(
    bev: &FeatureGrid,
    cfg: &ViewSetConfig,
    pv_grids: &[FeatureGrid],
    par: Parallelism,
) -> Result<FusedGrid, FusionError> {
    check_inputs(bev, cfg, pv_grids)?;
    let (channels, blocks) = layout(bev, cfg, pv_grids);
    let spec: GridSpec = bev.spec;
    let voxels = spec.voxel_count();
    let mut out = FeatureGrid::zeros(spec, bev.view, channels)?;
    out.occupancy_mut().copy_from_slice(bev.occupancy());
    let scratch_len = pv_grids.iter().map(|g| g.channels()).max().unwrap_or(0);
    let data = out.data_mut();
    let mut missed = vec![0u64; voxels];

    let work = |lin: usize, dst: &mut [f64], miss: &mut u64, scratch: &mut Vec<f64>| {
        let center = voxel_center(spec.unlinear(lin), &spec)?;
        *miss = fuse_at(Point3::from(center), bev.voxel_linear(lin), cfg, pv_grids, scratch, dst)?;
        Ok::<(), FusionError>(())
    };

    match par.pool()? {
        None => {
            let mut scratch = vec![0.0; scratch_len];
            for (lin, (dst, miss)) in data.chunks_mut(channels).zip(missed.iter_mut()).enumerate() {
                work(lin, dst, miss, &mut scratch)?;
            }
        }
        Some(pool) => pool.install(|| {
            data.par_chunks_mut(channels)
                .zip(missed.par_iter_mut())
                .enumerate()
                .try_for_each_init(
                    || vec![0.0; scratch_len],
                    |scratch, (lin, (dst, miss))| work(lin, dst, miss, scratch),
                )
        })?,
    }

    let out_of_support = count_missed(missed.into_iter(), cfg.k());
    Ok(FusedGrid { grid: out, mode: cfg.fuse_mode, blocks, out_of_support })
}

/// Two-pass voxel-point-voxel fusion.
///
/// Every point picks up the BEV features interpolated at its Cartesian
/// position and the perspective features interpolated at its perspective
/// coordinates; the combined point features are then mean-pooled back into
/// the BEV voxel each point falls into. Voxels without points stay zero.
pub fn mvf_fuse(
    bev: &FeatureGrid,
    cfg: &ViewSetConfig,
    pv_grids: &[FeatureGrid],
    points: &PointCloud,
) -> Result<FusedGrid, FusionError> {
    check_inputs(bev, cfg, pv_grids)?;
    let (channels, blocks) = layout(bev, cfg, pv_grids);
    let spec = bev.spec;
    let voxels = spec.voxel_count();
    let mut sums = vec![0.0; voxels * channels];
    let mut counts = vec![0u32; voxels];
    let mut base = vec![0.0; bev.channels()];
    let mut scratch = vec![0.0; pv_grids.iter().map(|g| g.channels()).max().unwrap_or(0)];
    let mut feat = vec![0.0; channels];
    let mut masks = Vec::with_capacity(points.len());

    for pt in points.iter() {
        let p = pt.position();
        let Some(idx) = voxelize(p.to_array(), &spec) else {
            continue;
        };
        interpolate_into(bev, p.to_array(), &mut base);
        masks.push(fuse_at(p, &base, cfg, pv_grids, &mut scratch, &mut feat)?);
        let lin = spec.linear(idx);
        for (s, f) in sums[lin * channels..(lin + 1) * channels].iter_mut().zip(&feat) {
            *s += f;
        }
        counts[lin] += 1;
    }
    for (lin, &n) in counts.iter().enumerate() {
        if n > 0 {
            for s in &mut sums[lin * channels..(lin + 1) * channels] {
                *s /= n as f64;
            }
        }
    }
    let grid = FeatureGrid::from_parts(spec, bev.view, channels, sums, counts);
    let out_of_support = count_missed(masks.into_iter(), cfg.k());
    Ok(FusedGrid { grid, mode: cfg.fuse_mode, blocks, out_of_support })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::LidarPoint;
    use crate::config::ViewEntry;
    use crate::geometry::ViewSpec;
    use crate::grid::VoxelIndex;
    use std::f64::consts::PI;

    fn affine(c: [f64; 3]) -> f64 {
        2.0 * c[0] + 3.0 * c[1] - c[2] + 1.0
    }

    fn pv_spec() -> GridSpec {
        GridSpec::new([Axis::new(0.0, 80.0, 40), Axis::new(-PI, PI, 90), Axis::new(0.0, PI, 30)], true).unwrap()
    }

    fn affine_grid(view: ViewSpec) -> FeatureGrid {
        FeatureGrid::from_fn(pv_spec(), view, 1, |c| vec![affine(c)]).unwrap()
    }

    fn bev_spec() -> GridSpec {
        GridSpec::new([Axis::new(0.0, 8.0, 8), Axis::new(-4.0, 4.0, 8), Axis::new(-2.0, 2.0, 4)], false).unwrap()
    }

    fn cfg_with(origins: &[Point3]) -> ViewSetConfig {
        let bev = ViewEntry::new("bev", ViewSpec::cartesian(), bev_spec());
        let pvs = origins
            .iter()
            .enumerate()
            .map(|(i, o)| ViewEntry::new(format!("pv{i}"), ViewSpec::spherical(*o), pv_spec()))
            .collect();
        ViewSetConfig::new(bev, pvs).unwrap()
    }

    fn bev_grid() -> FeatureGrid {
        FeatureGrid::from_fn(bev_spec(), ViewSpec::cartesian(), 2, |c| vec![c[0] * 0.1, c[1] - c[2]]).unwrap()
    }

    #[test]
    fn constant_field() {
        let g = FeatureGrid::from_fn(pv_spec(), ViewSpec::spherical(Point3::ORIGIN), 2, |_| vec![1.5, -2.0]).unwrap();
        for q in [[0.1, 0.0, 0.1], [79.9, 3.1, 3.1], [40.0, -PI, 1.0], [13.3, 1.2, 2.9]] {
            let r = interpolate(&g, q);
            assert!(r.in_support);
            assert!(r.values.iter().zip([1.5, -2.0]).all(|(a, b)| (a - b).abs() < 1e-15), "{q:?}");
        }
    }

    #[test]
    fn exact_at_centers() {
        let g = affine_grid(ViewSpec::spherical(Point3::ORIGIN));
        for lin in (0..g.spec.voxel_count()).step_by(97) {
            let idx = g.spec.unlinear(lin);
            let c = voxel_center(idx, &g.spec).unwrap();
            assert_eq!(interpolate(&g, c).values, g.voxel(idx));
        }
    }

    #[test]
    fn midpoint_matches_affine() {
        let g = affine_grid(ViewSpec::spherical(Point3::ORIGIN));
        let a = voxel_center(VoxelIndex::new(10, 20, 5), &g.spec).unwrap();
        let b = voxel_center(VoxelIndex::new(11, 20, 5), &g.spec).unwrap();
        let q = [0.5 * (a[0] + b[0]), a[1], a[2]];
        let got = interpolate(&g, q).values[0];
        assert!((got - affine(q)).abs() <= 1e-12 * affine(q).abs());
    }

    #[test]
    fn outside_extent_is_zero() {
        let g = FeatureGrid::from_fn(pv_spec(), ViewSpec::spherical(Point3::ORIGIN), 1, |_| vec![3.0]).unwrap();
        let r = interpolate(&g, [80.0, 0.0, 1.0]);
        assert!(!r.in_support);
        assert_eq!(r.values, vec![0.0]);
        // wraps instead of leaving the extent
        assert!(interpolate(&g, [10.0, 3.0 * PI, 1.0]).in_support);
    }

    #[test]
    fn periodic_seam_blends_both_ends() {
        let spec = GridSpec::new([Axis::new(0.0, 1.0, 1), Axis::new(-PI, PI, 4), Axis::new(0.0, 1.0, 1)], true).unwrap();
        let g = FeatureGrid::from_fn(spec, ViewSpec::cylindrical(Point3::ORIGIN), 1, |c| {
            vec![if c[1] > 2.0 { 1.0 } else if c[1] < -2.0 { 3.0 } else { 0.0 }]
        })
        .unwrap();
        // Halfway between the last center (3pi/4) and the first (-3pi/4) across the seam.
        let v = interpolate(&g, [0.5, PI, 0.5]).values[0];
        assert!((v - 2.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn clamps_beyond_outer_centers() {
        let spec = GridSpec::new([Axis::new(0.0, 4.0, 4), Axis::new(0.0, 1.0, 1), Axis::new(0.0, 1.0, 1)], false).unwrap();
        let g = FeatureGrid::from_fn(spec, ViewSpec::cylindrical(Point3::ORIGIN), 1, |c| vec![c[0]]).unwrap();
        assert_eq!(interpolate(&g, [0.1, 0.5, 0.5]).values[0], 0.5);
        assert_eq!(interpolate(&g, [3.9, 0.9, 0.1]).values[0], 3.5);
        assert!((interpolate(&g, [2.25, 0.2, 0.7]).values[0] - 2.25).abs() < 1e-15);
    }

    #[test]
    fn constant_pv_appends_constant() {
        let cfg = cfg_with(&[Point3::ORIGIN]);
        let pv = FeatureGrid::from_fn(pv_spec(), cfg.pvs[0].view(), 1, |_| vec![7.0]).unwrap();
        let bev = bev_grid();
        let fused = bdli_fuse(&bev, &cfg, &[pv], Parallelism::Serial).unwrap();
        assert_eq!(fused.grid.channels(), 3);
        for lin in 0..bev.spec.voxel_count() {
            let v = fused.grid.voxel_linear(lin);
            assert_eq!(&v[..2], bev.voxel_linear(lin));
            assert!((v[2] - 7.0).abs() < 1e-14);
        }
        assert_eq!(fused.out_of_support, vec![0]);
    }

    #[test]
    fn two_views_channel_count_and_blocks() {
        let cfg = cfg_with(&[Point3::new(40.0, -20.0, 0.0), Point3::new(40.0, 20.0, 0.0)]);
        let pvs: Vec<_> = cfg.pvs.iter().map(|e| affine_grid(e.view())).collect();
        let fused = bdli_fuse(&bev_grid(), &cfg, &pvs, Parallelism::Serial).unwrap();
        assert_eq!(fused.grid.channels(), 2 + 2);
        assert_eq!(fused.blocks[2], ChannelBlock { view: "pv1".into(), start: 3, len: 1 });
    }

    #[test]
    fn add_mode_sums() {
        let mut cfg = cfg_with(&[Point3::ORIGIN, Point3::new(60.0, 0.0, 0.0)]);
        cfg.fuse_mode = FuseMode::Add;
        let pvs: Vec<_> = cfg
            .pvs
            .iter()
            .map(|e| FeatureGrid::from_fn(pv_spec(), e.view(), 2, |_| vec![1.0, 10.0]).unwrap())
            .collect();
        let bev = bev_grid();
        let fused = bdli_fuse(&bev, &cfg, &pvs, Parallelism::Serial).unwrap();
        assert_eq!(fused.grid.channels(), 2);
        let v = fused.grid.voxel_linear(5);
        let b = bev.voxel_linear(5);
        assert!((v[0] - (b[0] + 2.0)).abs() < 1e-12 && (v[1] - (b[1] + 20.0)).abs() < 1e-12);

        let narrow: Vec<_> = cfg.pvs.iter().map(|e| affine_grid(e.view())).collect();
        assert!(matches!(
            bdli_fuse(&bev, &cfg, &narrow, Parallelism::Serial),
            Err(FusionError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let cfg = cfg_with(&[Point3::ORIGIN]);
        let bev = bev_grid();
        assert!(matches!(bdli_fuse(&bev, &cfg, &[], Parallelism::Serial), Err(FusionError::GridCount { .. })));
        let wrong_view = affine_grid(ViewSpec::spherical(Point3::new(1.0, 0.0, 0.0)));
        assert!(matches!(
            bdli_fuse(&bev, &cfg, &[wrong_view], Parallelism::Serial),
            Err(FusionError::SpecMismatch { what: "view", .. })
        ));
    }

    #[test]
    fn parallel_matches_serial() {
        let cfg = cfg_with(&[Point3::new(40.0, 0.0, 0.0), Point3::new(-40.0, 0.0, 0.0)]);
        let pvs: Vec<_> = cfg.pvs.iter().map(|e| affine_grid(e.view())).collect();
        let a = bdli_fuse(&bev_grid(), &cfg, &pvs, Parallelism::Serial).unwrap();
        let b = bdli_fuse(&bev_grid(), &cfg, &pvs, Parallelism::Threads(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mvf_equals_bdli_with_centered_points() {
        let cfg = cfg_with(&[Point3::new(60.0, 0.0, 0.0)]);
        let pvs = vec![affine_grid(cfg.pvs[0].view())];
        let bev = bev_grid();
        let occupied = [VoxelIndex::new(0, 0, 0), VoxelIndex::new(3, 4, 1), VoxelIndex::new(7, 7, 3)];
        let cloud: PointCloud = occupied
            .iter()
            .map(|&idx| {
                let c = voxel_center(idx, &bev.spec).unwrap();
                LidarPoint::new(c[0] as f32, c[1] as f32, c[2] as f32, 0.5)
            })
            .collect();
        let a = bdli_fuse(&bev, &cfg, &pvs, Parallelism::Serial).unwrap();
        let b = mvf_fuse(&bev, &cfg, &pvs, &cloud).unwrap();
        for idx in occupied {
            assert_eq!(a.grid.voxel(idx), b.grid.voxel(idx));
        }
        assert_eq!(b.grid.total_occupancy(), 3);
    }

    #[test]
    fn mvf_empty_cloud_is_zero() {
        let cfg = cfg_with(&[Point3::ORIGIN]);
        let pvs = vec![affine_grid(cfg.pvs[0].view())];
        let b = mvf_fuse(&bev_grid(), &cfg, &pvs, &PointCloud::default()).unwrap();
        assert!(b.grid.data().iter().all(|&v| v == 0.0));
        assert_eq!(b.grid.total_occupancy(), 0);
    }
}
