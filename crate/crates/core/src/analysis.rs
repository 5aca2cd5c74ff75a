//! Reports and pipelines behind the command-line tools: per-distance density
//! statistics, per-box voxel coverage, and the full fusion pipeline with its
//! serial/parallel identity check.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::{frustum_filter, PointCloud};
use crate::config::{FuseMode, ViewEntry, ViewSetConfig};
use crate::export::{export_fused, GridFiles};
use crate::fusion::{bdli_fuse, FusedGrid, FusionError, Parallelism};
use crate::grid::{aggregate, occupancy_counts, voxel_center_cartesian, voxelize, FeatureGrid, GridError};
use crate::synth::SynthScan;

/// Width of the ego-distance buckets of the density report, meters.
pub const DENSITY_BIN_WIDTH: f64 = 2.0;
/// Distances at or beyond this are left out of the density report, meters.
pub const DENSITY_MAX_DISTANCE: f64 = 80.0;

pub const DENSITY_CSV_HEADER: &str = "view,bin_lo,occupied,mean_pts,cv";
pub const COVERAGE_CSV_HEADER: &str = "box,view,points,voxels";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("aggregating view {view:?}: {source}")]
    Aggregate {
        view: String,
        #[source]
        source: GridError,
    },
    #[error("fusing: {0}")]
    Fuse(#[from] FusionError),
    #[error("serial and parallel runs produced different {0}")]
    Nondeterministic(&'static str),
}

fn agg_err(view: &ViewEntry) -> impl FnOnce(GridError) -> AnalysisError + '_ {
    move |source| AnalysisError::Aggregate { view: view.name.clone(), source }
}

/// Applies the config's frustum, if any.
pub fn effective_cloud(cloud: &PointCloud, cfg: &ViewSetConfig) -> PointCloud {
    match &cfg.frustum {
        Some(f) => frustum_filter(cloud, f),
        None => cloud.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityRow {
    pub view: String,
    pub bin_lo: f64,
    pub occupied: usize,
    pub mean_pts: f64,
    /// Coefficient of variation of points per occupied voxel; absent with
    /// fewer than two occupied voxels.
    pub cv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensityReport {
    pub rows: Vec<DensityRow>,
}

impl DensityReport {
    pub fn view_rows<'a>(&'a self, view: &'a str) -> impl Iterator<Item = &'a DensityRow> + 'a {
        self.rows.iter().filter(move |r| r.view == view)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(DENSITY_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let cv = r.cv.map(|c| format!("{c:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.1},{},{:.6},{}", r.view, r.bin_lo, r.occupied, r.mean_pts, cv);
        }
        out
    }
}

fn mean_cv(counts: &[u32]) -> (f64, Option<f64>) {
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    if counts.len() < 2 {
        return (mean, None);
    }
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, Some(var.sqrt() / mean))
}

/// Points-per-occupied-voxel statistics of every configured view, bucketed
/// by the distance of each voxel center from the sensor.
pub fn density_report(cloud: &PointCloud, cfg: &ViewSetConfig) -> Result<DensityReport, AnalysisError> {
    let cloud = effective_cloud(cloud, cfg);
    let nbins = (DENSITY_MAX_DISTANCE / DENSITY_BIN_WIDTH) as usize;
    let mut rows = Vec::new();
    for entry in cfg.views() {
        let view = entry.view();
        let (counts, _) = occupancy_counts(&cloud, &view, &entry.grid).map_err(agg_err(entry))?;
        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); nbins];
        for (lin, n) in counts {
            let center = voxel_center_cartesian(entry.grid.unlinear(lin), &entry.grid, &view)
                .map_err(agg_err(entry))?;
            let d = center.norm();
            if d < DENSITY_MAX_DISTANCE {
                buckets[(d / DENSITY_BIN_WIDTH) as usize].push(n);
            }
        }
        for (b, counts) in buckets.iter().enumerate() {
            if counts.is_empty() {
                continue;
            }
            let (mean_pts, cv) = mean_cv(counts);
            rows.push(DensityRow {
                view: entry.name.clone(),
                bin_lo: b as f64 * DENSITY_BIN_WIDTH,
                occupied: counts.len(),
                mean_pts,
                cv,
            });
        }
    }
    Ok(DensityReport { rows })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageRow {
    pub box_id: usize,
    pub view: String,
    pub points: usize,
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
}

impl CoverageReport {
    pub fn get(&self, box_id: usize, view: &str) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.box_id == box_id && r.view == view)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(COVERAGE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.box_id, r.view, r.points, r.voxels);
        }
        out
    }
}

/// Number of distinct voxels of every view holding points of each box.
pub fn coverage_report(scan: &SynthScan, boxes: usize, cfg: &ViewSetConfig) -> Result<CoverageReport, AnalysisError> {
    let scan = match &cfg.frustum {
        Some(f) => scan.filter(f),
        None => scan.clone(),
    };
    let mut rows = Vec::new();
    for box_id in 0..boxes {
        let pts: Vec<_> = scan.box_points(box_id).map(|p| p.position()).collect();
        for entry in cfg.views() {
            let view = entry.view();
            let mut lins = Vec::with_capacity(pts.len());
            for p in &pts {
                let c = view
                    .grid_coords(*p)
                    .map_err(|e| AnalysisError::Aggregate { view: entry.name.clone(), source: e.into() })?;
                if let Some(idx) = voxelize(c, &entry.grid) {
                    lins.push(entry.grid.linear(idx));
                }
            }
            lins.sort_unstable();
            lins.dedup();
            rows.push(CoverageRow { box_id, view: entry.name.clone(), points: pts.len(), voxels: lins.len() });
        }
    }
    Ok(CoverageReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub filter: Duration,
    pub aggregate: Duration,
    pub fuse: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.filter + self.aggregate + self.fuse
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub fused: FusedGrid,
    pub timings: StageTimings,
}

/// Names of the fused channels, `view/channel`.
pub fn fused_channel_names(cfg: &ViewSetConfig) -> Vec<String> {
    match cfg.fuse_mode {
        FuseMode::Concat => cfg
            .views()
            .flat_map(|e| e.features.channel_names().into_iter().map(move |c| format!("{}/{c}", e.name)))
            .collect(),
        FuseMode::Add => cfg.bev.features.channel_names().into_iter().map(|c| format!("sum/{c}")).collect(),
    }
}

fn aggregate_view(cloud: &PointCloud, entry: &ViewEntry) -> Result<FeatureGrid, AnalysisError> {
    aggregate(cloud, &entry.view(), &entry.grid, &entry.features)
        .map(|a| a.grid)
        .map_err(agg_err(entry))
}

/// Frustum filter, per-view aggregation and fusion. With threads, the view
/// pipelines run as parallel tasks and fusion shards BEV voxels; the output
/// does not depend on the thread count.
pub fn run_pipeline(cloud: &PointCloud, cfg: &ViewSetConfig, par: Parallelism) -> Result<PipelineOutput, AnalysisError> {
    let t = Instant::now();
    let cloud = effective_cloud(cloud, cfg);
    let filter = t.elapsed();

    let t = Instant::now();
    let entries: Vec<&ViewEntry> = cfg.views().collect();
    let mut grids = match par.pool()? {
        None => entries.iter().map(|e| aggregate_view(&cloud, e)).collect::<Result<Vec<_>, _>>()?,
        Some(pool) => pool.install(|| {
            entries.par_iter().map(|e| aggregate_view(&cloud, e)).collect::<Result<Vec<_>, _>>()
        })?,
    };
    let aggregate = t.elapsed();

    let t = Instant::now();
    let pvs = grids.split_off(1);
    let fused = bdli_fuse(&grids[0], cfg, &pvs, par)?;
    let fuse = t.elapsed();

    Ok(PipelineOutput { fused, timings: StageTimings { filter, aggregate, fuse } })
}

#[derive(Debug, Clone)]
pub struct FuseRun {
    pub files: GridFiles,
    pub serial: StageTimings,
    pub parallel: StageTimings,
    pub threads: Parallelism,
    pub out_of_support: Vec<usize>,
    pub points: usize,
}

impl FuseRun {
    pub fn timing_report(&self) -> String {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let mut out = String::from("mode,filter_ms,aggregate_ms,fuse_ms,total_ms\n");
        for (name, t) in [("serial", &self.serial), ("parallel", &self.parallel)] {
            let _ = writeln!(
                out,
                "{name},{:.3},{:.3},{:.3},{:.3}",
                ms(t.filter),
                ms(t.aggregate),
                ms(t.fuse),
                ms(t.total())
            );
        }
        out
    }
}

/// Runs the pipeline serially and with `threads`, checks that both encode to
/// identical files and returns them.
pub fn fuse_command(cloud: &PointCloud, cfg: &ViewSetConfig, threads: usize) -> Result<FuseRun, AnalysisError> {
    let names = fused_channel_names(cfg);
    let serial = run_pipeline(cloud, cfg, Parallelism::Serial)?;
    let par = Parallelism::Threads(threads);
    let parallel = run_pipeline(cloud, cfg, par)?;
    let a = export_fused(&serial.fused, names.clone(), cfg);
    let b = export_fused(&parallel.fused, names, cfg);
    if a.blob != b.blob {
        return Err(AnalysisError::Nondeterministic("feature blobs"));
    }
    if a.sidecar != b.sidecar {
        return Err(AnalysisError::Nondeterministic("sidecars"));
    }
    Ok(FuseRun {
        files: b,
        serial: serial.timings,
        parallel: parallel.timings,
        threads: par,
        out_of_support: parallel.fused.out_of_support,
        points: effective_cloud(cloud, cfg).len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::LidarPoint;
    use crate::geometry::{Point3, ViewSpec};
    use crate::grid::{Axis, GridSpec};
    use std::f64::consts::PI;

    fn small_cfg() -> ViewSetConfig {
        let bev = GridSpec::new([Axis::new(0.0, 40.0, 40), Axis::new(-20.0, 20.0, 40), Axis::new(-3.0, 1.0, 4)], false)
            .unwrap();
        let pv = GridSpec::new([Axis::new(0.0, 80.0, 80), Axis::new(-PI, PI, 180), Axis::new(0.0, PI, 45)], true)
            .unwrap();
        ViewSetConfig::new(
            ViewEntry::new("bev", ViewSpec::cartesian(), bev),
            vec![
                ViewEntry::new("ego", ViewSpec::spherical(Point3::ORIGIN), pv),
                ViewEntry::new("far", ViewSpec::spherical(Point3::new(30.0, 0.0, 0.0)), pv),
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_point_density() {
        let cloud = PointCloud::from_points(vec![LidarPoint::new(10.3, 1.2, -1.0, 0.4)]);
        let cfg = small_cfg();
        let rep = density_report(&cloud, &cfg).unwrap();
        assert_eq!(rep.rows.len(), 3);
        for r in &rep.rows {
            assert_eq!((r.occupied, r.mean_pts, r.cv), (1, 1.0, None));
        }
        let csv = rep.to_csv();
        assert_eq!(csv.lines().next(), Some(DENSITY_CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + rep.rows.len());
        assert!(csv.lines().nth(1).unwrap().ends_with(",1,1.000000,"));
    }

    #[test]
    fn empty_cloud_gives_empty_report() {
        let rep = density_report(&PointCloud::default(), &small_cfg()).unwrap();
        assert!(rep.rows.is_empty());
        assert_eq!(rep.to_csv(), format!("{DENSITY_CSV_HEADER}\n"));
    }

    #[test]
    fn cv_matches_definition() {
        let (m, cv) = mean_cv(&[1, 3]);
        assert_eq!(m, 2.0);
        assert_eq!(cv, Some(0.5));
        assert_eq!(mean_cv(&[4, 4, 4]).1, Some(0.0));
    }

    #[test]
    fn pipeline_is_thread_count_invariant() {
        let cloud: PointCloud = (0..2000)
            .map(|i| {
                let f = i as f32;
                LidarPoint::new(1.0 + (f * 0.37) % 38.0, ((f * 0.91) % 36.0) - 18.0, -1.7 + (f * 0.13) % 2.0, (f * 0.01) % 1.0)
            })
            .collect();
        let cfg = small_cfg();
        let a = run_pipeline(&cloud, &cfg, Parallelism::Serial).unwrap();
        for t in [1, 2, 3, 8] {
            let b = run_pipeline(&cloud, &cfg, Parallelism::Threads(t)).unwrap();
            assert_eq!(a.fused, b.fused);
        }
        let run = fuse_command(&cloud, &cfg, 4).unwrap();
        assert_eq!(run.timing_report().lines().count(), 3);
        assert_eq!(fused_channel_names(&cfg).len(), a.fused.grid.channels());
    }
}
