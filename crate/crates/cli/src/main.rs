use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xview::analysis::{self, AnalysisError};
use xview::cloud::{load_kitti_bin, write_kitti_bin, PointCloud};
use xview::config::{parse_config, ViewSetConfig};
use xview::export::{read_grid_files, write_grid_files, import_grid};
use xview::synth::{parse_scene, synth_scene, Provenance, SceneSpec, SynthScan};

/// Multi-view LiDAR voxelization, density statistics and BEV-dominant fusion.
#[derive(Debug, Parser)]
#[command(name = "xview", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Points-per-voxel statistics per view and 2 m distance bin (CSV).
    Stats(StatsArgs),
    /// Distinct voxels covered by each synthetic box, per view (CSV).
    Coverage(CoverageArgs),
    /// Full pipeline: aggregate every view and fuse onto the BEV grid.
    Fuse(FuseArgs),
    /// Cast a synthetic scene and write it as a KITTI .bin.
    Synth(SynthArgs),
    /// Summarize a .bin scan, a view-set config or a fused grid.
    Info(InfoArgs),
}

#[derive(Debug, Args)]
struct Source {
    /// KITTI velodyne scan.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    input: Option<PathBuf>,
    /// Synthetic scene (JSON).
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Seed of the synthetic azimuth phase.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    source: Source,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CoverageArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    source: Source,
    /// Worker threads for the parallel run: a count or "auto".
    #[arg(long, default_value = "auto", value_parser = parse_parallel)]
    parallel: usize,
    /// Fused grid blob; the sidecar goes to <out>.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-point provenance CSV (index,source).
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct InfoArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid blob written by `fuse` (its sidecar is read from <grid>.json).
    #[arg(long)]
    grid: Option<PathBuf>,
}

fn parse_parallel(s: &str) -> Result<usize, String> {
    if s == "auto" {
        return Ok(0);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("expected a positive thread count or \"auto\", got {s:?}")),
    }
}

/// Failure classes, mapped onto the exit status.
#[derive(Debug)]
enum Failure {
    /// Bad input, file or format: exit 1.
    Usage(String),
    /// A self-check found an invariant broken: exit 2.
    Invariant(String),
}

impl Failure {
    fn usage(stage: &str, e: impl std::fmt::Display) -> Self {
        Failure::Usage(format!("{stage}: {e}"))
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Nondeterministic(_) => Failure::Invariant(e.to_string()),
            other => Failure::usage("pipeline", other),
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::usage(&path.display().to_string(), e))
}

fn load_config(path: &Path) -> Result<(ViewSetConfig, String), Failure> {
    let text = read_text(path)?;
    let cfg = parse_config(&text).map_err(|e| Failure::usage("config", e))?;
    Ok((cfg, text))
}

fn load_scene(path: &Path, seed: u64) -> Result<(SceneSpec, SynthScan), Failure> {
    let spec = parse_scene(&read_text(path)?).map_err(|e| Failure::usage("scene", e))?;
    let scan = synth_scene(&spec, seed).map_err(|e| Failure::usage("synth", e))?;
    Ok((spec, scan))
}

fn load_cloud(src: &Source) -> Result<PointCloud, Failure> {
    match (&src.input, &src.scene) {
        (Some(p), _) => load_kitti_bin(p).map_err(|e| Failure::usage("input", e)),
        (None, Some(s)) => Ok(load_scene(s, src.seed)?.1.cloud),
        (None, None) => Err(Failure::Usage("one of --input or --scene is required".into())),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::usage(&p.display().to_string(), e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn stats(args: StatsArgs) -> Result<(), Failure> {
    let (cfg, _) = load_config(&args.config)?;
    let cloud = load_cloud(&args.source)?;
    if analysis::effective_cloud(&cloud, &cfg).is_empty() {
        eprintln!("warning: no points left after filtering; report is empty");
    }
    let report = analysis::density_report(&cloud, &cfg)?;
    emit(args.out.as_deref(), &report.to_csv())
}

fn coverage(args: CoverageArgs) -> Result<(), Failure> {
    let (cfg, _) = load_config(&args.config)?;
    let Some(scene) = &args.source.scene else {
        return Err(Failure::Usage("coverage needs --scene: real scans carry no per-box provenance".into()));
    };
    let (spec, scan) = load_scene(scene, args.source.seed)?;
    if spec.boxes.is_empty() {
        return Err(Failure::Usage("coverage needs a scene with at least one box".into()));
    }
    let report = analysis::coverage_report(&scan, spec.boxes.len(), &cfg)?;
    for r in &report.rows {
        if r.voxels > r.points {
            return Err(Failure::Invariant(format!("box {} in view {}: more voxels than points", r.box_id, r.view)));
        }
    }
    emit(args.out.as_deref(), &report.to_csv())
}

fn fuse(args: FuseArgs) -> Result<(), Failure> {
    let (cfg, text) = load_config(&args.config)?;
    let cloud = load_cloud(&args.source)?;
    let run = analysis::fuse_command(&cloud, &cfg, args.parallel)?;
    write_grid_files(&args.out, &run.files).map_err(|e| Failure::usage("write", e))?;

    // self-check: the sidecar echoes the input config
    let (grid, sidecar) = import_grid(&run.files).map_err(|e| Failure::Invariant(e.to_string()))?;
    let echoed = parse_config(&text).ok();
    if sidecar.config != echoed {
        return Err(Failure::Invariant("sidecar config differs from the input config".into()));
    }
    print!("{}", run.timing_report());
    eprintln!(
        "fused {} points into {} voxels x {} channels; serial and parallel outputs identical; out-of-support lookups {:?}",
        run.points,
        grid.spec.voxel_count(),
        grid.channels(),
        run.out_of_support
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    let (_, scan) = load_scene(&args.scene, args.seed)?;
    std::fs::write(&args.out, write_kitti_bin(&scan.cloud)).map_err(|e| Failure::usage("write", e))?;
    if let Some(path) = &args.labels {
        let mut csv = String::from("index,source\n");
        for (i, p) in scan.provenance.iter().enumerate() {
            let _ = match p {
                Provenance::Ground => writeln!(csv, "{i},ground"),
                Provenance::Box(b) => writeln!(csv, "{i},box:{b}"),
            };
        }
        std::fs::write(path, csv).map_err(|e| Failure::usage("write", e))?;
    }
    eprintln!("wrote {} points", scan.cloud.len());
    Ok(())
}

fn info(args: InfoArgs) -> Result<(), Failure> {
    let mut out = String::new();
    if let Some(p) = &args.input {
        let c = load_kitti_bin(p).map_err(|e| Failure::usage("input", e))?;
        let _ = writeln!(out, "points: {}", c.len());
        if !c.is_empty() {
            let range = |f: fn(&xview::LidarPoint) -> f32| {
                c.iter().map(f).fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
            };
            for (name, f) in [
                ("x", (|p: &xview::LidarPoint| p.x) as fn(&xview::LidarPoint) -> f32),
                ("y", |p| p.y),
                ("z", |p| p.z),
                ("intensity", |p| p.intensity),
            ] {
                let (lo, hi) = range(f);
                let _ = writeln!(out, "{name}: [{lo}, {hi}]");
            }
        }
    }
    if let Some(p) = &args.config {
        let (cfg, _) = load_config(p)?;
        let _ = writeln!(out, "fuse_mode: {}, K = {}", format!("{:?}", cfg.fuse_mode).to_lowercase(), cfg.k());
        for e in cfg.views() {
            let _ = writeln!(
                out,
                "{}: {} at ({}, {}, {}), grid {:?}, {} channels",
                e.name,
                format!("{:?}", e.kind).to_lowercase(),
                e.origin.x,
                e.origin.y,
                e.origin.z,
                e.grid.shape(),
                e.features.channels()
            );
        }
        let _ = writeln!(out, "fused channels: {}", analysis::fused_channel_names(&cfg).len());
    }
    if let Some(p) = &args.grid {
        let files = read_grid_files(p).map_err(|e| Failure::usage("grid", e))?;
        let (g, sc) = import_grid(&files).map_err(|e| Failure::usage("grid", e))?;
        let _ = writeln!(out, "grid {:?}, {} channels, {} occupied voxels", g.spec.shape(), g.channels(), sc.occupancy.len());
        for b in sc.provenance.unwrap_or_default() {
            let _ = writeln!(out, "channels {}..{}: {}", b.start, b.start + b.len, b.view);
        }
    }
    print!("{out}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Stats(a) => stats(a),
        Command::Coverage(a) => coverage(a),
        Command::Fuse(a) => fuse(a),
        Command::Synth(a) => synth(a),
        Command::Info(a) => info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("invariant violated: {msg}");
            ExitCode::from(2)
        }
    }
}
