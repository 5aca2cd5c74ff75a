//! On-disk feature grids: a flat little-endian f32 blob (voxels in i, j, k
//! order, channels innermost) plus a JSON sidecar describing it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{FuseMode, ViewSetConfig};
use crate::fusion::{ChannelBlock, FusedGrid};
use crate::geometry::ViewSpec;
use crate::grid::{FeatureGrid, GridError, GridSpec};

pub const GRID_FORMAT: &str = "xview-feature-grid";
pub const GRID_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error("blob holds {got} bytes, sidecar describes {expected}")]
    BlobSize { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSidecar {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub layout: String,
    pub view: ViewSpec,
    pub grid: GridSpec,
    pub channels: usize,
    pub channel_names: Vec<String>,
    /// Occupied voxels as `(linear index, point count)`, ascending.
    pub occupancy: Vec<(usize, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuse_mode: Option<FuseMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Vec<ChannelBlock>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ViewSetConfig>,
}

/// Encoded blob and sidecar of one grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridFiles {
    pub blob: Vec<u8>,
    pub sidecar: String,
}

pub fn encode_blob(grid: &FeatureGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(grid.data().len() * 4);
    for &v in grid.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn sidecar_for(grid: &FeatureGrid, channel_names: Vec<String>) -> GridSidecar {
    let occupancy = grid
        .occupancy()
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(i, &n)| (i, n))
        .collect();
    GridSidecar {
        format: GRID_FORMAT.into(),
        version: GRID_FORMAT_VERSION,
        dtype: "<f4".into(),
        layout: "i,j,k,channel".into(),
        view: grid.view,
        grid: grid.spec,
        channels: grid.channels(),
        channel_names,
        occupancy,
        fuse_mode: None,
        provenance: None,
        config: None,
    }
}

fn finish(blob: Vec<u8>, sidecar: &GridSidecar) -> GridFiles {
    let mut text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    text.push('\n');
    GridFiles { blob, sidecar: text }
}

pub fn export_grid(grid: &FeatureGrid, channel_names: Vec<String>) -> GridFiles {
    finish(encode_blob(grid), &sidecar_for(grid, channel_names))
}

/// Exports a fused grid with its channel provenance and the config that
/// produced it.
pub fn export_fused(fused: &FusedGrid, channel_names: Vec<String>, config: &ViewSetConfig) -> GridFiles {
    let mut sc = sidecar_for(&fused.grid, channel_names);
    sc.fuse_mode = Some(fused.mode);
    sc.provenance = Some(fused.blocks.clone());
    sc.config = Some(config.clone());
    finish(encode_blob(&fused.grid), &sc)
}

pub fn parse_sidecar(text: &str) -> Result<GridSidecar, ExportError> {
    let sc: GridSidecar = serde_json::from_str(text).map_err(|e| ExportError::Sidecar(e.to_string()))?;
    if sc.format != GRID_FORMAT || sc.version != GRID_FORMAT_VERSION {
        return Err(ExportError::Sidecar(format!("unsupported format {} v{}", sc.format, sc.version)));
    }
    if sc.dtype != "<f4" {
        return Err(ExportError::Sidecar(format!("unsupported dtype {}", sc.dtype)));
    }
    if sc.channel_names.len() != sc.channels {
        return Err(ExportError::Sidecar("channel_names length differs from channels".into()));
    }
    Ok(sc)
}

/// Rebuilds a grid from its files. Values come back as the f32 values that
/// were written, so re-exporting reproduces the blob byte for byte.
pub fn import_grid(files: &GridFiles) -> Result<(FeatureGrid, GridSidecar), ExportError> {
    let sc = parse_sidecar(&files.sidecar)?;
    let mut grid = FeatureGrid::zeros(sc.grid, sc.view, sc.channels)?;
    let expected = grid.data().len() * 4;
    if files.blob.len() != expected {
        return Err(ExportError::BlobSize { expected, got: files.blob.len() });
    }
    for (dst, src) in grid.data_mut().iter_mut().zip(files.blob.chunks_exact(4)) {
        *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]) as f64;
    }
    let voxels = grid.occupancy().len();
    for &(lin, n) in &sc.occupancy {
        if lin >= voxels {
            return Err(ExportError::Sidecar(format!("occupancy index {lin} outside grid")));
        }
        grid.occupancy_mut()[lin] = n;
    }
    Ok((grid, sc))
}

/// Sidecar path for a blob path: the blob name with `.json` appended.
pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io { path: path.display().to_string(), source }
}

pub fn write_grid_files(blob_path: &Path, files: &GridFiles) -> Result<(), ExportError> {
    std::fs::write(blob_path, &files.blob).map_err(io_err(blob_path))?;
    let sc = sidecar_path(blob_path);
    std::fs::write(&sc, &files.sidecar).map_err(io_err(&sc))
}

pub fn read_grid_files(blob_path: &Path) -> Result<GridFiles, ExportError> {
    let blob = std::fs::read(blob_path).map_err(io_err(blob_path))?;
    let sc = sidecar_path(blob_path);
    let sidecar = std::fs::read_to_string(&sc).map_err(io_err(&sc))?;
    Ok(GridFiles { blob, sidecar })
}
