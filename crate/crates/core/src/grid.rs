//! Half-open voxelization of view coordinates and dense per-voxel feature grids.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::{GeometryError, Point3, ViewSpec};

/// Largest number of stored feature values a single dense grid may hold.
pub const MAX_GRID_VALUES: usize = 1 << 28;

/// Tolerance used to decide that a theta axis spans a full turn.
const FULL_TURN_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("axis {axis}: lower bound {lo} must be below upper bound {hi}")]
    EmptyExtent { axis: usize, lo: f64, hi: f64 },
    #[error("axis {axis}: bin count must be at least 1")]
    ZeroBins { axis: usize },
    #[error("axis {axis}: bounds must be finite")]
    NonFiniteBound { axis: usize },
    #[error("periodic theta requires axis 1 to span exactly 2*pi, spans {0}")]
    PeriodicSpan(f64),
    #[error("voxel index {idx:?} outside grid of shape {shape:?}")]
    IndexOutOfRange { idx: [usize; 3], shape: [usize; 3] },
    #[error("grid of {voxels} voxels x {channels} channels exceeds the dense storage limit")]
    TooLarge { voxels: usize, channels: usize },
    #[error("feature set must select at least one channel")]
    NoChannels,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One axis of a grid: `bins` equal half-open intervals covering `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Axis {
    pub const fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self { lo, hi, bins }
    }

    /// Axis with bins of (approximately) the given pitch; the bin count is
    /// rounded to the nearest integer and the pitch adjusted to fit.
    pub fn with_pitch(lo: f64, hi: f64, pitch: f64) -> Self {
        let bins = ((hi - lo) / pitch).round().max(1.0) as usize;
        Self { lo, hi, bins }
    }

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn pitch(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    /// Lower edge of bin `i`; `edge(bins)` is exactly `hi`.
    pub fn edge(&self, i: usize) -> f64 {
        if i >= self.bins {
            self.hi
        } else {
            self.lo + i as f64 * self.pitch()
        }
    }

    /// Center of bin `i`. Accepts indices one past either end so that
    /// periodic neighbours can be located.
    pub fn center(&self, i: i64) -> f64 {
        self.lo + (i as f64 + 0.5) * self.pitch()
    }

    fn validate(&self, axis: usize) -> Result<(), GridError> {
        if !(self.lo.is_finite() && self.hi.is_finite()) {
            return Err(GridError::NonFiniteBound { axis });
        }
        if self.lo >= self.hi {
            return Err(GridError::EmptyExtent { axis, lo: self.lo, hi: self.hi });
        }
        if self.bins == 0 {
            return Err(GridError::ZeroBins { axis });
        }
        Ok(())
    }

    /// Bin containing `v`, if any, under the half-open rule.
    pub fn bin_of(&self, v: f64) -> Option<usize> {
        if !(v >= self.lo && v < self.hi) {
            return None;
        }
        let n = self.bins;
        let mut i = (((v - self.lo) / self.pitch()).floor() as usize).min(n - 1);
        // The quotient can land one bin off near an edge; settle against the
        // edges themselves so the result agrees with interval membership.
        while i > 0 && v < self.edge(i) {
            i -= 1;
        }
        while i + 1 < n && v >= self.edge(i + 1) {
            i += 1;
        }
        Some(i)
    }

    /// Wraps `v` into `[lo, hi)` modulo the axis span.
    pub fn wrap(&self, v: f64) -> f64 {
        if v >= self.lo && v < self.hi {
            return v;
        }
        let w = self.lo + (v - self.lo).rem_euclid(self.span());
        if w >= self.hi {
            self.lo
        } else {
            w
        }
    }
}

/// Voxelization of one view: three axes in that view's coordinates
/// (x, y, z for cartesian views; r, theta, phi for perspective views).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: [Axis; 3],
    #[serde(default)]
    pub periodic_theta: bool,
}

impl GridSpec {
    pub fn new(axes: [Axis; 3], periodic_theta: bool) -> Result<Self, GridError> {
        let g = Self { axes, periodic_theta };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        for (a, axis) in self.axes.iter().enumerate() {
            axis.validate(a)?;
        }
        if self.periodic_theta {
            let span = self.axes[1].span();
            if (span - TAU).abs() > FULL_TURN_TOL {
                return Err(GridError::PeriodicSpan(span));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.axes[0].bins, self.axes[1].bins, self.axes[2].bins]
    }

    pub fn voxel_count(&self) -> usize {
        self.axes.iter().map(|a| a.bins).product()
    }

    pub fn linear(&self, idx: VoxelIndex) -> usize {
        let [_, n1, n2] = self.shape();
        (idx.i * n1 + idx.j) * n2 + idx.k
    }

    pub fn unlinear(&self, lin: usize) -> VoxelIndex {
        let [_, n1, n2] = self.shape();
        VoxelIndex { i: lin / (n1 * n2), j: (lin / n2) % n1, k: lin % n2 }
    }

    /// Applies the periodic theta wrap when enabled.
    pub fn canonical(&self, c: [f64; 3]) -> [f64; 3] {
        if self.periodic_theta {
            [c[0], self.axes[1].wrap(c[1]), c[2]]
        } else {
            c
        }
    }

    /// Bird's-eye-view default: 0.1 m voxels over [0, 70.4) x [-40, 40) x [-3, 1) m.
    pub fn default_bev() -> Self {
        Self {
            axes: [
                Axis::with_pitch(0.0, 70.4, 0.1),
                Axis::with_pitch(-40.0, 40.0, 0.1),
                Axis::with_pitch(-3.0, 1.0, 0.1),
            ],
            periodic_theta: false,
        }
    }

    /// Spherical perspective-view default: 0.5 m range bins over [0, 80),
    /// 0.2 degree azimuth bins over `theta_span`, 1 degree polar bins over [0, pi).
    pub fn default_spherical(theta_span: (f64, f64)) -> Self {
        Self::default_pv(theta_span, Axis::with_pitch(0.0, std::f64::consts::PI, 1f64.to_radians()))
    }

    /// Cylindrical perspective-view default: like the spherical one but with
    /// 0.1 m height bins over [-3, 1) m.
    pub fn default_cylindrical(theta_span: (f64, f64)) -> Self {
        Self::default_pv(theta_span, Axis::with_pitch(-3.0, 1.0, 0.1))
    }

    fn default_pv(theta_span: (f64, f64), third: Axis) -> Self {
        let theta = Axis::with_pitch(theta_span.0, theta_span.1, 0.2f64.to_radians());
        let periodic = (theta.span() - TAU).abs() <= FULL_TURN_TOL;
        Self { axes: [Axis::with_pitch(0.0, 80.0, 0.5), theta, third], periodic_theta: periodic }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl VoxelIndex {
    pub const fn new(i: usize, j: usize, k: usize) -> Self {
        Self { i, j, k }
    }

    pub fn to_array(self) -> [usize; 3] {
        [self.i, self.j, self.k]
    }
}

/// Voxel containing `c`, or `None` when any axis falls outside its half-open
/// extent.
pub fn voxelize(c: [f64; 3], g: &GridSpec) -> Option<VoxelIndex> {
    let c = g.canonical(c);
    Some(VoxelIndex {
        i: g.axes[0].bin_of(c[0])?,
        j: g.axes[1].bin_of(c[1])?,
        k: g.axes[2].bin_of(c[2])?,
    })
}

/// Center of a voxel in the grid's own coordinates.
pub fn voxel_center(idx: VoxelIndex, g: &GridSpec) -> Result<[f64; 3], GridError> {
    let shape = g.shape();
    let a = idx.to_array();
    if (0..3).any(|d| a[d] >= shape[d]) {
        return Err(GridError::IndexOutOfRange { idx: a, shape });
    }
    Ok([0, 1, 2].map(|d| g.axes[d].center(a[d] as i64)))
}

/// Handcrafted per-voxel feature channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// `ln(1 + n)` of the member count.
    Count,
    MeanIntensity,
    MaxIntensity,
    /// Mean offset of member points from the voxel center, three channels.
    MeanOffset,
}

impl Feature {
    pub fn width(self) -> usize {
        match self {
            Feature::MeanOffset => 3,
            _ => 1,
        }
    }

    fn channel_names(self) -> &'static [&'static str] {
        match self {
            Feature::Count => &["count"],
            Feature::MeanIntensity => &["mean_intensity"],
            Feature::MaxIntensity => &["max_intensity"],
            Feature::MeanOffset => &["offset_0", "offset_1", "offset_2"],
        }
    }
}

/// Ordered selection of feature channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSet(pub Vec<Feature>);

impl Default for FeatureSet {
    fn default() -> Self {
        FeatureSet(vec![
            Feature::Count,
            Feature::MeanIntensity,
            Feature::MaxIntensity,
            Feature::MeanOffset,
        ])
    }
}

impl FeatureSet {
    pub fn channels(&self) -> usize {
        self.0.iter().map(|f| f.width()).sum()
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.0
            .iter()
            .flat_map(|f| f.channel_names().iter().map(|s| s.to_string()))
            .collect()
    }
}

/// Dense per-voxel feature vectors over a [`GridSpec`], channel-innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub spec: GridSpec,
    pub view: ViewSpec,
    channels: usize,
    data: Vec<f64>,
    occupancy: Vec<u32>,
}

impl FeatureGrid {
    /// All-empty grid.
    pub fn zeros(spec: GridSpec, view: ViewSpec, channels: usize) -> Result<Self, GridError> {
        spec.validate()?;
        view.validate()?;
        if channels == 0 {
            return Err(GridError::NoChannels);
        }
        let voxels = spec.voxel_count();
        if voxels.checked_mul(channels).is_none_or(|n| n > MAX_GRID_VALUES) {
            return Err(GridError::TooLarge { voxels, channels });
        }
        Ok(Self {
            spec,
            view,
            channels,
            data: vec![0.0; voxels * channels],
            occupancy: vec![0; voxels],
        })
    }

    pub(crate) fn from_parts(
        spec: GridSpec,
        view: ViewSpec,
        channels: usize,
        data: Vec<f64>,
        occupancy: Vec<u32>,
    ) -> Self {
        debug_assert_eq!(data.len(), spec.voxel_count() * channels);
        debug_assert_eq!(occupancy.len(), spec.voxel_count());
        Self { spec, view, channels, data, occupancy }
    }

    /// Fills every voxel with `f(center)`; occupancy stays zero.
    pub fn from_fn(
        spec: GridSpec,
        view: ViewSpec,
        channels: usize,
        mut f: impl FnMut([f64; 3]) -> Vec<f64>,
    ) -> Result<Self, GridError> {
        let mut g = Self::zeros(spec, view, channels)?;
        for lin in 0..spec.voxel_count() {
            let c = voxel_center(spec.unlinear(lin), &spec)?;
            let v = f(c);
            assert_eq!(v.len(), channels, "feature function returned wrong width");
            g.data[lin * channels..(lin + 1) * channels].copy_from_slice(&v);
        }
        Ok(g)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn occupancy_mut(&mut self) -> &mut [u32] {
        &mut self.occupancy
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn occupancy(&self) -> &[u32] {
        &self.occupancy
    }

    pub fn total_occupancy(&self) -> u64 {
        self.occupancy.iter().map(|&n| n as u64).sum()
    }

    pub fn voxel(&self, idx: VoxelIndex) -> &[f64] {
        self.voxel_linear(self.spec.linear(idx))
    }

    pub fn voxel_linear(&self, lin: usize) -> &[f64] {
        &self.data[lin * self.channels..(lin + 1) * self.channels]
    }

    pub fn voxel_mut(&mut self, idx: VoxelIndex) -> &mut [f64] {
        let lin = self.spec.linear(idx);
        &mut self.data[lin * self.channels..(lin + 1) * self.channels]
    }

    pub fn set_occupancy(&mut self, idx: VoxelIndex, n: u32) {
        let lin = self.spec.linear(idx);
        self.occupancy[lin] = n;
    }
}

/// Outcome of aggregating a cloud into one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub grid: FeatureGrid,
    pub out_of_range: usize,
}

/// A point's grid coordinates and the voxel it falls into.
#[derive(Debug, Clone, Copy)]
struct Member {
    lin: usize,
    coords: [f64; 3],
    intensity: f64,
}

impl Member {
    fn key(&self) -> (usize, [u64; 4]) {
        let c = self.coords;
        (self.lin, [c[0], c[1], c[2], self.intensity].map(order_bits))
    }
}

/// Monotone map from f64 to u64 so sorting on bits matches `total_cmp`.
fn order_bits(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

fn collect_members(
    points: &PointCloud,
    view: &ViewSpec,
    g: &GridSpec,
) -> Result<(Vec<Member>, usize), GridError> {
    let mut members = Vec::with_capacity(points.len());
    let mut out = 0usize;
    for p in points.iter() {
        let c = g.canonical(view.grid_coords(p.position())?);
        match voxelize(c, g) {
            Some(idx) => members.push(Member {
                lin: g.linear(idx),
                coords: c,
                intensity: p.intensity as f64,
            }),
            None => out += 1,
        }
    }
    Ok((members, out))
}

/// Builds the handcrafted feature grid of one view.
///
/// Members of each voxel are reduced in a canonical order (sorted by their
/// coordinates), so the output is bit-identical under any permutation of
/// the input points.
pub fn aggregate(
    points: &PointCloud,
    view: &ViewSpec,
    g: &GridSpec,
    features: &FeatureSet,
) -> Result<Aggregation, GridError> {
    let channels = features.channels();
    let mut grid = FeatureGrid::zeros(*g, *view, channels)?;
    let (mut members, out_of_range) = collect_members(points, view, g)?;
    members.sort_unstable_by_key(Member::key);

    for group in members.chunk_by(|a, b| a.lin == b.lin) {
        let lin = group[0].lin;
        let n = group.len();
        let center = voxel_center(g.unlinear(lin), g)?;
        let mut sum_i = 0.0;
        let mut max_i = f64::NEG_INFINITY;
        let mut off = [0.0; 3];
        for m in group {
            sum_i += m.intensity;
            max_i = max_i.max(m.intensity);
            for d in 0..3 {
                off[d] += m.coords[d] - center[d];
            }
        }
        let nf = n as f64;
        let out = &mut grid.data[lin * channels..(lin + 1) * channels];
        let mut c = 0;
        for f in &features.0 {
            match f {
                Feature::Count => out[c] = nf.ln_1p(),
                Feature::MeanIntensity => out[c] = sum_i / nf,
                Feature::MaxIntensity => out[c] = max_i,
                Feature::MeanOffset => {
                    for d in 0..3 {
                        out[c + d] = off[d] / nf;
                    }
                }
            }
            c += f.width();
        }
        grid.occupancy[lin] = n as u32;
    }
    Ok(Aggregation { grid, out_of_range })
}

/// Sparse per-voxel point counts of one view, keyed by linear voxel index in
/// ascending order. Avoids dense storage, so full-resolution grids are fine.
pub fn occupancy_counts(
    points: &PointCloud,
    view: &ViewSpec,
    g: &GridSpec,
) -> Result<(Vec<(usize, u32)>, usize), GridError> {
    g.validate()?;
    let (members, out) = collect_members(points, view, g)?;
    let mut lins: Vec<usize> = members.iter().map(|m| m.lin).collect();
    lins.sort_unstable();
    let counts = lins
        .chunk_by(|a, b| a == b)
        .map(|run| (run[0], run.len() as u32))
        .collect();
    Ok((counts, out))
}

/// Cartesian position of a voxel center of a grid living in `view`.
pub fn voxel_center_cartesian(
    idx: VoxelIndex,
    g: &GridSpec,
    view: &ViewSpec,
) -> Result<Point3, GridError> {
    let c = voxel_center(idx, g)?;
    Ok(view.cartesian_from_grid(c)?)
}
