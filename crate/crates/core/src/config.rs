//! View-set configuration: one cartesian BEV view plus K perspective views,
//! stored as JSON.
//!
//! ```json
//! {
//!   "bev": { "name": "bev", "kind": "cartesian", "origin": [0, 0, 0],
//!            "grid": { "axes": [ {"lo": 0, "hi": 70.4, "bins": 176}, ... ] } },
//!   "pvs": [ { "name": "far", "kind": "spherical", "origin": [60, 0, 0],
//!              "grid": { "axes": [...], "periodic_theta": true } } ],
//!   "fuse_mode": "concat"
//! }
//! ```
//!
//! Angles are radians throughout. `features` (per view) defaults to every
//! handcrafted feature; `frustum` is optional.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::Frustum;
use crate::geometry::{Point3, ViewKind, ViewSpec};
use crate::grid::{FeatureSet, GridError, GridSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    pub fn path(&self) -> &str {
        match self {
            ConfigError::Schema { path, .. } | ConfigError::Invalid { path, .. } => path,
        }
    }

    fn invalid(path: impl Into<String>, message: impl ToString) -> Self {
        ConfigError::Invalid { path: path.into(), message: message.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    #[default]
    Concat,
    Add,
}

/// One named view and its voxelization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub name: String,
    pub kind: ViewKind,
    #[serde(default)]
    pub origin: Point3,
    pub grid: GridSpec,
    #[serde(default)]
    pub features: FeatureSet,
}

impl ViewEntry {
    pub fn new(name: impl Into<String>, view: ViewSpec, grid: GridSpec) -> Self {
        Self {
            name: name.into(),
            kind: view.kind,
            origin: view.origin,
            grid,
            features: FeatureSet::default(),
        }
    }

    pub fn view(&self) -> ViewSpec {
        ViewSpec { kind: self.kind, origin: self.origin }
    }

    pub fn with_features(mut self, features: FeatureSet) -> Self {
        self.features = features;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSetConfig {
    pub bev: ViewEntry,
    pub pvs: Vec<ViewEntry>,
    #[serde(default)]
    pub fuse_mode: FuseMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frustum: Option<Frustum>,
}

fn grid_field(e: &GridError) -> String {
    match e {
        GridError::EmptyExtent { axis, .. } => format!("axes[{axis}].hi"),
        GridError::ZeroBins { axis } => format!("axes[{axis}].bins"),
        GridError::NonFiniteBound { axis } => format!("axes[{axis}]"),
        GridError::PeriodicSpan(_) => "periodic_theta".into(),
        _ => String::new(),
    }
}

impl ViewSetConfig {
    pub fn new(bev: ViewEntry, pvs: Vec<ViewEntry>) -> Result<Self, ConfigError> {
        let cfg = Self { bev, pvs, fuse_mode: FuseMode::Concat, frustum: None };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn k(&self) -> usize {
        self.pvs.len()
    }

    /// BEV first, then the perspective views in order.
    pub fn views(&self) -> impl Iterator<Item = &ViewEntry> {
        std::iter::once(&self.bev).chain(self.pvs.iter())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_entry("bev", &self.bev)?;
        if self.bev.kind != ViewKind::Cartesian {
            return Err(ConfigError::invalid("bev.kind", "the BEV view must be cartesian"));
        }
        if self.pvs.is_empty() {
            return Err(ConfigError::invalid("pvs", "at least one perspective view is required"));
        }
        for (i, pv) in self.pvs.iter().enumerate() {
            let path = format!("pvs[{i}]");
            self.validate_entry(&path, pv)?;
            if pv.kind == ViewKind::Cartesian {
                return Err(ConfigError::invalid(
                    format!("{path}.kind"),
                    "perspective views must be spherical or cylindrical",
                ));
            }
        }
        let mut seen = HashSet::new();
        for (i, e) in self.views().enumerate() {
            if !seen.insert(e.name.as_str()) {
                let path = if i == 0 { "bev.name".to_string() } else { format!("pvs[{}].name", i - 1) };
                return Err(ConfigError::invalid(path, format!("duplicate view name {:?}", e.name)));
            }
        }
        if self.fuse_mode == FuseMode::Add {
            let c = self.bev.features.channels();
            if let Some(i) = self.pvs.iter().position(|p| p.features.channels() != c) {
                return Err(ConfigError::invalid(
                    format!("pvs[{i}].features"),
                    "add fusion needs equal channel counts in every view",
                ));
            }
        }
        if let Some(f) = &self.frustum {
            let ok = |a: f64| a > 0.0 && a < std::f64::consts::FRAC_PI_2;
            if !ok(f.half_angle_h) {
                return Err(ConfigError::invalid("frustum.half_angle_h", "must lie in (0, pi/2)"));
            }
            if !ok(f.half_angle_v) {
                return Err(ConfigError::invalid("frustum.half_angle_v", "must lie in (0, pi/2)"));
            }
        }
        Ok(())
    }

    fn validate_entry(&self, path: &str, e: &ViewEntry) -> Result<(), ConfigError> {
        if e.name.is_empty() {
            return Err(ConfigError::invalid(format!("{path}.name"), "must not be empty"));
        }
        e.view()
            .validate()
            .map_err(|err| ConfigError::invalid(format!("{path}.origin"), err))?;
        e.grid.validate().map_err(|err| {
            ConfigError::invalid(format!("{path}.grid.{}", grid_field(&err)), err)
        })?;
        if e.grid.periodic_theta && e.kind == ViewKind::Cartesian {
            return Err(ConfigError::invalid(
                format!("{path}.grid.periodic_theta"),
                "cartesian grids have no theta axis",
            ));
        }
        if e.features.0.is_empty() {
            return Err(ConfigError::invalid(format!("{path}.features"), "select at least one feature"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_config(text: &str) -> Result<ViewSetConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ViewSetConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const BEV: &str = r#"{"name": "bev", "kind": "cartesian",
        "grid": {"axes": [{"lo": 0, "hi": 70.4, "bins": 176}, {"lo": -40, "hi": 40, "bins": 200}, {"lo": -3, "hi": 1, "bins": 10}]}}"#;

    fn pv(name: &str, origin: &str, bins0: usize) -> String {
        format!(
            r#"{{"name": "{name}", "kind": "spherical", "origin": {origin},
               "grid": {{"axes": [{{"lo": 0, "hi": 80, "bins": {bins0}}},
                                 {{"lo": -3.141592653589793, "hi": 3.141592653589793, "bins": 360}},
                                 {{"lo": 0, "hi": 3.141592653589793, "bins": 90}}],
                        "periodic_theta": true}}}}"#
        )
    }

    #[test]
    fn single_far_view() {
        let text = format!(r#"{{"bev": {BEV}, "pvs": [{}]}}"#, pv("far", "[60, 0, 0]", 80));
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.k(), 1);
        assert_eq!(cfg.pvs[0].view(), ViewSpec::spherical(Point3::new(60.0, 0.0, 0.0)));
        assert_eq!(cfg.fuse_mode, FuseMode::Concat);
        assert_eq!(cfg.bev.features.channels(), 6);
    }

    #[test]
    fn zero_bins_reports_field() {
        let text = format!(r#"{{"bev": {BEV}, "pvs": [{}]}}"#, pv("far", "[60, 0, 0]", 0));
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.path(), "pvs[0].grid.axes[0].bins");
    }

    #[test]
    fn schema_errors_carry_path() {
        let text = format!(r#"{{"bev": {BEV}, "pvs": [{}]}}"#, pv("far", "[60, 0]", 10));
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Schema { .. }));
        assert!(err.path().starts_with("pvs[0].origin"), "{}", err.path());
        let text = format!(r#"{{"bev": {BEV}, "pvs": [], "extra": 1}}"#);
        assert!(matches!(parse_config(&text), Err(ConfigError::Schema { .. })));
    }

    #[test]
    fn rejects_duplicates_and_empty_pvs() {
        let text = format!(
            r#"{{"bev": {BEV}, "pvs": [{}, {}]}}"#,
            pv("a", "[40, -20, 0]", 10),
            pv("a", "[40, 20, 0]", 10)
        );
        assert_eq!(parse_config(&text).unwrap_err().path(), "pvs[1].name");
        let text = format!(r#"{{"bev": {BEV}, "pvs": []}}"#);
        assert_eq!(parse_config(&text).unwrap_err().path(), "pvs");
    }

    #[test]
    fn rejects_non_cartesian_bev() {
        let text = format!(r#"{{"bev": {}, "pvs": [{}]}}"#, pv("b", "[0, 0, 0]", 10), pv("p", "[0, 0, 0]", 10));
        assert_eq!(parse_config(&text).unwrap_err().path(), "bev.kind");
    }

    fn entry() -> impl Strategy<Value = (f64, f64, f64, usize, bool)> {
        (-80.0f64..80.0, -80.0f64..80.0, -3.0f64..3.0, 1usize..400, any::<bool>())
    }

    proptest! {
        #[test]
        fn serialize_reparses_equal(views in prop::collection::vec(entry(), 1..4), add in any::<bool>()) {
            let bev = ViewEntry::new("bev", ViewSpec::cartesian(), GridSpec::default_bev());
            let pvs = views.iter().enumerate().map(|(i, &(x, y, z, bins, cyl))| {
                let origin = Point3::new(x, y, z);
                let (view, third) = if cyl {
                    (ViewSpec::cylindrical(origin), Axis::new(-3.0, 1.0, 40))
                } else {
                    (ViewSpec::spherical(origin), Axis::new(0.0, PI, 180))
                };
                let g = GridSpec { axes: [Axis::new(0.0, 80.0, bins), Axis::new(-PI, PI, 1800), third], periodic_theta: true };
                ViewEntry::new(format!("pv{i}"), view, g)
            }).collect();
            let mut cfg = ViewSetConfig::new(bev, pvs).unwrap();
            if add { cfg.fuse_mode = FuseMode::Add; }
            prop_assert_eq!(parse_config(&cfg.to_json()).unwrap(), cfg);
        }
    }
}
