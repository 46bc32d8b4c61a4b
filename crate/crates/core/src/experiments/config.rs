//! Experiment configuration: a TOML document with one table per concern.
//!
//! ```toml
//! [graph]
//! n_nodes = 10
//! edge_probability = 0.6
//!
//! [data]
//! points_per_node = 100
//! dimension = 4
//! half_width = 1.0
//!
//! [privacy]
//! epsilon = 4.0
//! delta = 0.001
//! sensitivity = "mean_estimation"
//! noiseless = false
//!
//! [run]
//! horizon = 1000
//! stage2_rel_tol = 1e-9
//! stage2_max_rounds = 0
//! probe_node = 0
//!
//! [sweep]
//! axis = "T"
//! values = [10.0, 100.0, 1000.0]
//! n_seeds = 20
//!
//! [audit]
//! samples = 10000
//! ```
//!
//! Any leaf can be overridden with a dotted path, e.g. `privacy.epsilon=2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub n_nodes: usize,
    /// Erdős–Rényi edge probability `p_c`.
    pub edge_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `N_i`.
    pub points_per_node: usize,
    /// `p`.
    pub dimension: usize,
    /// `R`.
    pub half_width: f64,
}

/// Which sensitivity bound calibrates the noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityKind {
    /// `Δ_t = 2R√p η_t`.
    MeanEstimation,
    /// `Δ_t = 2 η_t G` with the corner bound `G = N_i 2R√p`.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: SensitivityKind,
    /// Drop the noise entirely (non-private baseline).
    pub noiseless: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// `T`.
    pub horizon: usize,
    pub stage2_rel_tol: f64,
    /// `0` derives the cap from `β`.
    pub stage2_max_rounds: usize,
    pub probe_node: usize,
}

/// Quantity varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    /// Number of Stage I rounds.
    #[serde(rename = "T")]
    Horizon,
    #[serde(rename = "epsilon")]
    Epsilon,
    /// `δ = (N · N_i)^{−k}` for each value `k`.
    #[serde(rename = "delta_family")]
    DeltaFamily,
    #[serde(rename = "p_c")]
    EdgeProbability,
    #[serde(rename = "points_per_node")]
    PointsPerNode,
}

impl Axis {
    pub const ALL: [Axis; 5] = [
        Axis::Horizon,
        Axis::Epsilon,
        Axis::DeltaFamily,
        Axis::EdgeProbability,
        Axis::PointsPerNode,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Horizon => "T",
            Axis::Epsilon => "epsilon",
            Axis::DeltaFamily => "delta_family",
            Axis::EdgeProbability => "p_c",
            Axis::PointsPerNode => "points_per_node",
        }
    }

    pub fn parse(name: &str) -> Option<Axis> {
        Axis::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Whether changing this axis changes the graph or the data. Privacy and
    /// horizon axes keep both fixed so that only the studied effect varies.
    pub fn regenerates_instance(&self) -> bool {
        matches!(self, Axis::EdgeProbability | Axis::PointsPerNode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    pub samples: usize,
}

/// Full experiment description. `Default` is the reference setting:
/// 10 nodes with 100 points each, `p_c = 0.6`, `p = 4`, `R = 1`, `T = 1000`,
/// `ε = 4`, `δ = 1/(N N_i) = 10⁻³`, 20 seeds per sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphSection,
    pub data: DataSection,
    pub privacy: PrivacySection,
    pub run: RunSection,
    pub sweep: SweepSection,
    pub audit: AuditSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            graph: GraphSection {
                n_nodes: 10,
                edge_probability: 0.6,
            },
            data: DataSection {
                points_per_node: 100,
                dimension: 4,
                half_width: 1.0,
            },
            privacy: PrivacySection {
                epsilon: 4.0,
                delta: 1e-3,
                sensitivity: SensitivityKind::MeanEstimation,
                noiseless: false,
            },
            run: RunSection {
                horizon: 1000,
                stage2_rel_tol: crate::engine::STAGE2_DEFAULT_TOL,
                stage2_max_rounds: 0,
                probe_node: 0,
            },
            sweep: SweepSection {
                axis: Axis::Horizon,
                values: vec![10.0, 100.0, 1000.0],
                n_seeds: 20,
            },
            audit: AuditSection { samples: 10_000 },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Every leaf as `(dotted.key, value)` in document order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("config is always representable as TOML");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }

    /// Applies `key=value`. The key must already exist; the value is parsed
    /// as a TOML literal, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| invalid(assignment, "expected key=value"))?;
        let (key, raw) = (key.trim(), raw.trim());
        let mut doc = toml::Value::try_from(&*self).expect("config is always representable");
        let slot = key
            .split('.')
            .try_fold(&mut doc, |node, part| node.get_mut(part))
            .filter(|node| !node.is_table())
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        *slot = parse_literal(raw, slot);
        let updated: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| invalid(key, e.message().to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn apply_overrides<'a>(
        &mut self,
        assignments: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), ConfigError> {
        assignments
            .into_iter()
            .try_for_each(|a| self.apply_override(a))
    }

    /// `δ = (N · N_i)^{−k}`.
    pub fn delta_for_exponent(&self, k: f64) -> f64 {
        ((self.graph.n_nodes * self.data.points_per_node) as f64).powf(-k)
    }

    /// This configuration with the sweep axis set to `value`.
    pub fn with_axis_value(&self, axis: Axis, value: f64) -> Result<Self, ConfigError> {
        let mut out = self.clone();
        let key = axis.name();
        let as_count = |v: f64| -> Result<usize, ConfigError> {
            if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(invalid(key, format!("{v} is not a positive integer")))
            }
        };
        match axis {
            Axis::Horizon => out.run.horizon = as_count(value)?,
            Axis::Epsilon => out.privacy.epsilon = value,
            Axis::DeltaFamily => out.privacy.delta = self.delta_for_exponent(value),
            Axis::EdgeProbability => out.graph.edge_probability = value,
            Axis::PointsPerNode => out.data.points_per_node = as_count(value)?,
        }
        out.validate()?;
        Ok(out)
    }

    /// Range checks; errors name the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.graph.n_nodes < 1 {
            return Err(invalid("graph.n_nodes", "must be at least 1"));
        }
        let p_c = self.graph.edge_probability;
        if !(p_c > 0.0 && p_c <= 1.0) {
            return Err(invalid(
                "graph.edge_probability",
                format!("{p_c} is not in (0, 1]"),
            ));
        }
        if self.data.points_per_node < 1 {
            return Err(invalid("data.points_per_node", "must be at least 1"));
        }
        if self.data.dimension < 1 {
            return Err(invalid("data.dimension", "must be at least 1"));
        }
        let r = self.data.half_width;
        if !(r.is_finite() && r > 0.0) {
            return Err(invalid("data.half_width", format!("{r} is not positive")));
        }
        let eps = self.privacy.epsilon;
        if !(eps.is_finite() && eps > 0.0) {
            return Err(invalid("privacy.epsilon", format!("{eps} is not positive")));
        }
        let delta = self.privacy.delta;
        if !(delta > 0.0 && delta < 1.0) {
            return Err(invalid(
                "privacy.delta",
                format!("{delta} is not in (0, 1)"),
            ));
        }
        if self.run.horizon < 1 {
            return Err(invalid("run.horizon", "must be at least 1"));
        }
        if self.run.stage2_rel_tol.is_nan() || self.run.stage2_rel_tol < 0.0 {
            return Err(invalid("run.stage2_rel_tol", "must be nonnegative"));
        }
        if self.run.probe_node >= self.graph.n_nodes {
            return Err(invalid(
                "run.probe_node",
                format!("node {} does not exist", self.run.probe_node),
            ));
        }
        if self.sweep.values.is_empty() {
            return Err(invalid("sweep.values", "must not be empty"));
        }
        if self.sweep.n_seeds < 1 {
            return Err(invalid("sweep.n_seeds", "must be at least 1"));
        }
        Ok(())
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

/// Parses `raw` as a TOML value. Integers are widened to floats when the
/// existing value is a float, so `privacy.epsilon=2` works.
fn parse_literal(raw: &str, current: &toml::Value) -> toml::Value {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"));
    match (parsed, current) {
        (Some(toml::Value::Integer(i)), toml::Value::Float(_)) => toml::Value::Float(i as f64),
        (Some(toml::Value::Array(items)), toml::Value::Array(_)) => toml::Value::Array(
            items
                .into_iter()
                .map(|v| match v {
                    toml::Value::Integer(i) => toml::Value::Float(i as f64),
                    other => other,
                })
                .collect(),
        ),
        (Some(v), _) => v,
        (None, _) => toml::Value::String(raw.to_string()),
    }
}
