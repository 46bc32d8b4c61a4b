//! The two-stage private distributed gradient method.
//!
//! **Stage I** runs `T` synchronous rounds. In round `t` node `i` receives
//! the broadcasts `y_j(t)` of its neighbours and computes
//!
//! ```text
//! ẑ_i(t) = Σ_j w_ij y_j(t)
//! z_i(t) = Π(ẑ_i(t))
//! x_i(t) = Π(z_i(t) − η_t ∇f_i(z_i(t)))
//! y_i(t+1) = x_i(t) + n_i(t),   n_i(t) ~ N(0, M_t² I_p)
//! ```
//!
//! with `y_i(1) = 0`. The noise attached to `x(t)` therefore has scale `M_t`,
//! the scale accounted for round `t` by the privacy module.
//!
//! **Stage II** mixes the last noisy broadcasts `y(T+1)` with plain
//! consensus `x(t) = W x(t−1)` until every node's relative change drops
//! below a tolerance. No data is touched, so it costs no privacy.
//!
//! Each round draws exactly `N·p` standard normals from one ChaCha20 stream,
//! node-major and coordinate-minor, whether or not `M_t` is zero.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::CommGraph;
use crate::objectives::{grand_mean, BoxDomain, LocalDataset, ObjectiveError};
use crate::privacy::NoiseSchedule;
use crate::rng;

/// Default Stage II relative-change tolerance.
pub const STAGE2_DEFAULT_TOL: f64 = 1e-9;
/// Hard ceiling on Stage II rounds, whatever the tolerance.
pub const STAGE2_HARD_CAP: usize = 100_000;
/// Floor on the denominator of the relative-change criterion.
const REL_CHANGE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration `{name}`: {reason}")]
    InvalidConfig { name: &'static str, reason: String },
    #[error("non-finite iterate at node {node} in round {round}")]
    NonFinite { round: usize, node: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

fn invalid(name: &'static str, reason: impl Into<String>) -> EngineError {
    EngineError::InvalidConfig {
        name,
        reason: reason.into(),
    }
}

/// Everything one simulation needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub graph: CommGraph,
    pub domain: BoxDomain,
    pub datasets: Vec<LocalDataset>,
    pub schedule: NoiseSchedule,
    /// Stage II round cap; `0` derives it from `β` and the tolerance.
    pub stage2_max_rounds: usize,
    pub stage2_rel_tol: f64,
    pub noise_seed: u64,
    /// Nodes whose individual error is tracked.
    pub probe_nodes: Vec<usize>,
}

impl RunConfig {
    /// A configuration with the default Stage II rule and node 0 as probe.
    pub fn new(
        graph: CommGraph,
        domain: BoxDomain,
        datasets: Vec<LocalDataset>,
        schedule: NoiseSchedule,
        noise_seed: u64,
    ) -> Self {
        Self {
            graph,
            domain,
            datasets,
            schedule,
            stage2_max_rounds: 0,
            stage2_rel_tol: STAGE2_DEFAULT_TOL,
            noise_seed,
            probe_nodes: vec![0],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn dimension(&self) -> usize {
        self.domain.dimension
    }

    pub fn horizon(&self) -> usize {
        self.schedule.horizon()
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let n = self.n_nodes();
        if self.datasets.len() != n {
            return Err(invalid(
                "datasets",
                format!("{} datasets for {n} nodes", self.datasets.len()),
            ));
        }
        for ds in &self.datasets {
            let p = ds.dimension()?;
            if p != self.dimension() {
                return Err(ObjectiveError::DimensionMismatch {
                    expected: self.dimension(),
                    got: p,
                }
                .into());
            }
            ds.check_domain(&self.domain)?;
        }
        if self.schedule.scales().iter().any(|m| !m.is_finite()) {
            return Err(invalid("schedule", "noise scales must be finite"));
        }
        if self.stage2_rel_tol.is_nan() || self.stage2_rel_tol < 0.0 {
            return Err(invalid("stage2_rel_tol", "must be nonnegative"));
        }
        if let Some(&bad) = self.probe_nodes.iter().find(|&&i| i >= n) {
            return Err(invalid("probe_nodes", format!("node {bad} does not exist")));
        }
        Ok(())
    }

    /// Stage II round cap: the explicit value, or
    /// `⌈10 ln(1/tol) / ln(1/β)⌉` (at least 1, at most [`STAGE2_HARD_CAP`]).
    pub fn stage2_cap(&self) -> usize {
        if self.stage2_max_rounds > 0 {
            return self.stage2_max_rounds;
        }
        let beta = self.graph.beta();
        if beta <= 0.0 {
            return 1;
        }
        let rounds = 10.0 * (1.0 / self.stage2_rel_tol).ln() / (1.0 / beta).ln();
        if rounds.is_finite() {
            (rounds.ceil() as usize).clamp(1, STAGE2_HARD_CAP)
        } else {
            STAGE2_HARD_CAP
        }
    }
}

/// Node states after a round; row `i` belongs to node `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub round: usize,
    /// `x(t)`.
    pub x: DMatrix<f64>,
    /// Broadcasts received this round, `y(t)`.
    pub y: DMatrix<f64>,
    /// Projected consensus points `z(t)`.
    pub z: DMatrix<f64>,
    /// Unprojected consensus points `ẑ(t) = W y(t)`.
    pub z_hat: DMatrix<f64>,
    /// `n(t)`, attached to `x(t)` in the next broadcast. Zero in Stage II.
    pub noise: DMatrix<f64>,
}

impl SimState {
    fn zeros(n: usize, p: usize) -> Self {
        let z = DMatrix::zeros(n, p);
        Self {
            round: 0,
            x: z.clone(),
            y: z.clone(),
            z: z.clone(),
            z_hat: z.clone(),
            noise: z,
        }
    }

    /// The messages nodes send after this round: `x(t) + n(t)`.
    pub fn outgoing(&self) -> DMatrix<f64> {
        &self.x + &self.noise
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::One => "1",
            Stage::Two => "2",
        }
    }
}

/// Diagnostics of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub stage: Stage,
    pub t: usize,
    /// `x̄(t)`.
    pub mean_iterate: DVector<f64>,
    /// `‖x(t) − 𝟙 x̄(t)ᵀ‖_F`.
    pub consensus_dev: f64,
    /// `‖x̄(t) − x*‖² / ‖x*‖²`.
    pub normalized_error: f64,
    /// `‖x_i(t) − x*‖² / ‖x*‖²` for each probe node.
    pub probe_errors: Vec<f64>,
    /// `Δ_t² / M_t²`; zero in Stage II.
    pub spend: f64,
}

/// Trajectory summary of a run, one record per executed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Reference point: the grand mean of all data.
    pub x_star: DVector<f64>,
    pub probe_nodes: Vec<usize>,
    pub records: Vec<RoundRecord>,
    /// Frobenius norm of the Stage II entry messages `y(T+1)`.
    pub stage2_entry_norm: Option<f64>,
    /// Mean of the Stage II entry messages.
    pub stage2_entry_mean: Option<DVector<f64>>,
}

/// Stage II invariant diagnostics; see [`RunMetrics::stage2_invariants`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Invariants {
    /// Largest `‖x̄(t) − x̄(T+1)‖_∞` over Stage II.
    pub max_mean_drift: f64,
    /// Largest `consensus_dev(t) / (β^{t−T} ‖y(T+1)‖)` over Stage II.
    pub max_contraction_ratio: f64,
}

impl Stage2Invariants {
    pub fn holds(&self, mean_tol: f64, rel_slack: f64) -> bool {
        self.max_mean_drift <= mean_tol && self.max_contraction_ratio <= 1.0 + rel_slack
    }
}

impl RunMetrics {
    fn new(x_star: DVector<f64>, probe_nodes: Vec<usize>) -> Self {
        Self {
            x_star,
            probe_nodes,
            records: Vec::new(),
            stage2_entry_norm: None,
            stage2_entry_mean: None,
        }
    }

    pub fn stage1_rounds(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.stage == Stage::One)
            .count()
    }

    pub fn stage2_rounds(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.stage == Stage::Two)
            .count()
    }

    /// The record of round `T`.
    pub fn stage1_final(&self) -> Option<&RoundRecord> {
        self.records.iter().rev().find(|r| r.stage == Stage::One)
    }

    pub fn last(&self) -> Option<&RoundRecord> {
        self.records.last()
    }

    /// `‖x̄(T) − x*‖²`.
    pub fn stage1_sq_error(&self) -> Option<f64> {
        self.stage1_final()
            .map(|r| (&r.mean_iterate - &self.x_star).norm_squared())
    }

    /// Normalized error at round `T`.
    pub fn stage1_normalized_error(&self) -> Option<f64> {
        self.stage1_final().map(|r| r.normalized_error)
    }

    /// Error of the first probe node at round `T`.
    pub fn stage1_probe_error(&self) -> Option<f64> {
        self.stage1_final()
            .and_then(|r| r.probe_errors.first().copied())
    }

    /// Checks that Stage II preserves the mean of the entry messages and
    /// contracts disagreement at least as fast as `β^{t−T}`.
    pub fn stage2_invariants(&self, beta: f64) -> Option<Stage2Invariants> {
        let entry_mean = self.stage2_entry_mean.as_ref()?;
        let entry_norm = self.stage2_entry_norm?;
        let horizon = self.stage1_rounds();
        let mut out = Stage2Invariants {
            max_mean_drift: 0.0,
            max_contraction_ratio: 0.0,
        };
        for r in self.records.iter().filter(|r| r.stage == Stage::Two) {
            let drift = (&r.mean_iterate - entry_mean).amax();
            out.max_mean_drift = out.max_mean_drift.max(drift);
            let envelope = beta.powi((r.t - horizon) as i32) * entry_norm;
            let ratio = if r.consensus_dev == 0.0 {
                0.0
            } else {
                r.consensus_dev / envelope
            };
            out.max_contraction_ratio = out.max_contraction_ratio.max(ratio);
        }
        Some(out)
    }

    /// Writes `stage,t,normalized_error,consensus_dev,probe_error` rows.
    pub fn write_trajectory_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "stage",
            "t",
            "normalized_error",
            "consensus_dev",
            "probe_error",
        ])?;
        for r in &self.records {
            let probe = r
                .probe_errors
                .first()
                .map_or(String::new(), |e| format!("{e:e}"));
            w.write_record([
                r.stage.as_str().to_string(),
                r.t.to_string(),
                format!("{:e}", r.normalized_error),
                format!("{:e}", r.consensus_dev),
                probe,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// `‖m − 𝟙 m̄ᵀ‖_F`.
pub fn consensus_deviation(m: &DMatrix<f64>) -> f64 {
    let mean = column_mean(m);
    m.row_iter()
        .map(|row| {
            row.iter()
                .zip(mean.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

struct Recorder {
    x_star: DVector<f64>,
    scale: f64,
    probes: Vec<usize>,
}

impl Recorder {
    fn new(config: &RunConfig) -> Result<Self, EngineError> {
        let x_star = grand_mean(&config.datasets)?;
        let norm = x_star.norm_squared();
        // A zero grand mean leaves the error unnormalized.
        let scale = if norm > 0.0 { 1.0 / norm } else { 1.0 };
        Ok(Self {
            x_star,
            scale,
            probes: config.probe_nodes.clone(),
        })
    }

    fn record(&self, stage: Stage, t: usize, x: &DMatrix<f64>, spend: f64) -> RoundRecord {
        let mean = column_mean(x);
        let probe_errors = self
            .probes
            .iter()
            .map(|&i| {
                let row = x.row(i).transpose();
                (row - &self.x_star).norm_squared() * self.scale
            })
            .collect();
        RoundRecord {
            stage,
            t,
            consensus_dev: consensus_deviation(x),
            normalized_error: (&mean - &self.x_star).norm_squared() * self.scale,
            mean_iterate: mean,
            probe_errors,
            spend,
        }
    }

    fn metrics(&self) -> RunMetrics {
        RunMetrics::new(self.x_star.clone(), self.probes.clone())
    }
}

/// Steps Stage I one round at a time.
///
/// Exposed within the crate so the privacy auditor can observe every round
/// of the reference run.
pub(crate) struct Stage1Runner<'a> {
    config: &'a RunConfig,
    rng: ChaCha20Rng,
    state: SimState,
    broadcast: DMatrix<f64>,
    counts: Vec<f64>,
    sums: Vec<DVector<f64>>,
    order: Vec<usize>,
}

impl<'a> Stage1Runner<'a> {
    pub(crate) fn new(config: &'a RunConfig, noise_seed: u64) -> Result<Self, EngineError> {
        config.validate()?;
        let (n, p) = (config.n_nodes(), config.dimension());
        Ok(Self {
            config,
            rng: rng::stream(noise_seed),
            state: SimState::zeros(n, p),
            broadcast: DMatrix::zeros(n, p),
            counts: config.datasets.iter().map(|d| d.len() as f64).collect(),
            sums: config.datasets.iter().map(LocalDataset::sum).collect(),
            order: (0..n).collect(),
        })
    }

    /// Visits nodes in `order` during the local step. Results must not
    /// depend on it; tests use this to check synchrony.
    #[cfg(test)]
    pub(crate) fn with_update_order(mut self, order: Vec<usize>) -> Self {
        self.order = order;
        self
    }

    pub(crate) fn is_done(&self) -> bool {
        self.state.round >= self.config.horizon()
    }

    pub(crate) fn state(&self) -> &SimState {
        &self.state
    }

    pub(crate) fn into_state(self) -> SimState {
        self.state
    }

    /// Local gradient `N_i z − Σ_{d ∈ D_i} d` at node `i`.
    pub(crate) fn local_step(&self, i: usize, z: &DVector<f64>, eta: f64) -> DVector<f64> {
        projected_step(z, self.counts[i], &self.sums[i], eta, &self.config.domain)
    }

    /// Executes the next round.
    pub(crate) fn step(&mut self) -> Result<(), EngineError> {
        let t = self.state.round + 1;
        let cfg = self.config;
        let (n, p) = (cfg.n_nodes(), cfg.dimension());
        let eta = cfg.schedule.step_size(t);
        let scale = cfg.schedule.scale(t);

        let y = std::mem::replace(&mut self.broadcast, DMatrix::zeros(n, p));
        let z_hat = cfg.graph.weights() * &y;
        let mut z = z_hat.clone();
        for mut row in z.row_iter_mut() {
            for v in row.iter_mut() {
                *v = v.clamp(-cfg.domain.half_width, cfg.domain.half_width);
            }
        }

        let mut x = DMatrix::zeros(n, p);
        for &i in &self.order {
            let zi = z.row(i).transpose();
            let xi = self.local_step(i, &zi, eta);
            if xi.iter().any(|v| !v.is_finite()) {
                return Err(EngineError::NonFinite { round: t, node: i });
            }
            x.set_row(i, &xi.transpose());
        }

        let mut noise = DMatrix::zeros(n, p);
        for i in 0..n {
            for k in 0..p {
                noise[(i, k)] = scale * rng::standard_normal(&mut self.rng);
            }
        }

        self.broadcast = &x + &noise;
        self.state = SimState {
            round: t,
            x,
            y,
            z,
            z_hat,
            noise,
        };
        Ok(())
    }
}

/// `Π(z − η (count·z − sum))`: the projected gradient step of the quadratic
/// loss whose points sum to `sum`.
pub(crate) fn projected_step(
    z: &DVector<f64>,
    count: f64,
    sum: &DVector<f64>,
    eta: f64,
    domain: &BoxDomain,
) -> DVector<f64> {
    let mut x = z - (z * count - sum) * eta;
    domain.project_in_place(x.as_mut_slice());
    x
}

/// Stage I: `T` noisy rounds. Returns the state after round `T`.
pub fn run_stage1(config: &RunConfig) -> Result<(SimState, RunMetrics), EngineError> {
    let recorder = Recorder::new(config)?;
    let mut metrics = recorder.metrics();
    let mut runner = Stage1Runner::new(config, config.noise_seed)?;
    let spend = config.schedule.spend();
    while !runner.is_done() {
        runner.step()?;
        let s = runner.state();
        metrics
            .records
            .push(recorder.record(Stage::One, s.round, &s.x, spend[s.round - 1]));
    }
    Ok((runner.into_state(), metrics))
}

/// Stage II: plain consensus on the last Stage I broadcasts.
pub fn run_stage2(
    state: &SimState,
    config: &RunConfig,
) -> Result<(SimState, RunMetrics), EngineError> {
    config.validate()?;
    let recorder = Recorder::new(config)?;
    let mut metrics = recorder.metrics();
    let weights = config.graph.weights();
    let cap = config.stage2_cap();

    let mut y = state.outgoing();
    metrics.stage2_entry_norm = Some(y.norm());
    metrics.stage2_entry_mean = Some(column_mean(&y));

    let mut out = state.clone();
    for k in 1..=cap {
        let x = weights * &y;
        let t = state.round + k;
        let mut max_change: f64 = 0.0;
        for i in 0..x.nrows() {
            let prev = y.row(i);
            let change = (x.row(i) - prev).norm() / prev.norm().max(REL_CHANGE_FLOOR);
            if !change.is_finite() {
                return Err(EngineError::NonFinite { round: t, node: i });
            }
            max_change = max_change.max(change);
        }
        metrics
            .records
            .push(recorder.record(Stage::Two, t, &x, 0.0));
        out = SimState {
            round: t,
            z_hat: x.clone(),
            z: x.clone(),
            noise: DMatrix::zeros(x.nrows(), x.ncols()),
            y,
            x,
        };
        if max_change < config.stage2_rel_tol {
            break;
        }
        y = out.x.clone();
    }
    Ok((out, metrics))
}

/// Both stages; the metrics carry a stage marker per round.
pub fn run(config: &RunConfig) -> Result<(SimState, RunMetrics), EngineError> {
    let (state, mut metrics) = run_stage1(config)?;
    let (state, tail) = run_stage2(&state, config)?;
    metrics.records.extend(tail.records);
    metrics.stage2_entry_norm = tail.stage2_entry_norm;
    metrics.stage2_entry_mean = tail.stage2_entry_mean;
    Ok((state, metrics))
}

pub fn run_full(config: &RunConfig) -> Result<RunMetrics, EngineError> {
    run(config).map(|(_, m)| m)
}
