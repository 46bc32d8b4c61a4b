//! Mean-estimation experiments and parameter sweeps.
//!
//! A run is fully determined by an [`ExperimentConfig`] and one 64-bit *run
//! seed*. From the run seed, [`build_run`] derives
//!
//! - the graph seed `derive_seed(run_seed, [GRAPH])`,
//! - node `i`'s data seed `derive_seed(run_seed, [DATA, i])`,
//! - the noise seed `derive_seed(run_seed, [NOISE])`.
//!
//! A sweep with master seed `m` gives seed index `j` at value index `v` the
//! run seed `derive_seed(m, [v, j])` when the axis changes the graph or data
//! (`p_c`, `points_per_node`), and `derive_seed(m, [j])` otherwise, so that
//! privacy and horizon sweeps compare the same instances and noise streams.

mod config;

pub use config::{
    AuditSection, Axis, ConfigError, DataSection, ExperimentConfig, GraphSection, PrivacySection,
    RunSection, SensitivityKind, SweepSection,
};

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run_full, EngineError, RunConfig, RunMetrics};
use crate::graph::{gen_erdos_renyi, CommGraph, GraphError};
use crate::objectives::{
    gen_truncated_gaussian, mean_objective_constants, BoxDomain, LocalDataset, ObjectiveError,
    ObjectiveSpec,
};
use crate::privacy::{
    build_schedule_with, NoiseSchedule, PrivacyBudget, PrivacyError, SensitivityRule,
};
use crate::rng::{self, tag};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("output: {0}")]
    Csv(#[from] csv::Error),
}

/// The reference sweep: the default configuration over `T ∈ {10, 100, 1000}`.
pub fn default_experiment() -> SweepSpec {
    SweepSpec::from_config(ExperimentConfig::default(), 0)
}

/// Graph and datasets for `run_seed`.
pub fn build_instance(
    cfg: &ExperimentConfig,
    run_seed: u64,
) -> Result<(CommGraph, BoxDomain, Vec<LocalDataset>), ExperimentError> {
    cfg.validate()?;
    let domain = BoxDomain::new(cfg.data.half_width, cfg.data.dimension)?;
    let graph = if cfg.graph.n_nodes == 1 {
        CommGraph::complete(1)?
    } else {
        gen_erdos_renyi(
            cfg.graph.n_nodes,
            cfg.graph.edge_probability,
            rng::derive_seed(run_seed, &[tag::GRAPH]),
        )?
    };
    let datasets = (0..cfg.graph.n_nodes)
        .map(|i| {
            let seed = rng::derive_seed(run_seed, &[tag::DATA, i as u64]);
            gen_truncated_gaussian(i, cfg.data.points_per_node, &domain, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((graph, domain, datasets))
}

/// Network-wide constants of the mean-estimation losses.
pub fn network_spec(
    datasets: &[LocalDataset],
    domain: &BoxDomain,
) -> Result<ObjectiveSpec, ExperimentError> {
    let specs = datasets
        .iter()
        .map(|d| mean_objective_constants(d, domain))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ObjectiveSpec::combine(&specs).ok_or(ObjectiveError::EmptyDataset(0))?)
}

/// The noise schedule the configuration asks for.
pub fn build_noise_schedule(
    cfg: &ExperimentConfig,
    spec: &ObjectiveSpec,
    domain: &BoxDomain,
) -> Result<NoiseSchedule, ExperimentError> {
    let horizon = cfg.run.horizon;
    if cfg.privacy.noiseless {
        return Ok(NoiseSchedule::noiseless(horizon, spec)?);
    }
    let budget = PrivacyBudget::new(cfg.privacy.epsilon, cfg.privacy.delta)?;
    let rule = match cfg.privacy.sensitivity {
        SensitivityKind::MeanEstimation => SensitivityRule::MeanEstimation { domain: *domain },
        SensitivityKind::Generic => SensitivityRule::Generic {
            grad_bound: spec.grad_bound,
        },
    };
    Ok(build_schedule_with(horizon, &budget, spec, &rule)?)
}

/// A ready-to-run configuration for `run_seed`.
pub fn build_run(cfg: &ExperimentConfig, run_seed: u64) -> Result<RunConfig, ExperimentError> {
    let (graph, domain, datasets) = build_instance(cfg, run_seed)?;
    let spec = network_spec(&datasets, &domain)?;
    let schedule = build_noise_schedule(cfg, &spec, &domain)?;
    let mut run = RunConfig::new(
        graph,
        domain,
        datasets,
        schedule,
        rng::derive_seed(run_seed, &[tag::NOISE]),
    );
    run.stage2_rel_tol = cfg.run.stage2_rel_tol;
    run.stage2_max_rounds = cfg.run.stage2_max_rounds;
    run.probe_nodes = vec![cfg.run.probe_node];
    Ok(run)
}

/// One sweep: a base configuration, an axis with its values, and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axis: Axis,
    pub values: Vec<f64>,
    pub n_seeds: usize,
    pub master_seed: u64,
    /// Worker threads; `None` uses rayon's global pool.
    pub jobs: Option<usize>,
    /// Record wall-clock time per run. Off by default because it makes the
    /// output nondeterministic.
    pub record_wall_time: bool,
}

impl SweepSpec {
    /// Takes axis, values and seed count from the `[sweep]` table.
    pub fn from_config(base: ExperimentConfig, master_seed: u64) -> Self {
        Self {
            axis: base.sweep.axis,
            values: base.sweep.values.clone(),
            n_seeds: base.sweep.n_seeds,
            base,
            master_seed,
            jobs: None,
            record_wall_time: false,
        }
    }

    /// Run seed of seed index `seed_index` at value index `value_index`.
    pub fn run_seed(&self, value_index: usize, seed_index: usize) -> u64 {
        if self.axis.regenerates_instance() {
            rng::derive_seed(self.master_seed, &[value_index as u64, seed_index as u64])
        } else {
            rng::derive_seed(self.master_seed, &[seed_index as u64])
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        if self.values.is_empty() {
            return Err(ConfigError::InvalidValue {
                key: "sweep.values".into(),
                reason: "must not be empty".into(),
            }
            .into());
        }
        if self.n_seeds == 0 {
            return Err(ConfigError::InvalidValue {
                key: "sweep.n_seeds".into(),
                reason: "must be at least 1".into(),
            }
            .into());
        }
        Ok(())
    }
}

/// One sweep result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: f64,
    pub seed_index: usize,
    /// Run seed; `build_run(cfg, seed)` replays the run.
    pub seed: u64,
    /// `‖x̄(T) − x*‖² / ‖x*‖²`.
    pub normalized_error: f64,
    /// Normalized error of the probe node at round `T`.
    pub probe_error: f64,
    pub stage2_rounds: usize,
    pub wall_ms: Option<f64>,
}

/// Sweep output in axis-value-major, seed-minor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
}

/// Mean and standard deviation of the errors at one axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSummary {
    pub value: f64,
    pub n_runs: usize,
    pub mean_normalized_error: f64,
    pub std_normalized_error: f64,
    pub mean_probe_error: f64,
    pub std_probe_error: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl SweepTable {
    /// Per-value summaries, in the order values were swept.
    pub fn summary(&self) -> Vec<ValueSummary> {
        let mut out: Vec<ValueSummary> = Vec::new();
        let mut start = 0;
        while start < self.rows.len() {
            let value = self.rows[start].value;
            let end = start
                + self.rows[start..]
                    .iter()
                    .take_while(|r| r.value.to_bits() == value.to_bits())
                    .count();
            let block = &self.rows[start..end];
            let errors: Vec<_> = block.iter().map(|r| r.normalized_error).collect();
            let probes: Vec<_> = block.iter().map(|r| r.probe_error).collect();
            let (mean_normalized_error, std_normalized_error) = mean_std(&errors);
            let (mean_probe_error, std_probe_error) = mean_std(&probes);
            out.push(ValueSummary {
                value,
                n_runs: block.len(),
                mean_normalized_error,
                std_normalized_error,
                mean_probe_error,
                std_probe_error,
            });
            start = end;
        }
        out
    }

    /// `axis,value,seed,normalized_error,probe_error,stage2_rounds,wall_ms`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "axis",
            "value",
            "seed",
            "normalized_error",
            "probe_error",
            "stage2_rounds",
            "wall_ms",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.axis.name().to_string(),
                r.value.to_string(),
                r.seed.to_string(),
                format!("{:e}", r.normalized_error),
                format!("{:e}", r.probe_error),
                r.stage2_rounds.to_string(),
                r.wall_ms.map_or(String::new(), |ms| format!("{ms:.3}")),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            axis: &'a str,
            values: Vec<ValueSummary>,
        }
        serde_json::to_string_pretty(&Doc {
            axis: self.axis.name(),
            values: self.summary(),
        })
        .expect("summary is plain data")
    }
}

fn run_point(
    cfg: &ExperimentConfig,
    axis: Axis,
    value: f64,
    seed_index: usize,
    seed: u64,
    timed: bool,
) -> Result<SweepRow, ExperimentError> {
    let start = Instant::now();
    let run = build_run(cfg, seed)?;
    let metrics: RunMetrics = run_full(&run)?;
    let wall_ms = timed.then(|| start.elapsed().as_secs_f64() * 1e3);
    Ok(SweepRow {
        axis,
        value,
        seed_index,
        seed,
        normalized_error: metrics.stage1_normalized_error().unwrap_or(f64::NAN),
        probe_error: metrics.stage1_probe_error().unwrap_or(f64::NAN),
        stage2_rounds: metrics.stage2_rounds(),
        wall_ms,
    })
}

/// Runs every (value, seed) pair, in parallel, and returns the rows in
/// value-major, seed-minor order regardless of completion order.
pub fn sweep(spec: &SweepSpec) -> Result<SweepTable, ExperimentError> {
    spec.validate()?;
    let configs = spec
        .values
        .iter()
        .map(|&v| spec.base.with_axis_value(spec.axis, v))
        .collect::<Result<Vec<_>, _>>()?;
    let tasks: Vec<(usize, usize)> = (0..spec.values.len())
        .flat_map(|v| (0..spec.n_seeds).map(move |j| (v, j)))
        .collect();
    let work = || {
        tasks
            .par_iter()
            .map(|&(v, j)| {
                run_point(
                    &configs[v],
                    spec.axis,
                    spec.values[v],
                    j,
                    spec.run_seed(v, j),
                    spec.record_wall_time,
                )
            })
            .collect::<Result<Vec<_>, _>>()
    };
    let rows = match spec.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| ExperimentError::Pool(e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    Ok(SweepTable {
        axis: spec.axis,
        rows,
    })
}

/// One instance, `n_runs` noise streams: the instance comes from `run_seed`
/// and replicate `j` uses the noise seed `derive_seed(run_seed, [NOISE, j])`.
/// Results are in replicate order.
pub fn noise_replicates(
    cfg: &ExperimentConfig,
    run_seed: u64,
    n_runs: usize,
) -> Result<(RunConfig, Vec<RunMetrics>), ExperimentError> {
    let base = build_run(cfg, run_seed)?;
    let runs = (0..n_runs as u64)
        .into_par_iter()
        .map(|j| {
            let mut run = base.clone();
            run.noise_seed = rng::derive_seed(run_seed, &[tag::NOISE, j]);
            run_full(&run)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((base, runs))
}

/// Number of adjacent pairs that break a nonincreasing trend.
pub fn count_increases(means: &[f64]) -> usize {
    means.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Number of adjacent pairs that break a strictly decreasing trend.
pub fn count_non_decreases(means: &[f64]) -> usize {
    means.windows(2).filter(|w| w[1] >= w[0]).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.graph.n_nodes = 5;
        cfg.data.points_per_node = 20;
        cfg.run.horizon = 30;
        cfg.sweep.n_seeds = 3;
        cfg
    }

    #[test]
    fn default_experiment_settings() {
        let spec = default_experiment();
        assert_eq!(spec.base.privacy.delta, 1.0 / (10.0 * 100.0));
        assert_eq!(spec.base.graph.n_nodes, 10);
        assert_eq!(spec.base.data.points_per_node, 100);
        assert_eq!(spec.n_seeds, 20);
        assert_eq!(spec.axis, Axis::Horizon);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SweepSpec>(&json).unwrap(), spec);
    }

    #[test]
    fn build_run_is_deterministic() {
        let cfg = small();
        let a = build_run(&cfg, 9).unwrap();
        let b = build_run(&cfg, 9).unwrap();
        assert_eq!(a.datasets, b.datasets);
        assert_eq!(a.graph.adjacency(), b.graph.adjacency());
        assert_eq!(a.noise_seed, b.noise_seed);
        assert_eq!(a.schedule, b.schedule);
    }

    #[test]
    fn sweep_is_ordered_and_reproducible() {
        let mut spec = SweepSpec::from_config(small(), 5);
        spec.axis = Axis::Epsilon;
        spec.values = vec![1.0, 4.0];
        let a = sweep(&spec).unwrap();
        spec.jobs = Some(1);
        let b = sweep(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 6);
        let order: Vec<_> = a.rows.iter().map(|r| (r.value, r.seed_index)).collect();
        assert_eq!(
            order,
            vec![(1.0, 0), (1.0, 1), (1.0, 2), (4.0, 0), (4.0, 1), (4.0, 2)]
        );
        // Privacy axes share instances across values.
        assert_eq!(a.rows[0].seed, a.rows[3].seed);
        assert!(a.rows.iter().all(|r| r.wall_ms.is_none()));
        let summary = a.summary();
        assert_eq!(summary.len(), 2);
        assert_eq!(summary[0].n_runs, 3);
    }

    #[test]
    fn instance_axes_use_fresh_seeds() {
        let mut spec = SweepSpec::from_config(small(), 5);
        spec.axis = Axis::EdgeProbability;
        assert_ne!(spec.run_seed(0, 0), spec.run_seed(1, 0));
    }

    #[test]
    fn csv_layout() {
        let mut spec = SweepSpec::from_config(small(), 1);
        spec.values = vec![10.0];
        spec.n_seeds = 2;
        let table = sweep(&spec).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "axis,value,seed,normalized_error,probe_error,stage2_rounds,wall_ms"
        );
        assert!(lines.next().unwrap().starts_with("T,10,"));
        assert!(table.summary_json().contains("\"axis\": \"T\""));
    }

    #[test]
    fn trend_counters() {
        assert_eq!(count_increases(&[3.0, 2.0, 2.0, 1.0]), 0);
        assert_eq!(count_non_decreases(&[3.0, 2.0, 2.0, 1.0]), 1);
        assert_eq!(count_increases(&[1.0, 2.0, 1.0, 3.0]), 2);
    }

    #[test]
    fn empty_sweeps_are_rejected() {
        let mut spec = SweepSpec::from_config(small(), 1);
        spec.values.clear();
        assert!(sweep(&spec).is_err());
    }
}
