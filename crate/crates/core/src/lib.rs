//! Differentially private consensus-based distributed gradient descent.
//!
//! `N` nodes on a connected graph jointly minimise `Σ_i f_i(x)` over a box,
//! each keeping its local data private. In every round a node mixes its
//! neighbours' noisy broadcasts, takes a projected gradient step, and
//! broadcasts the result perturbed by Gaussian noise. The noise scales are
//! calibrated once, up front, against a single `(ε, δ)` budget for the whole
//! run. A second, noise-free consensus stage then drives the nodes to
//! agreement.
//!
//! | module          | contents                                                  |
//! |-----------------|-----------------------------------------------------------|
//! | [`graph`]       | Erdős–Rényi topologies, mixing matrix `W`, spectral `β`   |
//! | [`objectives`]  | box domain, projection, mean-estimation losses and data   |
//! | [`privacy`]     | `κ(ε, δ)`, sensitivities, noise schedules, loss audits    |
//! | [`engine`]      | the two-stage simulation and its trajectory metrics       |
//! | [`analysis`]    | closed-form utility bounds versus simulation              |
//! | [`experiments`] | configuration files and parameter sweeps                  |
//!
//! ```
//! use dp_consensus::experiments::{build_run, ExperimentConfig};
//! use dp_consensus::engine::run_full;
//!
//! let mut cfg = ExperimentConfig::default();
//! cfg.run.horizon = 50;
//! let run = build_run(&cfg, 7).unwrap();
//! let metrics = run_full(&run).unwrap();
//! assert_eq!(metrics.stage1_rounds(), 50);
//! assert!(metrics.stage1_normalized_error().unwrap().is_finite());
//! ```

pub mod analysis;
pub mod engine;
pub mod experiments;
pub mod graph;
pub mod objectives;
pub mod privacy;
pub mod rng;

pub use engine::{run_full, RunConfig, RunMetrics, SimState};
pub use graph::CommGraph;
pub use objectives::{BoxDomain, LocalDataset, ObjectiveSpec};
pub use privacy::{kappa, NoiseSchedule, PrivacyBudget};
