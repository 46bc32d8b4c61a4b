//! Closed-form utility guarantees and their comparison with simulation.
//!
//! With `c = (μ + L)/(2μL)`, `S(0) = Σ_i ‖x_i(0) − x*‖²` and `κ = κ(ε, δ)`,
//! Stage I satisfies
//!
//! ```text
//! E‖x̄(T) − x*‖² ≤ C_T / T + C_logT · ln T / T + C_⁴√T / T^{1/4} + C_(ε,δ)
//!
//! C_T      = S(0) / N
//! C_logT   = G² (1 + 1/(1−β)) c²
//! C_⁴√T    = 2√(2p) G / √κ · (4 + 3/(1−β)) c²
//! C_(ε,δ)  = (2p/κ) c²
//! ```
//!
//! After Stage II every node is within `2 C_exp β^{2(t−T)}` plus twice the
//! Stage I bound, where `C_exp = 2‖x(T)‖²`.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RunConfig, RunMetrics};
use crate::objectives::{grand_mean, mean_objective_constants, ObjectiveError, ObjectiveSpec};
use crate::privacy::{kappa, PrivacyBudget};

/// Fewest runs accepted by [`empirical_vs_bound`].
pub const MIN_RUNS: usize = 50;

pub const TERM_T: &str = "C_T/T";
pub const TERM_LOG_T: &str = "C_logT*ln(T)/T";
pub const TERM_FOURTH_ROOT_T: &str = "C_4rtT/T^(1/4)";
pub const TERM_EPS_DELTA: &str = "C_eps_delta";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid bound input `{name}`: {reason}")]
    InvalidInput { name: &'static str, reason: String },
    #[error("need at least {min} runs, got {got}")]
    TooFewRuns { min: usize, got: usize },
    #[error("run {0} has no Stage I rounds")]
    MissingStage1(usize),
    #[error("Stage II bound needs t > T = {horizon}, got t = {t}")]
    NotStage2 { t: usize, horizon: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Everything the bounds depend on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `S(0)`.
    pub s0: f64,
    pub spec: ObjectiveSpec,
    pub n_nodes: usize,
    pub beta: f64,
    /// `None` stands for no noise (`κ = ∞`): the privacy terms vanish.
    pub budget: Option<PrivacyBudget>,
    /// The `G` used to evaluate `κ`; defaults to `spec.grad_bound`.
    pub privacy_grad_bound: Option<f64>,
    pub horizon: usize,
    pub x_star: DVector<f64>,
}

impl BoundInputs {
    /// Inputs for the mean-estimation run described by `config`, started from
    /// `x(0) = 0`, with `κ` evaluated at the per-point bound `G = R√p`.
    pub fn for_mean_estimation(
        config: &RunConfig,
        budget: Option<PrivacyBudget>,
    ) -> Result<Self, AnalysisError> {
        let specs = config
            .datasets
            .iter()
            .map(|d| mean_objective_constants(d, &config.domain))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = ObjectiveSpec::combine(&specs).ok_or(AnalysisError::InvalidInput {
            name: "datasets",
            reason: "empty".into(),
        })?;
        let x_star = grand_mean(&config.datasets)?;
        let n = config.n_nodes();
        Ok(Self {
            s0: n as f64 * x_star.norm_squared(),
            spec,
            n_nodes: n,
            beta: config.graph.beta(),
            budget,
            privacy_grad_bound: Some(config.domain.diameter() / 2.0),
            horizon: config.horizon(),
            x_star,
        })
    }

    fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |name, reason: &str| {
            Err(AnalysisError::InvalidInput {
                name,
                reason: reason.to_string(),
            })
        };
        if !(self.beta >= 0.0 && self.beta < 1.0) {
            return bad("beta", "must lie in [0, 1)");
        }
        if self.horizon == 0 {
            return bad("horizon", "must be at least 1");
        }
        if self.n_nodes == 0 {
            return bad("n_nodes", "must be at least 1");
        }
        if self.s0.is_nan() || self.s0 < 0.0 {
            return bad("s0", "must be nonnegative");
        }
        if self.spec.validate().is_err() {
            return bad("spec", "invalid objective constants");
        }
        if self
            .privacy_grad_bound
            .is_some_and(|g| g.is_nan() || g <= 0.0)
        {
            return bad("privacy_grad_bound", "must be positive");
        }
        Ok(())
    }

    /// `κ(ε, δ)`, or `+∞` without a budget.
    pub fn kappa(&self) -> f64 {
        match &self.budget {
            Some(b) => kappa(b, self.privacy_grad_bound.unwrap_or(self.spec.grad_bound)),
            None => f64::INFINITY,
        }
    }
}

/// The four constants of the Stage I bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Constants {
    pub c_t: f64,
    pub c_log_t: f64,
    pub c_fourth_root_t: f64,
    pub c_eps_delta: f64,
}

impl Theorem2Constants {
    pub fn new(inputs: &BoundInputs) -> Self {
        let c = inputs.spec.step_scale();
        let g = inputs.spec.grad_bound;
        let p = inputs.spec.dimension as f64;
        let gap = 1.0 / (1.0 - inputs.beta);
        let k = inputs.kappa();
        Self {
            c_t: inputs.s0 / inputs.n_nodes as f64,
            c_log_t: g * g * (1.0 + gap) * c * c,
            c_fourth_root_t: 2.0 * (2.0 * p).sqrt() * g / k.sqrt() * (4.0 + 3.0 * gap) * c * c,
            c_eps_delta: 2.0 * p / k * c * c,
        }
    }

    /// The two proof-level pieces of `C_⁴√T`: `8√(2p)G c²/√κ` and
    /// `6√(2p)G c² / ((1−β)√κ)`.
    pub fn fourth_root_split(inputs: &BoundInputs) -> (f64, f64) {
        let c = inputs.spec.step_scale();
        let g = inputs.spec.grad_bound;
        let root = (2.0 * inputs.spec.dimension as f64).sqrt();
        let sk = inputs.kappa().sqrt();
        (
            8.0 * root * g / sk * c * c,
            2.0 * root * g * (3.0 / (1.0 - inputs.beta)) / sk * c * c,
        )
    }
}

/// Evaluated Stage I bound with its named terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Bound {
    pub constants: Theorem2Constants,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

impl Theorem2Bound {
    /// The same bound with `C_(ε,δ)` multiplied by `factor`.
    ///
    /// Shrinking the dominant privacy term shows whether a comparison against
    /// the bound is informative at all.
    pub fn with_privacy_term_scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.constants.c_eps_delta *= factor;
        out.terms
            .insert(TERM_EPS_DELTA.into(), out.constants.c_eps_delta);
        out.total = out.terms.values().sum();
        out
    }
}

/// Evaluates the Stage I bound on `E‖x̄(T) − x*‖²`.
pub fn theorem2_bound(inputs: &BoundInputs) -> Result<Theorem2Bound, AnalysisError> {
    inputs.validate()?;
    let constants = Theorem2Constants::new(inputs);
    let t = inputs.horizon as f64;
    let terms: BTreeMap<String, f64> = [
        (TERM_T, constants.c_t / t),
        (TERM_LOG_T, constants.c_log_t * t.ln() / t),
        (TERM_FOURTH_ROOT_T, constants.c_fourth_root_t / t.powf(0.25)),
        (TERM_EPS_DELTA, constants.c_eps_delta),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let total = terms.values().sum();
    Ok(Theorem2Bound {
        constants,
        terms,
        total,
    })
}

/// Per-node bound after `t − T` Stage II rounds:
/// `2 C_exp β^{2(t−T)} + 2 · (Stage I bound)`, with `C_exp = 2‖x(T)‖²`.
pub fn stage2_bound(
    inputs: &BoundInputs,
    t: usize,
    x_t_norm_sq: f64,
) -> Result<f64, AnalysisError> {
    if t <= inputs.horizon {
        return Err(AnalysisError::NotStage2 {
            t,
            horizon: inputs.horizon,
        });
    }
    let stage1 = theorem2_bound(inputs)?;
    let c_exp = 2.0 * x_t_norm_sq;
    let decay = inputs.beta.powi(2 * (t - inputs.horizon) as i32);
    Ok(2.0 * c_exp * decay + 2.0 * stage1.total)
}

/// Monte Carlo mean of `‖x̄(T) − x*‖²` against a bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    pub empirical_mean: f64,
    /// Standard error of `empirical_mean`.
    pub empirical_stderr: f64,
    pub n_runs: usize,
    /// `total − empirical_mean`.
    pub margin: f64,
    pub pass: bool,
}

/// Compares the seed average of `‖x̄(T) − x*‖²` with `bound`.
pub fn compare_with_bound(
    runs: &[RunMetrics],
    bound: &Theorem2Bound,
) -> Result<BoundReport, AnalysisError> {
    if runs.len() < MIN_RUNS {
        return Err(AnalysisError::TooFewRuns {
            min: MIN_RUNS,
            got: runs.len(),
        });
    }
    let errors = runs
        .iter()
        .enumerate()
        .map(|(i, r)| r.stage1_sq_error().ok_or(AnalysisError::MissingStage1(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(BoundReport {
        terms: bound.terms.clone(),
        total: bound.total,
        empirical_mean: mean,
        empirical_stderr: (var / n).sqrt(),
        n_runs: runs.len(),
        margin: bound.total - mean,
        pass: mean <= bound.total,
    })
}

/// [`compare_with_bound`] against [`theorem2_bound`]`(inputs)`.
pub fn empirical_vs_bound(
    runs: &[RunMetrics],
    inputs: &BoundInputs,
) -> Result<BoundReport, AnalysisError> {
    compare_with_bound(runs, &theorem2_bound(inputs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> BoundInputs {
        BoundInputs {
            s0: 5.0,
            spec: ObjectiveSpec::new(400.0, 100.0, 100.0, 4).unwrap(),
            n_nodes: 10,
            beta: 0.5,
            budget: Some(PrivacyBudget::new(4.0, 1e-3).unwrap()),
            privacy_grad_bound: Some(2.0),
            horizon: 1000,
            x_star: DVector::zeros(4),
        }
    }

    #[test]
    fn constants_by_hand() {
        let i = inputs();
        let c = Theorem2Constants::new(&i);
        let k = i.kappa();
        assert!((k - 0.208_312_4 / 4.0).abs() < 1e-6);
        assert_eq!(c.c_t, 0.5);
        assert!((c.c_log_t - 160_000.0 * 3.0 * 1e-4).abs() < 1e-9);
        assert!((c.c_eps_delta - 8.0 / k * 1e-4).abs() < 1e-15);
        let expected = 2.0 * 8f64.sqrt() * 400.0 / k.sqrt() * 10.0 * 1e-4;
        assert!((c.c_fourth_root_t - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn fourth_root_constant_equals_proof_split() {
        for beta in [0.0, 0.3, 0.9, 0.999] {
            let i = BoundInputs { beta, ..inputs() };
            let (a, b) = Theorem2Constants::fourth_root_split(&i);
            let c = Theorem2Constants::new(&i).c_fourth_root_t;
            assert!((a + b - c).abs() <= 1e-12 * c);
        }
    }

    #[test]
    fn terms_sum_to_total() {
        let b = theorem2_bound(&inputs()).unwrap();
        assert_eq!(b.terms.len(), 4);
        let sum: f64 = b.terms.values().sum();
        assert!((sum - b.total).abs() <= 1e-12 * b.total);
    }

    #[test]
    fn large_horizon_approaches_privacy_floor() {
        // Unit constants: κ = 0.2083, C_(ε,δ) = 2/κ = 9.60, C_⁴√T = 43.4.
        let unit = BoundInputs {
            s0: 1.0,
            spec: ObjectiveSpec::new(1.0, 1.0, 1.0, 1).unwrap(),
            n_nodes: 1,
            beta: 0.0,
            privacy_grad_bound: None,
            x_star: DVector::zeros(1),
            ..inputs()
        };
        let floor = 2.0 / unit.kappa();
        let rel = |horizon| {
            let b = theorem2_bound(&BoundInputs {
                horizon,
                ..unit.clone()
            })
            .unwrap();
            assert_eq!(b.constants.c_eps_delta, floor);
            b.total / floor - 1.0
        };
        // The T^{-1/4} term decays slowly: 4.5% above the floor at 10⁸,
        // under 1% by 10¹².
        assert!((rel(100_000_000) - 43.39 / 100.0 / floor).abs() < 1e-3);
        assert!(rel(1_000_000_000_000) < 0.01);
        assert!(rel(1_000_000_000_000) > 0.0);
    }

    #[test]
    fn monotonicity_grids() {
        let total = |i: &BoundInputs| theorem2_bound(i).unwrap().total;
        for horizon in [1, 10, 1000] {
            let base = BoundInputs {
                horizon,
                ..inputs()
            };
            let eps: Vec<_> = [0.5, 1.0, 2.0, 4.0, 8.0]
                .iter()
                .map(|&e| {
                    total(&BoundInputs {
                        budget: Some(PrivacyBudget::new(e, 1e-3).unwrap()),
                        ..base.clone()
                    })
                })
                .collect();
            assert!(eps.windows(2).all(|w| w[1] <= w[0]), "{eps:?}");
            let betas: Vec<_> = [0.0, 0.2, 0.5, 0.9, 0.99]
                .iter()
                .map(|&beta| {
                    total(&BoundInputs {
                        beta,
                        ..base.clone()
                    })
                })
                .collect();
            assert!(betas.windows(2).all(|w| w[1] >= w[0]));
            let gs: Vec<_> = [1.0, 10.0, 400.0]
                .iter()
                .map(|&g| {
                    let spec = ObjectiveSpec {
                        grad_bound: g,
                        ..base.spec
                    };
                    total(&BoundInputs {
                        spec,
                        privacy_grad_bound: None,
                        ..base.clone()
                    })
                })
                .collect();
            assert!(gs.windows(2).all(|w| w[1] >= w[0]));
            let ps: Vec<_> = [1, 2, 4, 16]
                .iter()
                .map(|&p| {
                    let spec = ObjectiveSpec {
                        dimension: p,
                        ..base.spec
                    };
                    total(&BoundInputs {
                        spec,
                        ..base.clone()
                    })
                })
                .collect();
            assert!(ps.windows(2).all(|w| w[1] >= w[0]));
            let c = Theorem2Constants::new(&base);
            assert!(c.c_t >= 0.0 && c.c_log_t >= 0.0);
            assert!(c.c_fourth_root_t >= 0.0 && c.c_eps_delta >= 0.0);
        }
    }

    #[test]
    fn doubling_epsilon_lowers_privacy_constant() {
        let a = Theorem2Constants::new(&inputs());
        let b = Theorem2Constants::new(&BoundInputs {
            budget: Some(PrivacyBudget::new(8.0, 1e-3).unwrap()),
            ..inputs()
        });
        assert!(b.c_eps_delta < a.c_eps_delta);
    }

    #[test]
    fn gap_terms_diverge_like_inverse_spectral_gap() {
        let at = |beta| Theorem2Constants::new(&BoundInputs { beta, ..inputs() });
        let (a, b) = (at(0.99), at(0.999));
        assert!((b.c_log_t / a.c_log_t - 1001.0 / 101.0).abs() < 1e-9);
        assert!((b.c_fourth_root_t / a.c_fourth_root_t - 3004.0 / 304.0).abs() < 1e-9);
    }

    #[test]
    fn no_budget_drops_privacy_terms() {
        let b = theorem2_bound(&BoundInputs {
            budget: None,
            ..inputs()
        })
        .unwrap();
        assert_eq!(b.constants.c_eps_delta, 0.0);
        assert_eq!(b.constants.c_fourth_root_t, 0.0);
    }

    #[test]
    fn stage2_examples() {
        let i = BoundInputs {
            beta: 1.0 / 3.0,
            ..inputs()
        };
        let stage1 = theorem2_bound(&i).unwrap().total;
        assert!(stage2_bound(&i, 1000, 1.0).is_err());
        let b = stage2_bound(&i, 1005, 1.0).unwrap();
        assert!((b - (4.0 / 59049.0 + 2.0 * stage1)).abs() < 1e-12);
        let tol = 1e-9f64;
        let k = ((1.0 / tol).ln() / (2.0 * 3f64.ln())).ceil() as usize;
        let exp_part = stage2_bound(&i, 1000 + k, 1.0).unwrap() - 2.0 * stage1;
        assert!(exp_part <= tol * 2.0 * 2.0 * (1.0 + 1e-9));
        let first = stage2_bound(&i, 1001, 100.0).unwrap();
        assert!(2.0 * 200.0 / 9.0 > 2.0 * stage1);
        assert!((first - 2.0 * 200.0 / 9.0 - 2.0 * stage1).abs() < 1e-9);
    }

    #[test]
    fn too_few_runs() {
        let b = theorem2_bound(&inputs()).unwrap();
        assert!(matches!(
            compare_with_bound(&[], &b),
            Err(AnalysisError::TooFewRuns { min: 50, got: 0 })
        ));
    }

    #[test]
    fn mutation_scales_only_privacy_term() {
        let b = theorem2_bound(&inputs()).unwrap();
        let half = b.with_privacy_term_scaled(0.5);
        assert!((b.total - half.total - b.constants.c_eps_delta / 2.0).abs() < 1e-12);
    }
}
