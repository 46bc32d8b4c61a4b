//! Privacy accounting for the noisy consensus protocol.
//!
//! An adversary sees every broadcast. Round `t` perturbs the iterate `x(t)`
//! with `N(0, M_t² I)` noise, and a run is `(ε, δ)`-differentially private as
//! soon as the per-round conditional sensitivities `Δ_t` satisfy
//!
//! ```text
//! Σ_t Δ_t² / M_t²  ≤  ε² / (ε + 2 ln(2/δ))
//! ```
//!
//! The right-hand side is the *allowance*. Dividing it by `4G²` gives the
//! budget constant `κ(ε, δ)` that bounds `Σ_t η_t² / M_t²` whenever
//! `Δ_t = 2 η_t G`.

mod audit;
mod schedule;

pub use audit::{
    audit_tail, privacy_loss_coupled_run, run_audit, AuditReport, LossSummary, NeighborEdit,
    PrivacyLossSample, MIN_AUDIT_SAMPLES,
};
pub use schedule::{budget_check, build_schedule, build_schedule_with, BudgetCheck, NoiseSchedule};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::BoxDomain;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("invalid privacy parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("privacy budget violated: spent {spent:.6} > allowance {allowance:.6}")]
    BudgetViolation { spent: f64, allowance: f64 },
    #[error("length mismatch: schedule has {expected} rounds, got {got} sensitivities")]
    LengthMismatch { expected: usize, got: usize },
    #[error("tail audit needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("neighbouring datasets must differ in exactly one point, found {0}")]
    AmbiguousEdit(usize),
    #[error("edit replacement lies outside the domain box")]
    EditOutOfDomain,
    #[error("edit references node {node}, point {index}, which does not exist")]
    EditOutOfRange { node: usize, index: usize },
    #[error("noise scale of round {0} is zero; the privacy loss is unbounded")]
    ZeroNoise(usize),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
}

/// Target `(ε, δ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, PrivacyError> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(PrivacyError::InvalidParameter {
                name: "epsilon",
                reason: format!("must be finite and positive, got {epsilon}"),
            });
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(PrivacyError::InvalidParameter {
                name: "delta",
                reason: format!("must lie in (0, 1), got {delta}"),
            });
        }
        Ok(Self { epsilon, delta })
    }

    /// `ε² / (ε + 2 ln(2/δ))`, the bound on `Σ Δ_t² / M_t²`.
    pub fn allowance(&self) -> f64 {
        let eps = self.epsilon;
        eps * eps / (eps + 2.0 * (2.0 / self.delta).ln())
    }

    /// Small-ε approximation `ε² / (2 ln(2/δ))` of the allowance.
    ///
    /// Reported as a diagnostic only; it exceeds [`Self::allowance`] and is
    /// never used for calibration.
    pub fn small_epsilon_allowance(&self) -> f64 {
        self.epsilon * self.epsilon / (2.0 * (2.0 / self.delta).ln())
    }
}

/// `κ(ε, δ) = ε² / (4 G² (ε + 2 ln(2/δ)))`.
pub fn kappa(budget: &PrivacyBudget, grad_bound: f64) -> f64 {
    budget.allowance() / (4.0 * grad_bound * grad_bound)
}

/// Conditional sensitivity `2 η_t G` of one projected gradient step.
pub fn sensitivity_bound_generic(step_size: f64, grad_bound: f64) -> f64 {
    2.0 * step_size * grad_bound
}

/// Mean-estimation sensitivity `2R√p η_t`: replacing one point moves the
/// local gradient by at most the box diameter.
pub fn sensitivity_bound_mean_estimation(step_size: f64, domain: &BoxDomain) -> f64 {
    domain.diameter() * step_size
}

/// How the per-round sensitivity `Δ_t` is derived from the step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SensitivityRule {
    /// `Δ_t = 2 η_t G` from a gradient-norm bound.
    Generic { grad_bound: f64 },
    /// `Δ_t = 2R√p η_t` for the quadratic mean-estimation loss.
    MeanEstimation { domain: BoxDomain },
}

impl SensitivityRule {
    /// The `G` for which `Δ_t = 2 η_t G`; this is the `G` entering `κ`.
    pub fn equivalent_grad_bound(&self) -> f64 {
        match self {
            SensitivityRule::Generic { grad_bound } => *grad_bound,
            SensitivityRule::MeanEstimation { domain } => domain.diameter() / 2.0,
        }
    }

    pub fn bound(&self, step_size: f64) -> f64 {
        match self {
            SensitivityRule::Generic { grad_bound } => {
                sensitivity_bound_generic(step_size, *grad_bound)
            }
            SensitivityRule::MeanEstimation { domain } => {
                sensitivity_bound_mean_estimation(step_size, domain)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_spot_value() {
        // 16 / (4 (4 + 2 ln 2000)), ln 2000 = 7.600902...
        let b = PrivacyBudget::new(4.0, 1e-3).unwrap();
        let expected = 16.0 / (4.0 * (4.0 + 2.0 * 7.600_902_459_542_082));
        assert!((kappa(&b, 1.0) - expected).abs() < 1e-14);
        assert!((kappa(&b, 1.0) - 0.20831).abs() < 1e-4);
    }

    #[test]
    fn doubling_grad_bound_quarters_kappa() {
        let b = PrivacyBudget::new(1.3, 1e-5).unwrap();
        assert_eq!(kappa(&b, 2.0), kappa(&b, 1.0) / 4.0);
    }

    #[test]
    fn kappa_monotonicity_grid() {
        let eps = [0.5, 1.0, 2.0, 4.0, 8.0];
        let deltas = [1e-9, 1e-6, 1e-4, 1e-3, 1e-2];
        let gs = [0.5, 1.0, 3.0];
        for &g in &gs {
            for &d in &deltas {
                let ks: Vec<_> = eps
                    .iter()
                    .map(|&e| kappa(&PrivacyBudget::new(e, d).unwrap(), g))
                    .collect();
                assert!(ks.windows(2).all(|w| w[1] > w[0]));
            }
            for &e in &eps {
                let ks: Vec<_> = deltas
                    .iter()
                    .map(|&d| kappa(&PrivacyBudget::new(e, d).unwrap(), g))
                    .collect();
                assert!(ks.windows(2).all(|w| w[1] >= w[0]));
            }
        }
        for &e in &eps {
            for &d in &deltas {
                let b = PrivacyBudget::new(e, d).unwrap();
                let ks: Vec<_> = gs.iter().map(|&g| kappa(&b, g)).collect();
                assert!(ks.windows(2).all(|w| w[1] < w[0]));
            }
        }
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(0.0, 0.1).is_err());
        assert!(PrivacyBudget::new(1.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(PrivacyBudget::new(f64::NAN, 0.1).is_err());
    }

    #[test]
    fn small_epsilon_diagnostic_exceeds_allowance() {
        let b = PrivacyBudget::new(0.1, 1e-6).unwrap();
        assert!(b.small_epsilon_allowance() > b.allowance());
        // Relative gap is ε / (ε + 2 ln(2/δ)).
        let rel = b.small_epsilon_allowance() / b.allowance() - 1.0;
        assert!((rel - 0.1 / (2.0 * (2.0f64 / 1e-6).ln())).abs() < 1e-12);
    }

    #[test]
    fn sensitivity_examples() {
        assert_eq!(sensitivity_bound_generic(0.5, 1.0), 1.0);
        assert_eq!(sensitivity_bound_generic(0.0, 7.0), 0.0);
        let d = BoxDomain::new(1.0, 4).unwrap();
        assert_eq!(sensitivity_bound_mean_estimation(0.25, &d), 1.0);
        let rule = SensitivityRule::MeanEstimation { domain: d };
        assert_eq!(rule.equivalent_grad_bound(), 2.0);
        assert_eq!(rule.bound(0.1), 4.0 * 0.1);
    }
}
