use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{kappa, PrivacyBudget, PrivacyError, SensitivityRule};
use crate::objectives::ObjectiveSpec;

/// Relative slack on the allowance comparison, absorbing summation order.
const ALLOWANCE_SLACK: f64 = 1e-12;

/// Per-round step sizes `η_t`, noise scales `M_t` and sensitivities `Δ_t`
/// for `t = 1..=T`. Index `t - 1` holds round `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    horizon: usize,
    step_sizes: Vec<f64>,
    scales: Vec<f64>,
    sensitivities: Vec<f64>,
}

impl NoiseSchedule {
    /// Assembles a schedule from explicit sequences.
    ///
    /// Scales may be `+∞` (a round that reveals nothing) but must be
    /// positive; use [`NoiseSchedule::noiseless`] for the non-private baseline.
    pub fn from_parts(
        step_sizes: Vec<f64>,
        scales: Vec<f64>,
        sensitivities: Vec<f64>,
    ) -> Result<Self, PrivacyError> {
        let horizon = step_sizes.len();
        Self::check_common(horizon, &step_sizes, &scales, &sensitivities)?;
        if let Some(t) = scales.iter().position(|&m| m.is_nan() || m <= 0.0) {
            return Err(PrivacyError::InvalidParameter {
                name: "scales",
                reason: format!("round {} has non-positive scale {}", t + 1, scales[t]),
            });
        }
        Ok(Self {
            horizon,
            step_sizes,
            scales,
            sensitivities,
        })
    }

    /// The default step sizes with `M_t = 0`: plain distributed gradient
    /// descent with no privacy guarantee.
    pub fn noiseless(horizon: usize, spec: &ObjectiveSpec) -> Result<Self, PrivacyError> {
        check_horizon(horizon)?;
        let step_sizes = step_sizes(horizon, spec);
        let sensitivities = step_sizes
            .iter()
            .map(|&eta| super::sensitivity_bound_generic(eta, spec.grad_bound))
            .collect();
        Ok(Self {
            horizon,
            step_sizes,
            scales: vec![0.0; horizon],
            sensitivities,
        })
    }

    fn check_common(
        horizon: usize,
        step_sizes: &[f64],
        scales: &[f64],
        sensitivities: &[f64],
    ) -> Result<(), PrivacyError> {
        check_horizon(horizon)?;
        for (name, len) in [
            ("scales", scales.len()),
            ("sensitivities", sensitivities.len()),
        ] {
            if len != horizon {
                return Err(PrivacyError::InvalidParameter {
                    name,
                    reason: format!("expected {horizon} entries, got {len}"),
                });
            }
        }
        if step_sizes.iter().any(|&e| !(e.is_finite() && e >= 0.0)) {
            return Err(PrivacyError::InvalidParameter {
                name: "step_sizes",
                reason: "must be finite and nonnegative".into(),
            });
        }
        if sensitivities.iter().any(|&d| !(d.is_finite() && d >= 0.0)) {
            return Err(PrivacyError::InvalidParameter {
                name: "sensitivities",
                reason: "must be finite and nonnegative".into(),
            });
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn step_sizes(&self) -> &[f64] {
        &self.step_sizes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn sensitivities(&self) -> &[f64] {
        &self.sensitivities
    }

    /// `η_t` for 1-based round `t`.
    pub fn step_size(&self, t: usize) -> f64 {
        self.step_sizes[t - 1]
    }

    /// `M_t` for 1-based round `t`.
    pub fn scale(&self, t: usize) -> f64 {
        self.scales[t - 1]
    }

    /// `Δ_t` for 1-based round `t`.
    pub fn sensitivity(&self, t: usize) -> f64 {
        self.sensitivities[t - 1]
    }

    pub fn is_noiseless(&self) -> bool {
        self.scales.iter().all(|&m| m == 0.0)
    }

    /// Per-round spend `Δ_t² / M_t²`.
    pub fn spend(&self) -> Vec<f64> {
        self.sensitivities
            .iter()
            .zip(&self.scales)
            .map(|(&d, &m)| round_spend(d, m))
            .collect()
    }

    /// `α = Σ Δ_t² / M_t²` for the configured sensitivities.
    pub fn alpha(&self) -> f64 {
        self.spend().iter().sum()
    }

    /// Same step sizes and sensitivities with every scale multiplied by `factor`.
    pub fn with_scaled_noise(&self, factor: f64) -> Self {
        Self {
            scales: self.scales.iter().map(|m| m * factor).collect(),
            ..self.clone()
        }
    }

    /// Writes `t,eta,M,Delta,spend` rows, with header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "eta", "M", "Delta", "spend"])?;
        for (i, spend) in self.spend().into_iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                format!("{:e}", self.step_sizes[i]),
                format!("{:e}", self.scales[i]),
                format!("{:e}", self.sensitivities[i]),
                format!("{spend:e}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn round_spend(delta: f64, scale: f64) -> f64 {
    if delta == 0.0 {
        0.0
    } else {
        (delta / scale).powi(2)
    }
}

fn check_horizon(horizon: usize) -> Result<(), PrivacyError> {
    if horizon == 0 {
        return Err(PrivacyError::InvalidParameter {
            name: "T",
            reason: "horizon must be at least 1".into(),
        });
    }
    Ok(())
}

fn step_sizes(horizon: usize, spec: &ObjectiveSpec) -> Vec<f64> {
    let c = spec.step_scale();
    (1..=horizon).map(|t| c / t as f64).collect()
}

/// The default schedule with the generic sensitivity `Δ_t = 2 η_t G`.
pub fn build_schedule(
    horizon: usize,
    budget: &PrivacyBudget,
    spec: &ObjectiveSpec,
) -> Result<NoiseSchedule, PrivacyError> {
    build_schedule_with(
        horizon,
        budget,
        spec,
        &SensitivityRule::Generic {
            grad_bound: spec.grad_bound,
        },
    )
}

/// The default schedule
///
/// ```text
/// η_t = c / t,   M_t² = (2/κ) c² √T / t^{3/2},   c = (μ + L) / (2μL)
/// ```
///
/// with `κ` evaluated at the `G` implied by `rule`. The result is checked
/// against the allowance before it is returned.
pub fn build_schedule_with(
    horizon: usize,
    budget: &PrivacyBudget,
    spec: &ObjectiveSpec,
    rule: &SensitivityRule,
) -> Result<NoiseSchedule, PrivacyError> {
    check_horizon(horizon)?;
    let g = rule.equivalent_grad_bound();
    if !(g.is_finite() && g > 0.0) {
        return Err(PrivacyError::InvalidParameter {
            name: "grad_bound",
            reason: format!("must be finite and positive, got {g}"),
        });
    }
    spec.validate()
        .map_err(|e| PrivacyError::InvalidParameter {
            name: "spec",
            reason: e.to_string(),
        })?;

    let k = kappa(budget, g);
    let c = spec.step_scale();
    let sqrt_t = (horizon as f64).sqrt();
    let step_sizes = step_sizes(horizon, spec);
    let scales = (1..=horizon)
        .map(|t| {
            let t = t as f64;
            ((2.0 / k) * c * c * sqrt_t / (t * t.sqrt())).sqrt()
        })
        .collect();
    let sensitivities = step_sizes.iter().map(|&eta| rule.bound(eta)).collect();
    let schedule = NoiseSchedule::from_parts(step_sizes, scales, sensitivities)?;

    let check = budget_check(&schedule, schedule.sensitivities(), budget)?;
    if !check.pass {
        return Err(PrivacyError::BudgetViolation {
            spent: check.spent,
            allowance: check.allowance,
        });
    }
    Ok(schedule)
}

/// Outcome of comparing `Σ Δ_t² / M_t²` with the allowance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub pass: bool,
    pub spent: f64,
    pub allowance: f64,
}

impl BudgetCheck {
    pub fn ratio(&self) -> f64 {
        self.spent / self.allowance
    }
}

/// Checks the sufficient condition `Σ Δ_t² / M_t² ≤ ε² / (ε + 2 ln(2/δ))`.
pub fn budget_check(
    schedule: &NoiseSchedule,
    sensitivities: &[f64],
    budget: &PrivacyBudget,
) -> Result<BudgetCheck, PrivacyError> {
    if sensitivities.len() != schedule.horizon() {
        return Err(PrivacyError::LengthMismatch {
            expected: schedule.horizon(),
            got: sensitivities.len(),
        });
    }
    let spent: f64 = sensitivities
        .iter()
        .zip(schedule.scales())
        .map(|(&d, &m)| round_spend(d, m))
        .sum();
    let allowance = budget.allowance();
    Ok(BudgetCheck {
        pass: spent <= allowance * (1.0 + ALLOWANCE_SLACK),
        spent,
        allowance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_spec() -> ObjectiveSpec {
        ObjectiveSpec::new(1.0, 1.0, 1.0, 1).unwrap()
    }

    fn budget() -> PrivacyBudget {
        PrivacyBudget::new(4.0, 1e-3).unwrap()
    }

    #[test]
    fn four_round_schedule_by_hand() {
        let s = build_schedule(4, &budget(), &unit_spec()).unwrap();
        assert_eq!(s.step_sizes(), &[1.0, 0.5, 1.0 / 3.0, 0.25]);
        let k = kappa(&budget(), 1.0);
        assert!((s.scale(1).powi(2) - 19.20).abs() < 1e-2);
        assert!((s.scale(4).powi(2) - 2.400).abs() < 1e-2);
        assert!((s.scale(1).powi(2) - 4.0 / k).abs() < 1e-12);

        let sum: f64 = (1..=4)
            .map(|t| s.step_size(t).powi(2) / s.scale(t).powi(2))
            .sum();
        let inv_sqrt: f64 = (1..=4).map(|t| 1.0 / (t as f64).sqrt()).sum();
        assert!((inv_sqrt - 2.78446).abs() < 1e-5);
        assert!((sum - k / 4.0 * inv_sqrt).abs() < 1e-12);
        assert!((sum - 0.1450).abs() < 1e-3);
        assert!(sum <= k);
    }

    #[test]
    fn single_round_uses_half_of_kappa() {
        let s = build_schedule(1, &budget(), &unit_spec()).unwrap();
        let k = kappa(&budget(), 1.0);
        let sum = s.step_size(1).powi(2) / s.scale(1).powi(2);
        assert!((sum - k / 2.0).abs() < 1e-15);
    }

    #[test]
    fn spend_ratio_matches_closed_form() {
        // spent / allowance = Σ t^{-1/2} / (2√T) for the generic rule.
        for t in [4usize, 100, 1000] {
            let s = build_schedule(t, &budget(), &unit_spec()).unwrap();
            let check = budget_check(&s, s.sensitivities(), &budget()).unwrap();
            let oracle: f64 =
                (1..=t).map(|i| 1.0 / (i as f64).sqrt()).sum::<f64>() / (2.0 * (t as f64).sqrt());
            assert!(check.pass);
            assert!((check.ratio() - oracle).abs() < 1e-12, "T={t}");
        }
    }

    #[test]
    fn infinite_noise_spends_nothing() {
        let s =
            NoiseSchedule::from_parts(vec![1.0; 3], vec![f64::INFINITY; 3], vec![2.0; 3]).unwrap();
        let check = budget_check(&s, s.sensitivities(), &budget()).unwrap();
        assert_eq!(check.spent, 0.0);
        assert!(check.pass);
    }

    #[test]
    fn halving_noise_quadruples_spend() {
        let s = build_schedule(100, &budget(), &unit_spec()).unwrap();
        let base = budget_check(&s, s.sensitivities(), &budget()).unwrap();
        let half = s.with_scaled_noise(0.5);
        let check = budget_check(&half, half.sensitivities(), &budget()).unwrap();
        assert!((check.spent / base.spent - 4.0).abs() < 1e-12);
        assert!(!check.pass);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let s = build_schedule(5, &budget(), &unit_spec()).unwrap();
        assert!(matches!(
            budget_check(&s, &[1.0; 4], &budget()),
            Err(PrivacyError::LengthMismatch {
                expected: 5,
                got: 4
            })
        ));
    }

    #[test]
    fn zero_horizon_is_rejected() {
        assert!(build_schedule(0, &budget(), &unit_spec()).is_err());
        assert!(NoiseSchedule::noiseless(0, &unit_spec()).is_err());
    }

    #[test]
    fn csv_rows() {
        let s = build_schedule(3, &budget(), &unit_spec()).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,eta,M,Delta,spend");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,1e0,"));
    }
}
