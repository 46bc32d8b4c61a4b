//! Empirical audit of the privacy-loss random variable.
//!
//! For neighbouring datasets `D ∼ D′` that differ in one point held by node
//! `k*`, the log density ratio of the observed broadcasts is
//!
//! ```text
//! c = Σ_t ‖x_k*(t) − x′_k*(t)‖² / (2M_t²)  +  Σ_t ⟨n_k*(t), x_k*(t) − x′_k*(t)⟩ / M_t²
//! ```
//!
//! where both trajectories are driven by the *same* observed broadcasts:
//! conditioned on the messages, only node `k*`'s next iterate can differ.
//! The coupled run therefore steps the `D` run and, every round, recomputes
//! node `k*`'s local step on `D′` from the same consensus point.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PrivacyBudget, PrivacyError};
use crate::engine::{projected_step, RunConfig, Stage1Runner};
use crate::objectives::{BoxDomain, LocalDataset};
use crate::rng;

/// Below this many samples the binomial slack is meaningless.
pub const MIN_AUDIT_SAMPLES: usize = 1_000;

/// Replace point `index` of node `node` by `replacement`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborEdit {
    pub node: usize,
    pub index: usize,
    pub replacement: DVector<f64>,
}

impl NeighborEdit {
    pub fn new(node: usize, index: usize, replacement: DVector<f64>) -> Self {
        Self {
            node,
            index,
            replacement,
        }
    }

    /// The edit that moves a single point as far as the box allows: every
    /// point is a candidate, and its replacement is the opposite corner.
    pub fn worst_case(datasets: &[LocalDataset], domain: &BoxDomain) -> Option<Self> {
        let r = domain.half_width;
        let mut best: Option<(f64, Self)> = None;
        for (node, ds) in datasets.iter().enumerate() {
            for (index, d) in ds.points.iter().enumerate() {
                let corner = d.map(|v| if v >= 0.0 { -r } else { r });
                let dist = (&corner - d).norm_squared();
                if best.as_ref().is_none_or(|(b, _)| dist > *b) {
                    best = Some((dist, Self::new(node, index, corner)));
                }
            }
        }
        best.map(|(_, e)| e)
    }

    /// Recovers the edit turning `d` into `d_prime`; they must differ in
    /// exactly one point.
    pub fn between(d: &[LocalDataset], d_prime: &[LocalDataset]) -> Result<Self, PrivacyError> {
        let shape_ok =
            d.len() == d_prime.len() && d.iter().zip(d_prime).all(|(a, b)| a.len() == b.len());
        if !shape_ok {
            return Err(PrivacyError::AmbiguousEdit(usize::MAX));
        }
        let diffs: Vec<_> = d
            .iter()
            .zip(d_prime)
            .enumerate()
            .flat_map(|(node, (a, b))| {
                a.points
                    .iter()
                    .zip(&b.points)
                    .enumerate()
                    .filter(|(_, (p, q))| p != q)
                    .map(move |(index, (_, q))| Self::new(node, index, q.clone()))
            })
            .collect();
        match <[Self; 1]>::try_from(diffs) {
            Ok([edit]) => Ok(edit),
            Err(v) => Err(PrivacyError::AmbiguousEdit(v.len())),
        }
    }

    /// Checks the edit against the datasets and the domain.
    pub fn validate(
        &self,
        datasets: &[LocalDataset],
        domain: &BoxDomain,
    ) -> Result<(), PrivacyError> {
        let in_range = datasets
            .get(self.node)
            .is_some_and(|ds| self.index < ds.len());
        if !in_range {
            return Err(PrivacyError::EditOutOfRange {
                node: self.node,
                index: self.index,
            });
        }
        if !domain.contains(&self.replacement) {
            return Err(PrivacyError::EditOutOfDomain);
        }
        Ok(())
    }

    /// The neighbouring collection `D′`.
    pub fn apply(&self, datasets: &[LocalDataset]) -> Vec<LocalDataset> {
        let mut out = datasets.to_vec();
        out[self.node] =
            datasets[self.node].with_point_replaced(self.index, self.replacement.clone());
        out
    }
}

/// One realisation of the privacy loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLossSample {
    /// `Σ ‖gap_t‖² / (2M_t²)`.
    pub deterministic_part: f64,
    /// `Σ ⟨n_k*(t), gap_t⟩ / M_t²`; zero mean.
    pub noise_part: f64,
    pub total: f64,
    /// The same loss computed directly as a Gaussian log density ratio.
    pub direct_total: f64,
    /// `max_t ‖gap_t‖ / Δ_t`; at most 1 when `Δ_t` is a valid bound.
    pub max_gap_ratio: f64,
}

/// Runs Stage I on `D` with noise stream `noise_seed`, and evaluates the
/// privacy loss against the neighbour obtained by `edit`.
pub fn privacy_loss_coupled_run(
    config: &RunConfig,
    edit: &NeighborEdit,
    noise_seed: u64,
) -> Result<PrivacyLossSample, PrivacyError> {
    edit.validate(&config.datasets, &config.domain)?;
    let k = edit.node;
    let ds = &config.datasets[k];
    let count = ds.len() as f64;
    let sum_prime = ds.sum() - &ds.points[edit.index] + &edit.replacement;

    let mut runner = Stage1Runner::new(config, noise_seed)?;
    let mut out = PrivacyLossSample {
        deterministic_part: 0.0,
        noise_part: 0.0,
        total: 0.0,
        direct_total: 0.0,
        max_gap_ratio: 0.0,
    };
    while !runner.is_done() {
        runner.step()?;
        let s = runner.state();
        let t = s.round;
        let m2 = config.schedule.scale(t).powi(2);
        let eta = config.schedule.step_size(t);

        let z = s.z.row(k).transpose();
        let x = s.x.row(k).transpose();
        let x_prime = projected_step(&z, count, &sum_prime, eta, &config.domain);
        let gap = &x - &x_prime;
        let gap_sq = gap.norm_squared();
        let bound = config.schedule.sensitivity(t);
        if gap_sq > 0.0 {
            if m2 == 0.0 {
                return Err(PrivacyError::ZeroNoise(t));
            }
            let ratio = if bound > 0.0 {
                gap_sq.sqrt() / bound
            } else {
                f64::INFINITY
            };
            out.max_gap_ratio = out.max_gap_ratio.max(ratio);
        } else {
            continue;
        }

        let n = s.noise.row(k).transpose();
        out.deterministic_part += gap_sq / (2.0 * m2);
        out.noise_part += n.dot(&gap) / m2;
        let y = &x + &n;
        out.direct_total +=
            ((&y - &x_prime).norm_squared() - (&y - &x).norm_squared()) / (2.0 * m2);
    }
    out.total = out.deterministic_part + out.noise_part;
    Ok(out)
}

/// `n_samples` coupled runs on independent noise streams, in parallel.
///
/// Sample `i` uses the seed `derive_seed(master_seed, [AUDIT, i])`, and the
/// result is ordered by `i`, so the output does not depend on scheduling.
pub fn run_audit(
    config: &RunConfig,
    edit: &NeighborEdit,
    n_samples: usize,
    master_seed: u64,
) -> Result<Vec<PrivacyLossSample>, PrivacyError> {
    edit.validate(&config.datasets, &config.domain)?;
    config.validate()?;
    (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let seed = rng::derive_seed(master_seed, &[rng::tag::AUDIT, i]);
            privacy_loss_coupled_run(config, edit, seed)
        })
        .collect()
}

/// Tail audit verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub n_samples: usize,
    /// Fraction of samples with `|c| ≥ ε`.
    pub exceed_rate: f64,
    /// `δ + 2 √(δ(1−δ)/n)`.
    pub bound: f64,
    pub pass: bool,
}

/// Compares the empirical tail `P(|c| ≥ ε)` with `δ`, allowing two binomial
/// standard deviations of Monte Carlo slack.
pub fn audit_tail(
    samples: &[PrivacyLossSample],
    budget: &PrivacyBudget,
) -> Result<AuditReport, PrivacyError> {
    let n = samples.len();
    if n < MIN_AUDIT_SAMPLES {
        return Err(PrivacyError::TooFewSamples {
            min: MIN_AUDIT_SAMPLES,
            got: n,
        });
    }
    let exceed = samples
        .iter()
        .filter(|s| s.total.abs() >= budget.epsilon)
        .count();
    let exceed_rate = exceed as f64 / n as f64;
    let d = budget.delta;
    let bound = d + 2.0 * (d * (1.0 - d) / n as f64).sqrt();
    Ok(AuditReport {
        n_samples: n,
        exceed_rate,
        bound,
        pass: exceed_rate <= bound,
    })
}

/// Sample moments of an audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub n_samples: usize,
    pub mean_total: f64,
    pub mean_deterministic: f64,
    pub max_deterministic: f64,
    pub mean_noise: f64,
    /// Standard error of `mean_noise`.
    pub stderr_noise: f64,
    pub max_gap_ratio: f64,
}

impl LossSummary {
    pub fn from_samples(samples: &[PrivacyLossSample]) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&PrivacyLossSample) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let mean_noise = mean(|s| s.noise_part);
        let var = samples
            .iter()
            .map(|s| (s.noise_part - mean_noise).powi(2))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        let max = |f: fn(&PrivacyLossSample) -> f64| samples.iter().map(f).fold(0.0, f64::max);
        Self {
            n_samples: samples.len(),
            mean_total: mean(|s| s.total),
            mean_deterministic: mean(|s| s.deterministic_part),
            max_deterministic: max(|s| s.deterministic_part),
            mean_noise,
            stderr_noise: (var / n).sqrt(),
            max_gap_ratio: max(|s| s.max_gap_ratio),
        }
    }
}
