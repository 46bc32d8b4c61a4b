//! Local objectives, the box domain and the mean-estimation instance.
//!
//! Node `i` holds a private dataset `D_i` and the quadratic loss
//! `f_i(x) = ½ Σ_{d ∈ D_i} ‖x − d‖²`. Its gradient is `N_i (x − mean(D_i))`,
//! its Hessian is `N_i I`, so it is `N_i`-smooth and `N_i`-strongly convex.
//! Over the cube `[−R, R]^p` the gradient norm never exceeds `N_i · 2R√p`.

use std::io::{Read, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Rejection sampling gives up below this acceptance probability.
pub const MIN_ACCEPTANCE: f64 = 1e-6;
/// Location of the generating Gaussian as a fraction of the half width.
pub const DATA_MEAN_FRACTION: f64 = 0.7;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid objective parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("dataset of node {0} is empty")]
    EmptyDataset(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point {index} of node {node} lies outside [-{half_width}, {half_width}]")]
    OutOfDomain {
        node: usize,
        index: usize,
        half_width: f64,
    },
    #[error(
        "truncated Gaussian acceptance probability {acceptance:e} is below 1e-6; \
         the half width {half_width} is degenerate"
    )]
    DegenerateTruncation { acceptance: f64, half_width: f64 },
    #[error("dataset CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// Regularity constants of a local objective over the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    /// `G`: bound on the gradient norm over the domain.
    pub grad_bound: f64,
    /// `L`: gradient Lipschitz constant.
    pub smoothness: f64,
    /// `μ`: strong convexity modulus.
    pub strong_convexity: f64,
    /// `p`.
    pub dimension: usize,
}

impl ObjectiveSpec {
    pub fn new(
        grad_bound: f64,
        smoothness: f64,
        strong_convexity: f64,
        dimension: usize,
    ) -> Result<Self, ObjectiveError> {
        let spec = Self {
            grad_bound,
            smoothness,
            strong_convexity,
            dimension,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |name, reason: &str| {
            Err(ObjectiveError::InvalidParameter {
                name,
                reason: reason.to_string(),
            })
        };
        if !(self.grad_bound.is_finite() && self.grad_bound >= 0.0) {
            return bad("grad_bound", "must be finite and nonnegative");
        }
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return bad("smoothness", "must be finite and positive");
        }
        if !(self.strong_convexity > 0.0 && self.strong_convexity <= self.smoothness) {
            return bad("strong_convexity", "must satisfy 0 < mu <= L");
        }
        if self.dimension == 0 {
            return bad("dimension", "must be positive");
        }
        Ok(())
    }

    /// Network-wide constants: largest `G` and `L`, smallest `μ`.
    pub fn combine(specs: &[ObjectiveSpec]) -> Option<ObjectiveSpec> {
        let first = *specs.first()?;
        Some(specs.iter().skip(1).fold(first, |acc, s| ObjectiveSpec {
            grad_bound: acc.grad_bound.max(s.grad_bound),
            smoothness: acc.smoothness.max(s.smoothness),
            strong_convexity: acc.strong_convexity.min(s.strong_convexity),
            dimension: acc.dimension,
        }))
    }

    /// `(μ + L) / (2μL)`, the step-size scale `η_t · t`.
    pub fn step_scale(&self) -> f64 {
        (self.strong_convexity + self.smoothness) / (2.0 * self.strong_convexity * self.smoothness)
    }
}

/// The cube `[−R, R]^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub half_width: f64,
    pub dimension: usize,
}

impl BoxDomain {
    pub fn new(half_width: f64, dimension: usize) -> Result<Self, ObjectiveError> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(ObjectiveError::InvalidParameter {
                name: "half_width",
                reason: format!("must be finite and positive, got {half_width}"),
            });
        }
        if dimension == 0 {
            return Err(ObjectiveError::InvalidParameter {
                name: "dimension",
                reason: "must be positive".into(),
            });
        }
        Ok(Self {
            half_width,
            dimension,
        })
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dimension && x.iter().all(|v| v.abs() <= self.half_width)
    }

    /// Euclidean diameter `2R√p`.
    pub fn diameter(&self) -> f64 {
        2.0 * self.half_width * (self.dimension as f64).sqrt()
    }

    /// The corner `(±R, …, ±R)` with every sign given by `positive`.
    pub fn corner(&self, positive: bool) -> DVector<f64> {
        let r = if positive {
            self.half_width
        } else {
            -self.half_width
        };
        DVector::from_element(self.dimension, r)
    }

    pub fn project_in_place(&self, x: &mut [f64]) {
        let r = self.half_width;
        x.iter_mut().for_each(|v| *v = v.clamp(-r, r));
    }
}

/// Euclidean projection onto the box: a coordinate-wise clamp.
pub fn project_box(x: &DVector<f64>, domain: &BoxDomain) -> DVector<f64> {
    let mut out = x.clone();
    domain.project_in_place(out.as_mut_slice());
    out
}

/// The private points held by one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalDataset {
    pub node_id: usize,
    pub points: Vec<DVector<f64>>,
}

impl LocalDataset {
    pub fn new(node_id: usize, points: Vec<DVector<f64>>) -> Result<Self, ObjectiveError> {
        let ds = Self { node_id, points };
        ds.dimension()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Common dimension of the points; fails on empty or ragged data.
    pub fn dimension(&self) -> Result<usize, ObjectiveError> {
        let p = self
            .points
            .first()
            .ok_or(ObjectiveError::EmptyDataset(self.node_id))?
            .len();
        if let Some(bad) = self.points.iter().find(|d| d.len() != p) {
            return Err(ObjectiveError::DimensionMismatch {
                expected: p,
                got: bad.len(),
            });
        }
        Ok(p)
    }

    pub fn sum(&self) -> DVector<f64> {
        let p = self.points.first().map_or(0, |d| d.len());
        self.points.iter().fold(DVector::zeros(p), |acc, d| acc + d)
    }

    pub fn mean(&self) -> Result<DVector<f64>, ObjectiveError> {
        if self.is_empty() {
            return Err(ObjectiveError::EmptyDataset(self.node_id));
        }
        Ok(self.sum() / self.len() as f64)
    }

    pub fn check_domain(&self, domain: &BoxDomain) -> Result<(), ObjectiveError> {
        for (index, d) in self.points.iter().enumerate() {
            if d.len() != domain.dimension {
                return Err(ObjectiveError::DimensionMismatch {
                    expected: domain.dimension,
                    got: d.len(),
                });
            }
            if !domain.contains(d) {
                return Err(ObjectiveError::OutOfDomain {
                    node: self.node_id,
                    index,
                    half_width: domain.half_width,
                });
            }
        }
        Ok(())
    }

    /// A copy with point `index` replaced: a neighbouring dataset.
    pub fn with_point_replaced(&self, index: usize, point: DVector<f64>) -> Self {
        let mut out = self.clone();
        out.points[index] = point;
        out
    }

    /// Writes one point per row, `p` columns, no header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ObjectiveError> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        for d in &self.points {
            w.write_record(d.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(node_id: usize, input: R) -> Result<Self, ObjectiveError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .from_reader(input);
        let mut points = Vec::new();
        for record in r.records() {
            let record = record?;
            let values = record
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| ObjectiveError::InvalidParameter {
                            name: "point",
                            reason: format!("`{s}`: {e}"),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            points.push(DVector::from_vec(values));
        }
        Self::new(node_id, points)
    }
}

/// Per-node objective interface used by the simulation engine.
pub trait LocalObjective {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn constants(&self, domain: &BoxDomain) -> Result<ObjectiveSpec, ObjectiveError>;
}

impl LocalObjective for LocalDataset {
    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * self
            .points
            .iter()
            .map(|d| (x - d).norm_squared())
            .sum::<f64>()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.points
            .iter()
            .fold(DVector::zeros(x.len()), |acc, d| acc + (x - d))
    }

    fn constants(&self, domain: &BoxDomain) -> Result<ObjectiveSpec, ObjectiveError> {
        mean_objective_constants(self, domain)
    }
}

/// `Σ_{d ∈ D_i} (x − d)`.
pub fn mean_objective_grad(
    x: &DVector<f64>,
    data: &LocalDataset,
) -> Result<DVector<f64>, ObjectiveError> {
    let p = data.dimension()?;
    if x.len() != p {
        return Err(ObjectiveError::DimensionMismatch {
            expected: p,
            got: x.len(),
        });
    }
    Ok(data.gradient(x))
}

/// `μ = L = N_i` and the corner bound `G = N_i · 2R√p`.
pub fn mean_objective_constants(
    data: &LocalDataset,
    domain: &BoxDomain,
) -> Result<ObjectiveSpec, ObjectiveError> {
    if data.is_empty() {
        return Err(ObjectiveError::EmptyDataset(data.node_id));
    }
    let n = data.len() as f64;
    ObjectiveSpec::new(n * domain.diameter(), n, n, domain.dimension)
}

/// Grand mean of all points: the minimizer of `Σ_i f_i` over `ℝ^p`.
pub fn grand_mean(datasets: &[LocalDataset]) -> Result<DVector<f64>, ObjectiveError> {
    let first = datasets.first().ok_or(ObjectiveError::EmptyDataset(0))?;
    let p = first.dimension()?;
    let mut total = DVector::zeros(p);
    let mut count = 0usize;
    for ds in datasets {
        if ds.dimension()? != p {
            return Err(ObjectiveError::DimensionMismatch {
                expected: p,
                got: ds.dimension()?,
            });
        }
        total += ds.sum();
        count += ds.len();
    }
    Ok(total / count as f64)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `n_points` i.i.d. points whose coordinates follow `N(0.7R, 1)` conditioned
/// on `[−R, R]`, by rejection.
pub fn gen_truncated_gaussian(
    node_id: usize,
    n_points: usize,
    domain: &BoxDomain,
    seed: u64,
) -> Result<LocalDataset, ObjectiveError> {
    if n_points == 0 {
        return Err(ObjectiveError::InvalidParameter {
            name: "n_points",
            reason: "must be at least 1".into(),
        });
    }
    let r = domain.half_width;
    let loc = DATA_MEAN_FRACTION * r;
    let acceptance = normal_cdf(r - loc) - normal_cdf(-r - loc);
    if acceptance < MIN_ACCEPTANCE {
        return Err(ObjectiveError::DegenerateTruncation {
            acceptance,
            half_width: r,
        });
    }
    let mut rng = rng::stream(seed);
    let mut draw = || loop {
        let v = loc + rng::standard_normal(&mut rng);
        if v.abs() <= r {
            break v;
        }
    };
    let points = (0..n_points)
        .map(|_| DVector::from_fn(domain.dimension, |_, _| draw()))
        .collect();
    LocalDataset::new(node_id, points)
}
