//! Model specification, parameter vectors, reduced-form operators and
//! stationarity checks.
//!
//! The parameter ordering is fixed here once and used by every estimator,
//! covariance matrix and table downstream:
//! `theta = (rho_1..rho_p, gamma, delta_1..delta_p, beta_1..beta_k)`,
//! with `eta = (gamma, delta', beta')` as the non-spatial-ARCH tail.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weights::SpatialWeightSet;

/// Reject the spatial filter when its reciprocal condition number falls
/// below this.
pub const FILTER_RCOND_MIN: f64 = 1e-10;

/// Shape of the model: spatial lag order, regressor count and which fixed
/// effects are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Spatial lag order p (>= 1).
    pub spatial_order: usize,
    /// Number of exogenous regressors k (>= 0).
    pub n_regressors: usize,
    /// Whether per-period fixed effects are present (removed by
    /// cross-sectional demeaning when true).
    pub has_time_effects: bool,
    /// Whether per-unit fixed effects are present (removed by the forward
    /// orthogonal transformation either way).
    pub has_unit_effects: bool,
}

impl ModelSpec {
    pub fn new(spatial_order: usize, n_regressors: usize) -> Self {
        ModelSpec {
            spatial_order,
            n_regressors,
            has_time_effects: true,
            has_unit_effects: true,
        }
    }

    pub fn without_time_effects(mut self) -> Self {
        self.has_time_effects = false;
        self
    }

    /// Number of coefficients in `eta = (gamma, delta', beta')`.
    pub fn k_z(&self) -> usize {
        1 + self.spatial_order + self.n_regressors
    }

    /// Full parameter count `p + k_z`.
    pub fn n_params(&self) -> usize {
        self.spatial_order + self.k_z()
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_order == 0 {
            return Err(Error::InvalidConfig("spatial order p must be >= 1".into()));
        }
        Ok(())
    }

    /// Parameter labels in estimation order.
    pub fn param_labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(self.n_params());
        let p = self.spatial_order;
        for l in 1..=p {
            labels.push(if p == 1 { "rho".into() } else { format!("rho{l}") });
        }
        labels.push("gamma".into());
        for l in 1..=p {
            labels.push(if p == 1 { "delta".into() } else { format!("delta{l}") });
        }
        for j in 1..=self.n_regressors {
            labels.push(format!("beta{j}"));
        }
        labels
    }
}

/// Full coefficient vector of the log-volatility process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    /// Contemporaneous spatial ARCH coefficients (length p).
    pub rho: Vec<f64>,
    /// Temporal coefficient on the lagged log-squared outcome.
    pub gamma: f64,
    /// Spatiotemporal coefficients on the spatially lagged temporal lag
    /// (length p).
    pub delta: Vec<f64>,
    /// Exogenous regressor coefficients (length k).
    pub beta: Vec<f64>,
}

impl Theta {
    pub fn new(rho: Vec<f64>, gamma: f64, delta: Vec<f64>, beta: Vec<f64>) -> Self {
        Theta { rho, gamma, delta, beta }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Theta {
            rho: vec![0.0; spec.spatial_order],
            gamma: 0.0,
            delta: vec![0.0; spec.spatial_order],
            beta: vec![0.0; spec.n_regressors],
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.rho.len() != spec.spatial_order || self.delta.len() != spec.spatial_order {
            return Err(Error::DimensionMismatch(format!(
                "rho/delta must have length p={}, got {}/{}",
                spec.spatial_order,
                self.rho.len(),
                self.delta.len()
            )));
        }
        if self.beta.len() != spec.n_regressors {
            return Err(Error::DimensionMismatch(format!(
                "beta must have length k={}, got {}",
                spec.n_regressors,
                self.beta.len()
            )));
        }
        let all_finite = self
            .rho
            .iter()
            .chain(self.delta.iter())
            .chain(self.beta.iter())
            .chain(std::iter::once(&self.gamma))
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidConfig("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// Stacked `(rho', gamma, delta', beta')` vector.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.rho);
        v.push(self.gamma);
        v.extend_from_slice(&self.delta);
        v.extend_from_slice(&self.beta);
        DVector::from_vec(v)
    }

    /// Rebuild from a stacked vector laid out as [`Theta::to_vector`].
    pub fn from_vector(spec: &ModelSpec, v: &DVector<f64>) -> Result<Self> {
        if v.len() != spec.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has length {}, expected {}",
                v.len(),
                spec.n_params()
            )));
        }
        let p = spec.spatial_order;
        Ok(Theta {
            rho: v.as_slice()[..p].to_vec(),
            gamma: v[p],
            delta: v.as_slice()[p + 1..2 * p + 1].to_vec(),
            beta: v.as_slice()[2 * p + 1..].to_vec(),
        })
    }

    /// The tail `eta = (gamma, delta', beta')`.
    pub fn eta(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(1 + self.delta.len() + self.beta.len());
        v.push(self.gamma);
        v.extend_from_slice(&self.delta);
        v.extend_from_slice(&self.beta);
        DVector::from_vec(v)
    }

    pub fn dim(&self) -> usize {
        2 * self.rho.len() + 1 + self.beta.len()
    }
}

/// Dense reduced-form operators at a fixed coefficient vector.
#[derive(Debug, Clone)]
pub struct Operators {
    /// Spatial filter `S = I - sum_l rho_l M_l`.
    pub s: DMatrix<f64>,
    /// Its inverse.
    pub s_inv: DMatrix<f64>,
    /// One-period transition `A = S^{-1} (gamma I + sum_l delta_l M_l)`.
    pub a: DMatrix<f64>,
    /// Spillover operators `G_r = M_r S^{-1}` for r = 1..p.
    pub g: Vec<DMatrix<f64>>,
    /// Reciprocal condition number of the filter, for reporting.
    pub rcond: f64,
}

/// Assemble the spatial filter `I - sum_l rho_l M_l` without inverting it.
pub fn spatial_filter(rho: &[f64], weights: &SpatialWeightSet) -> DMatrix<f64> {
    let n = weights.n();
    let mut s = DMatrix::identity(n, n);
    for (l, &r) in rho.iter().enumerate() {
        if r != 0.0 {
            s -= weights.matrix(l) * r;
        }
    }
    s
}

/// Materialize `S`, `S^{-1}`, `A` and the `G_r` at the given coefficients.
///
/// Fails when the filter's reciprocal condition number falls below
/// [`FILTER_RCOND_MIN`].
pub fn build_operators(spec: &ModelSpec, theta: &Theta, weights: &SpatialWeightSet) -> Result<Operators> {
    theta.validate(spec)?;
    if weights.order() != spec.spatial_order {
        return Err(Error::DimensionMismatch(format!(
            "weight set has p={}, spec has p={}",
            weights.order(),
            spec.spatial_order
        )));
    }
    let n = weights.n();
    let s = spatial_filter(&theta.rho, weights);

    let svd = s.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(rcond > FILTER_RCOND_MIN) {
        return Err(Error::SingularFilter(format!(
            "reciprocal condition {rcond:.3e} at rho={:?}",
            theta.rho
        )));
    }

    let s_inv = s
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::SingularFilter(format!("LU inversion failed at rho={:?}", theta.rho)))?;

    let mut dyn_part = DMatrix::identity(n, n) * theta.gamma;
    for (l, &d) in theta.delta.iter().enumerate() {
        if d != 0.0 {
            dyn_part += weights.matrix(l) * d;
        }
    }
    let a = &s_inv * dyn_part;
    let g = (0..spec.spatial_order)
        .map(|r| weights.matrix(r) * &s_inv)
        .collect();

    Ok(Operators { s, s_inv, a, g, rcond })
}

/// Which sufficient stationarity condition failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StationarityCondition {
    /// `(sum_l |rho_l|) * max_l ||M_l||_inf < 1` (invertible filter).
    SpatialSum,
    /// `(sum_l |rho_l| + |gamma| + sum_l |delta_l|) * scaled < 1` (stable
    /// transition).
    TotalSum,
}

/// Outcome of the sufficient-condition check. These conditions are
/// conservative: designs that fail [`StationarityCondition::TotalSum`] can
/// still be perfectly simulable, so callers treat a violation as a warning,
/// not a gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StationarityCheck {
    Ok,
    Violated { condition: StationarityCondition, value: f64 },
}

impl StationarityCheck {
    pub fn is_ok(&self) -> bool {
        matches!(self, StationarityCheck::Ok)
    }
}

/// Evaluate the sufficient stationarity conditions.
///
/// With row-normalized weights the infinity norm is 1 and the checks reduce
/// to `sum |rho| < 1` and `sum |rho| + |gamma| + sum |delta| < 1`; otherwise
/// the norm-scaled forms are used.
pub fn check_stationarity(theta: &Theta, weights: &SpatialWeightSet) -> StationarityCheck {
    let norm = if weights.all_row_normalized() { 1.0 } else { weights.max_inf_norm() };
    let rho_sum: f64 = theta.rho.iter().map(|v| v.abs()).sum::<f64>() * norm;
    if rho_sum >= 1.0 {
        return StationarityCheck::Violated {
            condition: StationarityCondition::SpatialSum,
            value: rho_sum,
        };
    }
    let delta_sum: f64 = theta.delta.iter().map(|v| v.abs()).sum::<f64>() * norm;
    let total = rho_sum + theta.gamma.abs() + delta_sum;
    if total >= 1.0 {
        return StationarityCheck::Violated {
            condition: StationarityCondition::TotalSum,
            value: total,
        };
    }
    StationarityCheck::Ok
}
