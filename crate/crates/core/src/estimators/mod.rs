//! The estimator suite: 2SLS, identity-weighted GMM, optimally weighted
//! GMM and the feasible best GMM, together with asymptotic covariance
//! estimation and fixed-effect recovery.
//!
//! Stage ladder. 2SLS gives a closed-form starting point from the linear
//! moments alone. The initial GMM minimizes `g'g` over the default moment
//! set. The optimal GMM reweights by the inverse of the plug-in moment
//! covariance built from the initial stage's variance and fourth-moment
//! estimates. The best GMM swaps in fitted-mean instruments and
//! spillover-based quadratic matrices before reweighting.

mod best;

pub use best::best_instruments;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_operators, check_stationarity, Operators, StationarityCheck, Theta};
use crate::moments::{
    default_iv, identification_diagnostic, mu4_hat, omega_hat, sigma2_hat, GmmData,
    IdentificationReport, MomentEvaluator, MomentSet,
};
use crate::solver::{minimize, MomentWeight, SolverOptions};
use crate::transforms::helmert;
use crate::weights::SpatialWeightSet;

/// Below this residual variance the weighting and covariance formulas are
/// meaningless (exact fit); stages fall back to identity weighting and a
/// zero covariance.
const SIGMA2_FLOOR: f64 = 1e-14;

/// Estimation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStage {
    TwoSls,
    InitialGmm,
    OptimalGmm,
    BestGmm,
}

impl std::fmt::Display for FitStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FitStage::TwoSls => "2sls",
            FitStage::InitialGmm => "initial",
            FitStage::OptimalGmm => "optimal",
            FitStage::BestGmm => "best",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for FitStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2sls" => Ok(FitStage::TwoSls),
            "initial" => Ok(FitStage::InitialGmm),
            "optimal" => Ok(FitStage::OptimalGmm),
            "best" => Ok(FitStage::BestGmm),
            other => Err(Error::InvalidConfig(format!(
                "unknown stage `{other}`; expected 2sls|initial|optimal|best"
            ))),
        }
    }
}

/// Which asymptotic covariance form to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VcovForm {
    /// Uses the leading Jacobian term only.
    LargeT,
    /// Adds the 1/T trace corrections to the Jacobian.
    FiniteT,
}

/// Default switch point: finite-T corrections are applied when the
/// transformed panel is shorter than this many periods.
pub const FINITE_T_THRESHOLD: usize = 50;

fn auto_vcov_form(t_obs: usize) -> VcovForm {
    if t_obs < FINITE_T_THRESHOLD {
        VcovForm::FiniteT
    } else {
        VcovForm::LargeT
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Override the automatic finite-T/large-T switch.
    pub vcov_form: Option<VcovForm>,
    pub solver: SolverOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { vcov_form: None, solver: SolverOptions::default() }
    }
}

/// Moment-condition health indicators attached to a fit.
#[derive(Debug, Clone)]
pub struct MomentReport {
    /// Euclidean norm of `g / N` at the estimate.
    pub g_norm: f64,
    /// Condition number of the weighting matrix, when one was used.
    pub omega_condition: Option<f64>,
    pub omega_ridged: bool,
    pub identification: Option<IdentificationReport>,
}

/// A fitted model.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub stage: FitStage,
    pub theta: Theta,
    /// Asymptotic covariance of the estimates.
    pub vcov: DMatrix<f64>,
    pub se: Vec<f64>,
    /// Minimized objective `g'Wg / N^2` (W as used by the stage).
    pub objective: f64,
    /// Residual variance plug-in used by the stage.
    pub sigma2: f64,
    /// Fourth-moment plug-in (GMM stages only).
    pub mu4: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub vcov_form: VcovForm,
    pub moment_report: MomentReport,
    /// Post-hoc sufficient-condition check at the estimate.
    pub stationarity: StationarityCheck,
    /// Recovered time effects (levels, 1..T), when the model has them.
    pub alpha: Option<DVector<f64>>,
    /// Recovered unit effects (up to the error-mean constant).
    pub mu: Option<DVector<f64>>,
    pub labels: Vec<String>,
}

impl GmmFit {
    fn finish(mut self, data: &GmmData, weights: &SpatialWeightSet) -> Self {
        self.se = (0..self.vcov.nrows())
            .map(|i| self.vcov[(i, i)].max(0.0).sqrt())
            .collect();
        self.labels = data.spec.param_labels();
        self.stationarity = check_stationarity(&self.theta, weights);
        if let StationarityCheck::Violated { condition, value } = self.stationarity {
            log::warn!(
                "estimate fails sufficient stationarity condition {condition:?} (value {value:.3})"
            );
        }
        self
    }
}

/// Two-stage least squares on the projected, transformed equation.
///
/// Closed form: regress the stacked transformed outcome on
/// `(M_1 y2 .. M_p y2, Z)` using `J Q (Q'JQ)^{-1} Q'J` as the projection.
pub fn fit_2sls(data: &GmmData, weights: &SpatialWeightSet, iv: &[DMatrix<f64>]) -> Result<GmmFit> {
    let p = data.spec.spatial_order;
    let k_z = data.spec.k_z();
    let dim = p + k_z;
    let k_q = iv.first().map_or(0, |q| q.ncols());
    if iv.len() != data.t_obs {
        return Err(Error::DimensionMismatch(format!(
            "instrument set has {} periods, data has {}",
            iv.len(),
            data.t_obs
        )));
    }
    if k_q < dim {
        return Err(Error::UnderIdentified(format!(
            "{k_q} instrument columns for {dim} coefficients"
        )));
    }

    let mut f = DMatrix::zeros(dim, k_q); // D'JQ
    let mut w_qq = DMatrix::zeros(k_q, k_q); // Q'JQ
    let mut q_y = DVector::zeros(k_q); // Q'J y2
    for t in 0..data.t_obs {
        let jq = data.proj.cols(&iv[t]);
        let mut d = DMatrix::zeros(data.n, dim);
        for j in 0..p {
            d.set_column(j, &data.wy2[t][j]);
        }
        for c in 0..k_z {
            d.set_column(p + c, &data.z[t].column(c));
        }
        f += d.transpose() * &jq;
        w_qq += jq.transpose() * &jq;
        q_y += jq.transpose() * &data.y2[t];
    }

    let w_chol = w_qq
        .clone()
        .cholesky()
        .ok_or_else(|| Error::UnderIdentified("instrument Gram matrix Q'JQ is singular".into()))?;
    let fw = w_chol.solve(&f.transpose()); // W^{-1} F'
    let a = &f * &fw; // F W^{-1} F'
    let rhs = &f * w_chol.solve(&q_y);
    let a_inv = a
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| a.clone().lu().try_inverse())
        .ok_or_else(|| Error::UnderIdentified("projected design matrix is singular".into()))?;
    let theta_vec = &a_inv * rhs;
    let theta = Theta::from_vector(&data.spec, &theta_vec)?;

    let sigma2 = sigma2_hat(data, &theta);
    let vcov = &a_inv * sigma2;

    let g_norm = {
        let moments = MomentSet {
            iv: iv.to_vec(),
            quad: vec![],
            provenance: crate::moments::MomentProvenance::Default,
        };
        let eval = MomentEvaluator::new(data, &moments)?;
        (eval.moment_vector(&theta) / data.n_total as f64).norm()
    };
    let identification = identification_report(data, weights, iv, &theta).ok();

    let fit = GmmFit {
        stage: FitStage::TwoSls,
        theta,
        vcov,
        se: vec![],
        objective: 0.0,
        sigma2,
        mu4: None,
        converged: true,
        iterations: 0,
        vcov_form: VcovForm::LargeT,
        moment_report: MomentReport {
            g_norm,
            omega_condition: None,
            omega_ridged: false,
            identification,
        },
        stationarity: StationarityCheck::Ok,
        alpha: None,
        mu: None,
        labels: vec![],
    };
    Ok(fit.finish(data, weights))
}

/// Identity-weighted GMM over the default moment set, started from the
/// 2SLS point and from zero.
pub fn fit_initial_gmm(
    data: &GmmData,
    weights: &SpatialWeightSet,
    opts: &FitOptions,
) -> Result<GmmFit> {
    let moments = MomentSet::default_for(data, weights)?;
    fit_initial_with_moments(data, weights, &moments, opts)
}

fn fit_initial_with_moments(
    data: &GmmData,
    weights: &SpatialWeightSet,
    moments: &MomentSet,
    opts: &FitOptions,
) -> Result<GmmFit> {
    let eval = MomentEvaluator::new(data, moments)?;
    let mut starts = Vec::new();
    match fit_2sls(data, weights, &moments.iv) {
        Ok(fit) => starts.push(fit.theta),
        Err(err) => log::warn!("2SLS start unavailable: {err}"),
    }
    starts.push(Theta::zeros(&data.spec));

    let (theta, report) = minimize(&eval, &MomentWeight::Identity, &starts, &opts.solver)?;
    let sigma2 = sigma2_hat(data, &theta);
    let (mu4, _clamped) = mu4_hat(data, weights, &theta, sigma2);

    let vcov_form = opts.vcov_form.unwrap_or_else(|| auto_vcov_form(data.t_obs));
    let (vcov, omega_condition, omega_ridged) = if sigma2 > SIGMA2_FLOOR {
        let omega = omega_hat(data, moments, sigma2, mu4)?;
        let d = expected_jacobian(data, weights, moments, &theta, sigma2, vcov_form)?;
        // identity weighting: sandwich (D'D)^{-1} D' Omega D (D'D)^{-1} / N
        let dtd = d.transpose() * &d;
        let dtd_inv = invert_spd(&dtd, "Jacobian Gram matrix")?;
        let mid = d.transpose() * &omega.matrix * &d;
        let vcov = (&dtd_inv * mid * &dtd_inv) / data.n_total as f64;
        (vcov, Some(omega.condition), omega.ridged)
    } else {
        (DMatrix::zeros(eval.n_params(), eval.n_params()), None, false)
    };

    let identification = identification_report(data, weights, &moments.iv, &theta).ok();
    let g_norm = (eval.moment_vector(&theta) / data.n_total as f64).norm();
    let fit = GmmFit {
        stage: FitStage::InitialGmm,
        theta,
        vcov,
        se: vec![],
        objective: report.objective,
        sigma2,
        mu4: Some(mu4),
        converged: report.converged,
        iterations: report.iterations,
        vcov_form,
        moment_report: MomentReport { g_norm, omega_condition, omega_ridged, identification },
        stationarity: StationarityCheck::Ok,
        alpha: None,
        mu: None,
        labels: vec![],
    };
    Ok(fit.finish(data, weights))
}

/// Optimally weighted GMM over the default moment set.
pub fn fit_optimal_gmm(
    data: &GmmData,
    weights: &SpatialWeightSet,
    opts: &FitOptions,
) -> Result<GmmFit> {
    let moments = MomentSet::default_for(data, weights)?;
    fit_optimal_gmm_with_moments(data, weights, &moments, opts)
}

/// Optimally weighted GMM over a caller-supplied moment set. The identity
/// weighted stage over the same set supplies the variance plug-ins.
pub fn fit_optimal_gmm_with_moments(
    data: &GmmData,
    weights: &SpatialWeightSet,
    moments: &MomentSet,
    opts: &FitOptions,
) -> Result<GmmFit> {
    let initial = fit_initial_with_moments(data, weights, moments, opts)?;
    let fit = reweighted_stage(data, weights, moments, &initial, opts, FitStage::OptimalGmm)?;
    Ok(fit.finish(data, weights))
}

/// Shared second stage: weight by the plug-in moment covariance and
/// minimize again, starting from the preliminary estimate, 2SLS and zero.
fn reweighted_stage(
    data: &GmmData,
    weights: &SpatialWeightSet,
    moments: &MomentSet,
    prelim: &GmmFit,
    opts: &FitOptions,
    stage: FitStage,
) -> Result<GmmFit> {
    let eval = MomentEvaluator::new(data, moments)?;
    let sigma2_w = prelim.sigma2;
    let mu4_w = prelim.mu4.unwrap_or(3.0 * sigma2_w * sigma2_w);

    let mut starts = vec![prelim.theta.clone()];
    match fit_2sls(data, weights, &moments.iv) {
        Ok(fit) => starts.push(fit.theta),
        Err(err) => log::warn!("2SLS start unavailable: {err}"),
    }
    starts.push(Theta::zeros(&data.spec));

    let degenerate = sigma2_w <= SIGMA2_FLOOR;
    let omega = if degenerate { None } else { Some(omega_hat(data, moments, sigma2_w, mu4_w)?) };
    let weight = match &omega {
        Some(o) => MomentWeight::Omega(o),
        None => MomentWeight::Identity,
    };
    let (theta, report) = minimize(&eval, &weight, &starts, &opts.solver)?;

    let vcov_form = opts.vcov_form.unwrap_or_else(|| auto_vcov_form(data.t_obs));
    let vcov = match (&omega, stage) {
        (None, _) => DMatrix::zeros(eval.n_params(), eval.n_params()),
        (Some(_), FitStage::BestGmm) => {
            let sigma2_final = sigma2_hat(data, &theta);
            best_vcov(data, weights, moments, &theta, sigma2_final)?
        }
        (Some(o), _) => {
            let d = expected_jacobian(data, weights, moments, &theta, sigma2_w, vcov_form)?;
            let h = d.transpose() * o.solve_mat(&d);
            invert_spd(&h, "precision matrix")? / data.n_total as f64
        }
    };

    let identification = identification_report(data, weights, &moments.iv, &theta).ok();
    let g_norm = (eval.moment_vector(&theta) / data.n_total as f64).norm();
    let (alpha, mu) = if stage == FitStage::BestGmm {
        let (a, m) = recover_effects(data, weights, &theta);
        (Some(a), Some(m))
    } else {
        (None, None)
    };
    Ok(GmmFit {
        stage,
        theta,
        vcov,
        se: vec![],
        objective: report.objective,
        sigma2: sigma2_w,
        mu4: Some(mu4_w),
        converged: report.converged,
        iterations: report.iterations,
        vcov_form,
        moment_report: MomentReport {
            g_norm,
            omega_condition: omega.as_ref().map(|o| o.condition),
            omega_ridged: omega.as_ref().is_some_and(|o| o.ridged),
            identification,
        },
        stationarity: StationarityCheck::Ok,
        alpha,
        mu,
        labels: vec![],
    })
}

/// The feasible best GMM pipeline: initial GMM for the plug-ins, then the
/// fitted-mean instruments and spillover quadratic matrices, then the
/// reweighted fit with the efficiency-bound covariance.
pub fn fit_best_gmm(
    data: &GmmData,
    weights: &SpatialWeightSet,
    opts: &FitOptions,
) -> Result<GmmFit> {
    let initial = fit_initial_gmm(data, weights, opts)?;
    let moments = best_instruments(data, weights, &initial)?;
    let fit = reweighted_stage(data, weights, &moments, &initial, opts, FitStage::BestGmm)?;
    Ok(fit.finish(data, weights))
}

/// Dispatch a stage by name (the Monte Carlo harness entry point).
pub fn fit_stage(
    data: &GmmData,
    weights: &SpatialWeightSet,
    stage: FitStage,
    opts: &FitOptions,
) -> Result<GmmFit> {
    match stage {
        FitStage::TwoSls => {
            let iv = default_iv(data, weights)?;
            fit_2sls(data, weights, &iv)
        }
        FitStage::InitialGmm => fit_initial_gmm(data, weights, opts),
        FitStage::OptimalGmm => fit_optimal_gmm(data, weights, opts),
        FitStage::BestGmm => fit_best_gmm(data, weights, opts),
    }
}

/// Recover the fixed effects from level residuals at the estimate.
///
/// With time effects, each period's cross-sectional mean of
/// `S(rho) Y*_t - Z*_t eta` estimates `alpha_t` (up to the error-mean
/// constant absorbed by the normalization `1'(mu + mu_e 1) = 0`) and the
/// time average of the demeaned residuals estimates the unit effects.
pub fn recover_effects(
    data: &GmmData,
    weights: &SpatialWeightSet,
    theta: &Theta,
) -> (DVector<f64>, DVector<f64>) {
    let resid = data.level_residuals(weights, theta);
    let t_len = resid.ncols();
    let nf = data.n as f64;
    if data.spec.has_time_effects {
        let alpha = DVector::from_fn(t_len, |t, _| resid.column(t).sum() / nf);
        let mut mu = DVector::zeros(data.n);
        for t in 0..t_len {
            for i in 0..data.n {
                mu[i] += (resid[(i, t)] - alpha[t]) / t_len as f64;
            }
        }
        (alpha, mu)
    } else {
        let mut mu = DVector::zeros(data.n);
        for t in 0..t_len {
            for i in 0..data.n {
                mu[i] += resid[(i, t)] / t_len as f64;
            }
        }
        (DVector::zeros(t_len), mu)
    }
}

// ---------------------------------------------------------------------------
// covariance machinery

fn invert_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| m.clone().lu().try_inverse())
        .ok_or_else(|| Error::WeightingFailure(format!("{what} is singular")))
}

/// Transformed time effects `alpha*` (forward-orthogonal weights applied to
/// the recovered levels); zeros when the model has none.
fn alpha_star_row(data: &GmmData, weights: &SpatialWeightSet, theta: &Theta) -> Result<DVector<f64>> {
    if !data.spec.has_time_effects {
        return Ok(DVector::zeros(data.t_obs));
    }
    let (alpha, _) = recover_effects(data, weights, theta);
    let row = DMatrix::from_fn(1, alpha.len(), |_, t| alpha[t]);
    let transformed = helmert(&row)?;
    Ok(DVector::from_fn(data.t_obs, |t, _| transformed[(0, t)]))
}

/// Fitted spillover means `L_t = (G_1 (Z_t eta + alpha*_t 1), ..., G_p (..))`
/// per period.
fn l_columns(
    data: &GmmData,
    ops: &Operators,
    eta: &DVector<f64>,
    alpha_star: &DVector<f64>,
) -> Vec<DMatrix<f64>> {
    let p = data.spec.spatial_order;
    (0..data.t_obs)
        .map(|t| {
            let mut base = &data.z[t] * eta;
            base.add_scalar_mut(alpha_star[t]);
            let mut l = DMatrix::zeros(data.n, p);
            for r in 0..p {
                l.set_column(r, &(&ops.g[r] * &base));
            }
            l
        })
        .collect()
}

fn identification_report(
    data: &GmmData,
    weights: &SpatialWeightSet,
    iv: &[DMatrix<f64>],
    theta: &Theta,
) -> Result<IdentificationReport> {
    let ops = build_operators(&data.spec, theta, weights)?;
    let alpha_star = alpha_star_row(data, weights, theta)?;
    let l_cols = l_columns(data, &ops, &theta.eta(), &alpha_star);
    Ok(identification_diagnostic(data, iv, &l_cols))
}

/// Expected Jacobian of `g / N` at the estimate.
///
/// The leading term stacks `-(sigma^2 C, 0; Q'JL, Q'JZ) / N`, where
/// `C(l, r) = (T-1) tr(G_r' (J P_l J)^s)`. The finite-T form adds the
/// `O(1/T)` trace corrections that arise because the transformed lag is not
/// quite predetermined; their sign is pinned by the simulated-average
/// Jacobian check in the tests below.
fn expected_jacobian(
    data: &GmmData,
    weights: &SpatialWeightSet,
    moments: &MomentSet,
    theta: &Theta,
    sigma2: f64,
    form: VcovForm,
) -> Result<DMatrix<f64>> {
    let p = data.spec.spatial_order;
    let k_z = data.spec.k_z();
    let m = moments.n_quad();
    let k_q = moments.k_q();
    let nf = data.n_total as f64;
    let t_trans = data.t_obs as f64;

    let ops = build_operators(&data.spec, theta, weights)?;
    let alpha_star = alpha_star_row(data, weights, theta)?;
    let l_cols = l_columns(data, &ops, &theta.eta(), &alpha_star);

    // symmetrized conjugated quadratic matrices (J P J)^s = J (P + P') J
    let conj_sym: Vec<DMatrix<f64>> = moments
        .quad
        .iter()
        .map(|pmat| data.proj.conjugate(&(pmat + pmat.transpose())))
        .collect();

    let mut d1 = DMatrix::zeros(m + k_q, p + k_z);
    for l in 0..m {
        for r in 0..p {
            let tr = (ops.g[r].transpose() * &conj_sym[l]).trace();
            d1[(l, r)] = -(sigma2 * t_trans * tr) / nf;
        }
    }
    for t in 0..data.t_obs {
        let jq = data.proj.cols(&moments.iv[t]);
        let ql = jq.transpose() * &l_cols[t];
        let qz = jq.transpose() * &data.z[t];
        for row in 0..k_q {
            for r in 0..p {
                d1[(m + row, r)] -= ql[(row, r)] / nf;
            }
            for c in 0..k_z {
                d1[(m + row, p + c)] -= qz[(row, c)] / nf;
            }
        }
    }

    if form == VcovForm::LargeT {
        return Ok(d1);
    }

    // finite-T correction: traces of
    // (sum_{h=1}^{T-1} (T-h) A^{h-1}) S^{-1} (J P_l J)^s against the
    // dynamic operators, scaled by sigma^2 / (N T)
    let t_len = data.t_periods();
    let n = data.n;
    let mut e_sum = DMatrix::zeros(n, n);
    let mut power = DMatrix::identity(n, n); // A^{h-1}
    for h in 1..t_len {
        e_sum += &power * (t_len - h) as f64;
        if h + 1 < t_len {
            power *= &ops.a;
        }
    }
    let es_inv = &e_sum * &ops.s_inv;

    let mut dyn_op = DMatrix::identity(n, n) * theta.gamma;
    for (j, &dv) in theta.delta.iter().enumerate() {
        if dv != 0.0 {
            dyn_op += weights.matrix(j) * dv;
        }
    }
    let scale = sigma2 / (nf * t_len as f64);
    for l in 0..m {
        let f_l = &es_inv * &conj_sym[l];
        d1[(l, p)] += scale * f_l.trace();
        for j in 0..p {
            d1[(l, p + 1 + j)] += scale * (&f_l * weights.matrix(j)).trace();
        }
        for r in 0..p {
            d1[(l, r)] += scale * (&ops.g[r] * &dyn_op * &f_l).trace();
        }
    }
    Ok(d1)
}

/// Efficiency-bound covariance of the best GMM estimate:
/// the inverse of `(C*/N, 0; 0, 0) + (L, Z)'J(L, Z) / (N sigma^2)`,
/// divided by N, where `C*(j, r) = (T-1) tr(G_r' (J P*_j J)^s)`.
fn best_vcov(
    data: &GmmData,
    weights: &SpatialWeightSet,
    moments: &MomentSet,
    theta: &Theta,
    sigma2: f64,
) -> Result<DMatrix<f64>> {
    if sigma2 <= SIGMA2_FLOOR {
        let dim = data.spec.n_params();
        return Ok(DMatrix::zeros(dim, dim));
    }
    let p = data.spec.spatial_order;
    let k_z = data.spec.k_z();
    let dim = p + k_z;
    let nf = data.n_total as f64;
    let t_trans = data.t_obs as f64;

    let ops = build_operators(&data.spec, theta, weights)?;
    let alpha_star = alpha_star_row(data, weights, theta)?;
    let l_cols = l_columns(data, &ops, &theta.eta(), &alpha_star);

    let mut sigma_star = DMatrix::zeros(dim, dim);
    for (j, pstar) in moments.quad.iter().enumerate() {
        let conj_sym = data.proj.conjugate(&(pstar + pstar.transpose()));
        for r in 0..p {
            let tr = (ops.g[r].transpose() * &conj_sym).trace();
            sigma_star[(j, r)] += t_trans * tr / nf;
        }
    }
    for t in 0..data.t_obs {
        let mut lz = DMatrix::zeros(data.n, dim);
        for r in 0..p {
            lz.set_column(r, &l_cols[t].column(r));
        }
        for c in 0..k_z {
            lz.set_column(p + c, &data.z[t].column(c));
        }
        let jlz = data.proj.cols(&lz);
        let block = jlz.transpose() * &jlz;
        sigma_star += block / (nf * sigma2);
    }
    // symmetrize against roundoff before inverting
    let sym = (&sigma_star + sigma_star.transpose()) * 0.5;
    Ok(invert_spd(&sym, "best-moment precision matrix")? / nf)
}
