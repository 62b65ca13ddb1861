//! Moment conditions for the transformed panel: linear instrument blocks,
//! quadratic moment matrices, the stacked moment vector and its analytic
//! Jacobian, plug-in variance estimators and the GMM weighting matrix.
//!
//! Everything is computed per period from n-by-n factors; the stacked
//! N-by-N objects implied by the Kronecker structure are never materialized.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Theta};
use crate::transforms::{first_difference, helmert, helmert_lag, log_square};
use crate::weights::SpatialWeightSet;

/// Instrument columns whose projected mean square falls below this are
/// dropped before estimation.
pub const IV_VARIANCE_FLOOR: f64 = 1e-12;

/// Ridge factor applied to the weighting matrix when it is numerically
/// singular.
pub const OMEGA_RIDGE: f64 = 1e-8;

/// Reciprocal-condition threshold that triggers the ridge.
pub const OMEGA_RCOND_MIN: f64 = 1e-12;

/// Cross-sectional projection applied inside every moment: demeaning when
/// the model carries time fixed effects, identity otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    /// `I - 11'/n`, annihilates per-period constants.
    Demean,
    Identity,
}

impl Projection {
    pub fn for_spec(spec: &ModelSpec) -> Self {
        if spec.has_time_effects {
            Projection::Demean
        } else {
            Projection::Identity
        }
    }

    /// Apply the projection to a vector.
    pub fn vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Projection::Identity => v.clone(),
            Projection::Demean => {
                let mean = v.mean();
                v.map(|x| x - mean)
            }
        }
    }

    /// Apply the projection to every column of a matrix.
    pub fn cols(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Projection::Identity => m.clone(),
            Projection::Demean => {
                let mut out = m.clone();
                for j in 0..out.ncols() {
                    let mean = out.column(j).mean();
                    for i in 0..out.nrows() {
                        out[(i, j)] -= mean;
                    }
                }
                out
            }
        }
    }

    /// Two-sided conjugation `J P J` (or `P` itself for the identity).
    pub fn conjugate(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Projection::Identity => p.clone(),
            Projection::Demean => {
                let n = p.nrows();
                let nf = n as f64;
                let row_means: Vec<f64> = (0..n).map(|i| p.row(i).sum() / nf).collect();
                let col_means: Vec<f64> = (0..n).map(|j| p.column(j).sum() / nf).collect();
                let grand = row_means.iter().sum::<f64>() / nf;
                DMatrix::from_fn(n, n, |i, j| p[(i, j)] - row_means[i] - col_means[j] + grand)
            }
        }
    }

    /// Trace of the projection matrix itself: n-1 for demeaning, n otherwise.
    pub fn trace(&self, n: usize) -> f64 {
        match self {
            Projection::Demean => (n - 1) as f64,
            Projection::Identity => n as f64,
        }
    }

    /// The projection as a dense matrix (used only by quadratic-matrix
    /// centering, where it appears in the result).
    pub fn matrix(&self, n: usize) -> DMatrix<f64> {
        match self {
            Projection::Identity => DMatrix::identity(n, n),
            Projection::Demean => {
                DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 - 1.0 / n as f64 } else { -1.0 / n as f64 })
            }
        }
    }
}

/// Transformed data and its per-period building blocks, computed once per
/// panel and shared read-only by every estimator stage.
#[derive(Debug, Clone)]
pub struct GmmData {
    pub spec: ModelSpec,
    pub proj: Projection,
    pub n: usize,
    /// Number of transformed periods, T-1.
    pub t_obs: usize,
    /// Total transformed sample size N = n (T-1).
    pub n_total: usize,
    /// Log-squared outcomes in levels, n-by-(T+1).
    pub ystar: DMatrix<f64>,
    /// Regressor levels for periods 1..T.
    pub x: Vec<DMatrix<f64>>,
    /// Forward-orthogonal outcomes, one n-vector per transformed period.
    pub y2: Vec<DVector<f64>>,
    /// Spatial lags of the transformed outcome: `wy2[t][j] = M_j y2[t]`.
    pub wy2: Vec<Vec<DVector<f64>>>,
    /// Transformed lag of the outcome (forward-orthogonal weights applied to
    /// the shifted block).
    pub ylag2: Vec<DVector<f64>>,
    /// Transformed regressors per period, n-by-k.
    pub xstar: Vec<DMatrix<f64>>,
    /// Regressor blocks `Z_t = (ylag2, M_1 ylag2 .. M_p ylag2, xstar)`.
    pub z: Vec<DMatrix<f64>>,
    /// Projected copies of the blocks above.
    pub jy2: Vec<DVector<f64>>,
    pub jwy2: Vec<Vec<DVector<f64>>>,
    pub jz: Vec<DMatrix<f64>>,
}

impl GmmData {
    pub fn build(panel: &crate::dgp::Panel, weights: &SpatialWeightSet, spec: &ModelSpec) -> Result<GmmData> {
        spec.validate()?;
        let n = panel.n();
        if weights.n() != n {
            return Err(Error::DimensionMismatch(format!(
                "weights have n={}, panel has n={}",
                weights.n(),
                n
            )));
        }
        if weights.order() != spec.spatial_order {
            return Err(Error::DimensionMismatch(format!(
                "weight set has p={}, spec has p={}",
                weights.order(),
                spec.spatial_order
            )));
        }
        if panel.n_regressors() != spec.n_regressors {
            return Err(Error::DimensionMismatch(format!(
                "panel has k={}, spec has k={}",
                panel.n_regressors(),
                spec.n_regressors
            )));
        }
        let t_len = panel.t_periods();
        if t_len < 2 {
            return Err(Error::DimensionMismatch(
                "estimation needs at least two observed periods".into(),
            ));
        }

        let ystar = log_square(&panel.y)?;
        let outcome_block = ystar.columns(1, t_len).into_owned();
        let lag_block = ystar.columns(0, t_len).into_owned();
        let y2_mat = helmert(&outcome_block)?;
        let ylag2_mat = helmert_lag(&lag_block)?;

        let p = spec.spatial_order;
        let k = spec.n_regressors;
        let t_obs = t_len - 1;

        // regressors are transformed column by column over time
        let mut xstar_mats = Vec::with_capacity(k);
        for col in 0..k {
            let series = DMatrix::from_fn(n, t_len, |i, t| panel.x[t][(i, col)]);
            xstar_mats.push(helmert(&series)?);
        }

        let proj = Projection::for_spec(spec);
        let mut y2 = Vec::with_capacity(t_obs);
        let mut ylag2 = Vec::with_capacity(t_obs);
        let mut wy2 = Vec::with_capacity(t_obs);
        let mut xstar = Vec::with_capacity(t_obs);
        let mut z = Vec::with_capacity(t_obs);
        for t in 0..t_obs {
            let yt = y2_mat.column(t).clone_owned();
            let ylag = ylag2_mat.column(t).clone_owned();
            let wyt: Vec<DVector<f64>> = (0..p).map(|j| weights.matrix(j) * &yt).collect();

            let mut xt = DMatrix::zeros(n, k);
            for col in 0..k {
                xt.set_column(col, &xstar_mats[col].column(t));
            }

            let mut zt = DMatrix::zeros(n, spec.k_z());
            zt.set_column(0, &ylag);
            for j in 0..p {
                zt.set_column(1 + j, &(weights.matrix(j) * &ylag));
            }
            for col in 0..k {
                zt.set_column(1 + p + col, &xt.column(col));
            }

            y2.push(yt);
            ylag2.push(ylag);
            wy2.push(wyt);
            xstar.push(xt);
            z.push(zt);
        }

        let jy2 = y2.iter().map(|v| proj.vec(v)).collect();
        let jwy2 = wy2
            .iter()
            .map(|per| per.iter().map(|v| proj.vec(v)).collect())
            .collect();
        let jz = z.iter().map(|m| proj.cols(m)).collect();

        Ok(GmmData {
            spec: *spec,
            proj,
            n,
            t_obs,
            n_total: n * t_obs,
            ystar,
            x: panel.x.clone(),
            y2,
            wy2,
            ylag2,
            xstar,
            z,
            jy2,
            jwy2,
            jz,
        })
    }

    /// Observed periods T.
    pub fn t_periods(&self) -> usize {
        self.t_obs + 1
    }

    /// Transformed residuals `U_t(theta) = S(rho) y2_t - Z_t eta` for every
    /// period (the per-period time effect is omitted: all uses project it
    /// out).
    pub fn residuals(&self, theta: &Theta) -> Vec<DVector<f64>> {
        let eta = theta.eta();
        (0..self.t_obs)
            .map(|t| {
                let mut u = self.y2[t].clone();
                for (j, &r) in theta.rho.iter().enumerate() {
                    if r != 0.0 {
                        u.axpy(-r, &self.wy2[t][j], 1.0);
                    }
                }
                u -= &self.z[t] * &eta;
                u
            })
            .collect()
    }

    /// Projected residuals `J U_t(theta)`.
    pub fn projected_residuals(&self, theta: &Theta) -> Vec<DVector<f64>> {
        let eta = theta.eta();
        (0..self.t_obs)
            .map(|t| {
                let mut u = self.jy2[t].clone();
                for (j, &r) in theta.rho.iter().enumerate() {
                    if r != 0.0 {
                        u.axpy(-r, &self.jwy2[t][j], 1.0);
                    }
                }
                u -= &self.jz[t] * &eta;
                u
            })
            .collect()
    }

    /// Residuals of the untransformed (level) equation,
    /// `S(rho) Y*_t - Z*_t eta` for t = 1..T, as an n-by-T matrix. These
    /// estimate `mu + mu_e 1 + alpha_t 1 + U_t` and feed the fourth-moment
    /// plug-in and fixed-effect recovery.
    pub fn level_residuals(&self, weights: &SpatialWeightSet, theta: &Theta) -> DMatrix<f64> {
        let t_len = self.t_periods();
        let eta = theta.eta();
        let p = self.spec.spatial_order;
        let k = self.spec.n_regressors;
        let mut out = DMatrix::zeros(self.n, t_len);
        for t in 1..=t_len {
            let yt = self.ystar.column(t).clone_owned();
            let ylag = self.ystar.column(t - 1).clone_owned();
            let mut v = yt.clone();
            for (j, &r) in theta.rho.iter().enumerate() {
                if r != 0.0 {
                    v.axpy(-r, &(weights.matrix(j) * &yt), 1.0);
                }
            }
            v.axpy(-eta[0], &ylag, 1.0);
            for j in 0..p {
                v.axpy(-eta[1 + j], &(weights.matrix(j) * &ylag), 1.0);
            }
            if k > 0 {
                let beta = DVector::from_column_slice(&eta.as_slice()[1 + p..]);
                v -= &self.x[t - 1] * beta;
            }
            out.set_column(t - 1, &v);
        }
        out
    }
}

/// Where a moment set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentProvenance {
    Default,
    BestFeasible,
}

/// A set of linear instruments and quadratic moment matrices.
#[derive(Debug, Clone)]
pub struct MomentSet {
    /// Per-period instrument blocks `Q_t`, each n-by-k_q.
    pub iv: Vec<DMatrix<f64>>,
    /// Quadratic moment matrices `P_l` with `tr(J P J) = 0`.
    pub quad: Vec<DMatrix<f64>>,
    pub provenance: MomentProvenance,
}

impl MomentSet {
    pub fn k_q(&self) -> usize {
        self.iv.first().map_or(0, |q| q.ncols())
    }

    pub fn n_quad(&self) -> usize {
        self.quad.len()
    }

    /// Moment dimension m + k_q.
    pub fn dim(&self) -> usize {
        self.n_quad() + self.k_q()
    }

    pub fn default_for(data: &GmmData, weights: &SpatialWeightSet) -> Result<MomentSet> {
        Ok(MomentSet {
            iv: default_iv(data, weights)?,
            quad: default_quadratic(weights, data.proj),
            provenance: MomentProvenance::Default,
        })
    }
}

/// The default instrument blocks: lagged log-squared levels, their first-
/// and second-order spatial lags, and the transformed regressors with the
/// same spatial expansions. Second-order terms use every ordered product
/// `M_a M_b`. Columns that are numerically constant after projection are
/// dropped with a warning.
pub fn default_iv(data: &GmmData, weights: &SpatialWeightSet) -> Result<Vec<DMatrix<f64>>> {
    let n = data.n;
    let p = data.spec.spatial_order;
    let k = data.spec.n_regressors;
    let expansions = 1 + p + p * p;
    let width = expansions * (1 + k);

    let mut raw = Vec::with_capacity(data.t_obs);
    for t in 0..data.t_obs {
        let mut q = DMatrix::zeros(n, width);
        let mut col = 0;
        let ylag = data.ystar.column(t).clone_owned();
        let push = |q: &mut DMatrix<f64>, col: &mut usize, v: &DVector<f64>| {
            q.set_column(*col, v);
            *col += 1;
        };

        push(&mut q, &mut col, &ylag);
        let first: Vec<DVector<f64>> = (0..p).map(|a| weights.matrix(a) * &ylag).collect();
        for v in &first {
            push(&mut q, &mut col, v);
        }
        for a in 0..p {
            for b in 0..p {
                push(&mut q, &mut col, &(weights.matrix(a) * &first[b]));
            }
        }
        for c in 0..k {
            let xc = data.xstar[t].column(c).clone_owned();
            push(&mut q, &mut col, &xc);
        }
        for a in 0..p {
            for c in 0..k {
                let xc = data.xstar[t].column(c).clone_owned();
                push(&mut q, &mut col, &(weights.matrix(a) * &xc));
            }
        }
        for a in 0..p {
            for b in 0..p {
                for c in 0..k {
                    let xc = data.xstar[t].column(c).clone_owned();
                    push(&mut q, &mut col, &(weights.matrix(a) * (weights.matrix(b) * &xc)));
                }
            }
        }
        debug_assert_eq!(col, width);
        raw.push(q);
    }

    // mean square of each projected column across the stacked sample
    let mut keep = Vec::new();
    for c in 0..width {
        let ms: f64 = raw
            .iter()
            .map(|q| data.proj.vec(&q.column(c).clone_owned()).norm_squared())
            .sum::<f64>()
            / data.n_total as f64;
        if ms >= IV_VARIANCE_FLOOR {
            keep.push(c);
        }
    }
    if keep.len() < width {
        log::warn!(
            "dropping {} near-constant instrument column(s) of {}",
            width - keep.len(),
            width
        );
    }
    let min_cols = k + 2 * p + 1;
    if keep.len() < min_cols {
        return Err(Error::UnderIdentified(format!(
            "{} usable instrument columns, need at least {}",
            keep.len(),
            min_cols
        )));
    }
    if keep.len() == width {
        return Ok(raw);
    }
    Ok(raw
        .into_iter()
        .map(|q| {
            let mut out = DMatrix::zeros(n, keep.len());
            for (dst, &src) in keep.iter().enumerate() {
                out.set_column(dst, &q.column(src));
            }
            out
        })
        .collect())
}

/// Center a candidate quadratic matrix so that `tr(J B J) = 0`:
/// `B - tr(B J) / tr(J) * J` (with `J` replaced by the identity when no
/// demeaning applies).
pub(crate) fn center_quadratic(b: &DMatrix<f64>, proj: Projection) -> DMatrix<f64> {
    let n = b.nrows();
    let pm = proj.matrix(n);
    let tr_bj = (b * &pm).trace();
    b - pm * (tr_bj / proj.trace(n))
}

/// The default quadratic moment matrices: the centered weight matrices
/// followed by their centered squares, 2p matrices in total, ordered
/// `(M_1.., M_p.., M_1^2.., M_p^2..)`.
pub fn default_quadratic(weights: &SpatialWeightSet, proj: Projection) -> Vec<DMatrix<f64>> {
    let p = weights.order();
    let mut out = Vec::with_capacity(2 * p);
    for j in 0..p {
        out.push(center_quadratic(weights.matrix(j), proj));
    }
    for j in 0..p {
        let sq = weights.matrix(j) * weights.matrix(j);
        out.push(center_quadratic(&sq, proj));
    }
    out
}

/// Evaluates the stacked moment vector and its analytic Jacobian at
/// arbitrary coefficients. The moment vector is
/// `g = (U'J P_l J U for each l ; Q' J U)` summed over periods; it is a
/// quadratic polynomial in the coefficients, so the Jacobian below is exact.
pub struct MomentEvaluator<'a> {
    pub data: &'a GmmData,
    pub moments: &'a MomentSet,
    /// Symmetrized quadratic matrices `P_l + P_l'`.
    psym: Vec<DMatrix<f64>>,
    /// Projected instrument blocks `J Q_t`.
    jq: Vec<DMatrix<f64>>,
    /// The constant Jacobian rows of the linear moments:
    /// `[-sum_t Q' J W_j y2 | -sum_t Q' J Z]`, k_q-by-(p + k_z).
    lin_jac: DMatrix<f64>,
}

impl<'a> MomentEvaluator<'a> {
    pub fn new(data: &'a GmmData, moments: &'a MomentSet) -> Result<Self> {
        if moments.iv.len() != data.t_obs {
            return Err(Error::DimensionMismatch(format!(
                "moment set has {} instrument periods, data has {}",
                moments.iv.len(),
                data.t_obs
            )));
        }
        let psym: Vec<DMatrix<f64>> = moments.quad.iter().map(|p| p + p.transpose()).collect();
        let jq: Vec<DMatrix<f64>> = moments.iv.iter().map(|q| data.proj.cols(q)).collect();

        let p = data.spec.spatial_order;
        let k_z = data.spec.k_z();
        let k_q = moments.k_q();
        let mut lin_jac = DMatrix::zeros(k_q, p + k_z);
        for t in 0..data.t_obs {
            for j in 0..p {
                let col = jq[t].transpose() * &data.wy2[t][j];
                for r in 0..k_q {
                    lin_jac[(r, j)] -= col[r];
                }
            }
            let block = jq[t].transpose() * &data.z[t];
            for c in 0..k_z {
                for r in 0..k_q {
                    lin_jac[(r, p + c)] -= block[(r, c)];
                }
            }
        }
        Ok(MomentEvaluator { data, moments, psym, jq, lin_jac })
    }

    pub fn dim(&self) -> usize {
        self.moments.dim()
    }

    pub fn n_params(&self) -> usize {
        self.data.spec.n_params()
    }

    /// The stacked moment vector at `theta` (raw sums, not divided by N).
    pub fn moment_vector(&self, theta: &Theta) -> DVector<f64> {
        let ju = self.data.projected_residuals(theta);
        let m = self.moments.n_quad();
        let k_q = self.moments.k_q();
        let mut g = DVector::zeros(m + k_q);
        for t in 0..self.data.t_obs {
            for l in 0..m {
                // U'JPJU = (JU)' P (JU) = (JU)' Psym (JU) / 2
                let w = &self.psym[l] * &ju[t];
                g[l] += 0.5 * ju[t].dot(&w);
            }
            let lin = self.jq[t].transpose() * &ju[t];
            for r in 0..k_q {
                g[m + r] += lin[r];
            }
        }
        g
    }

    /// Moment vector and its exact Jacobian with respect to
    /// `(rho', gamma, delta', beta')`.
    pub fn moment_and_jacobian(&self, theta: &Theta) -> (DVector<f64>, DMatrix<f64>) {
        let ju = self.data.projected_residuals(theta);
        let m = self.moments.n_quad();
        let k_q = self.moments.k_q();
        let p = self.data.spec.spatial_order;
        let k_z = self.data.spec.k_z();
        let mut g = DVector::zeros(m + k_q);
        let mut jac = DMatrix::zeros(m + k_q, p + k_z);
        for t in 0..self.data.t_obs {
            for l in 0..m {
                let w = &self.psym[l] * &ju[t];
                g[l] += 0.5 * ju[t].dot(&w);
                for j in 0..p {
                    jac[(l, j)] -= w.dot(&self.data.jwy2[t][j]);
                }
                let row = w.transpose() * &self.data.jz[t];
                for c in 0..k_z {
                    jac[(l, p + c)] -= row[c];
                }
            }
            let lin = self.jq[t].transpose() * &ju[t];
            for r in 0..k_q {
                g[m + r] += lin[r];
            }
        }
        for r in 0..k_q {
            for c in 0..(p + k_z) {
                jac[(m + r, c)] = self.lin_jac[(r, c)];
            }
        }
        (g, jac)
    }
}

/// Residual variance plug-in: mean squared projected residual over the
/// stacked transformed sample, `sum_t ||J U_t||^2 / N`.
pub fn sigma2_hat(data: &GmmData, theta: &Theta) -> f64 {
    data.projected_residuals(theta)
        .iter()
        .map(|u| u.norm_squared())
        .sum::<f64>()
        / data.n_total as f64
}

/// Fourth-moment plug-in from first-differenced level residuals.
///
/// First differencing the level equation removes unit effects and leaves
/// `U_t - U_{t-1}`, whose projected fourth powers average to
/// `2 mu4 + 6 sigma^4` (cross terms vanish), hence the 1/(2N) scale and the
/// `3 sigma^4` subtraction. The implied kurtosis ratio is clamped below at
/// `1 + 1e-6` (Jensen) with a warning.
pub fn mu4_from_level_residuals(
    level_resid: &DMatrix<f64>,
    proj: Projection,
    sigma2: f64,
) -> (f64, bool) {
    let diffs = first_difference(level_resid).expect("level residuals span at least two periods");
    let n_total = (level_resid.nrows() * (level_resid.ncols() - 1)) as f64;
    let mut sum4 = 0.0;
    for t in 0..diffs.ncols() {
        let jd = proj.vec(&diffs.column(t).clone_owned());
        sum4 += jd.iter().map(|v| v.powi(4)).sum::<f64>();
    }
    let raw = sum4 / (2.0 * n_total) - 3.0 * sigma2 * sigma2;
    let floor = (1.0 + 1e-6) * sigma2 * sigma2;
    if raw < floor {
        log::warn!("fourth-moment plug-in {raw:.4e} clamped to Jensen floor {floor:.4e}");
        (floor, true)
    } else {
        (raw, false)
    }
}

/// Convenience wrapper computing the level residuals at `theta` first.
pub fn mu4_hat(
    data: &GmmData,
    weights: &SpatialWeightSet,
    theta: &Theta,
    sigma2: f64,
) -> (f64, bool) {
    let resid = data.level_residuals(weights, theta);
    mu4_from_level_residuals(&resid, data.proj, sigma2)
}

/// Estimated covariance of the stacked moment vector divided by N, with its
/// Cholesky factorization for weighting.
#[derive(Debug, Clone)]
pub struct OmegaHat {
    pub matrix: DMatrix<f64>,
    pub sigma2: f64,
    pub mu4: f64,
    /// Whether a ridge was needed before factorization.
    pub ridged: bool,
    /// Condition number of the (possibly ridged) matrix.
    pub condition: f64,
    chol: Cholesky<f64, Dyn>,
}

impl OmegaHat {
    /// Solve `Omega x = v`.
    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// Solve `Omega X = M` columnwise.
    pub fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(m)
    }
}

/// Plug-in estimator of the moment covariance (divided by N).
///
/// Block structure: the quadratic block pairs `(l, j)` carry
/// `sigma^4 tr(JP_lJ (JP_jJ)^s) + (mu4 - 3 sigma^4) diag(JP_lJ)'diag(JP_jJ)`
/// per period; the linear block is `sigma^2 Q'JQ`; the off-diagonal blocks
/// are zero because third-moment terms drop under the projection.
pub fn omega_hat(
    data: &GmmData,
    moments: &MomentSet,
    sigma2: f64,
    mu4: f64,
) -> Result<OmegaHat> {
    if sigma2 <= 0.0 {
        return Err(Error::WeightingFailure(format!(
            "residual variance {sigma2:.3e} is not positive"
        )));
    }
    let m = moments.n_quad();
    let k_q = moments.k_q();
    let dim = m + k_q;
    let nf = data.n as f64;
    let s4 = sigma2 * sigma2;
    let kurt = mu4 - 3.0 * s4;

    let mut omega = DMatrix::zeros(dim, dim);
    let conj: Vec<DMatrix<f64>> = moments.quad.iter().map(|p| data.proj.conjugate(p)).collect();
    for l in 0..m {
        for j in l..m {
            let prod = (&conj[l] * (&conj[j] + conj[j].transpose())).trace();
            let diag_dot: f64 = (0..data.n).map(|i| conj[l][(i, i)] * conj[j][(i, i)]).sum();
            let val = (s4 * prod + kurt * diag_dot) / nf;
            omega[(l, j)] = val;
            omega[(j, l)] = val;
        }
    }
    let mut qjq = DMatrix::zeros(k_q, k_q);
    for t in 0..data.t_obs {
        let jq = data.proj.cols(&moments.iv[t]);
        qjq += jq.transpose() * jq;
    }
    qjq *= sigma2 / data.n_total as f64;
    for r in 0..k_q {
        for c in 0..k_q {
            omega[(m + r, m + c)] = 0.5 * (qjq[(r, c)] + qjq[(c, r)]);
        }
    }

    // rcond from the symmetric eigenvalues; ridge once if degenerate
    let eig = omega.symmetric_eigenvalues();
    let max_abs = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min_eig = eig.min();
    let rcond = if max_abs > 0.0 { min_eig / max_abs } else { -1.0 };
    let mut ridged = false;
    let mut work = omega.clone();
    if !(rcond > OMEGA_RCOND_MIN) {
        let ridge = OMEGA_RIDGE * work.diagonal().mean().max(f64::MIN_POSITIVE);
        for i in 0..dim {
            work[(i, i)] += ridge;
        }
        ridged = true;
    }
    let chol = match work.clone().cholesky() {
        Some(c) => c,
        None if !ridged => {
            let ridge = OMEGA_RIDGE * work.diagonal().mean().max(f64::MIN_POSITIVE);
            for i in 0..dim {
                work[(i, i)] += ridge;
            }
            ridged = true;
            work.clone().cholesky().ok_or_else(|| {
                Error::WeightingFailure("moment covariance not positive definite after ridge".into())
            })?
        }
        None => {
            return Err(Error::WeightingFailure(
                "moment covariance not positive definite after ridge".into(),
            ))
        }
    };
    let eig = work.symmetric_eigenvalues();
    let condition = eig.max() / eig.min().max(f64::MIN_POSITIVE);
    Ok(OmegaHat { matrix: work, sigma2, mu4, ridged, condition, chol })
}

/// Rank diagnostic of the linear identification condition.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IdentificationReport {
    /// Smallest singular value of `(1/N) Q'J(Z, L)`.
    pub smallest_singular_value: f64,
    /// Condition number of `(1/N) Q'J(Z, L)`.
    pub condition: f64,
    /// Condition number of the instrument Gram matrix `(1/N) Q'JQ`.
    pub iv_gram_condition: f64,
    pub flagged: bool,
}

/// Condition threshold above which identification is flagged.
pub const IDENTIFICATION_CONDITION_LIMIT: f64 = 1e8;

/// Inspect the linear identification condition for rank deficiency: both
/// `(1/N) Q'J(Z, L)` and the instrument Gram matrix `(1/N) Q'JQ` must have
/// full column rank. The `L` columns are the fitted spillover means from a
/// preliminary fit.
pub fn identification_diagnostic(
    data: &GmmData,
    iv: &[DMatrix<f64>],
    l_cols: &[DMatrix<f64>],
) -> IdentificationReport {
    let k_q = iv.first().map_or(0, |q| q.ncols());
    let p = data.spec.spatial_order;
    let k_z = data.spec.k_z();
    let mut m = DMatrix::zeros(k_q, k_z + p);
    let mut gram = DMatrix::zeros(k_q, k_q);
    for t in 0..data.t_obs {
        let jq = data.proj.cols(&iv[t]);
        let mut zl = DMatrix::zeros(data.n, k_z + p);
        for c in 0..k_z {
            zl.set_column(c, &data.z[t].column(c));
        }
        for c in 0..p {
            zl.set_column(k_z + c, &l_cols[t].column(c));
        }
        m += jq.transpose() * zl;
        gram += jq.transpose() * jq;
    }
    m /= data.n_total as f64;
    gram /= data.n_total as f64;

    let cond_of = |mat: DMatrix<f64>| {
        let sv = mat.svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        (smin, cond)
    };
    let (smin, condition) = cond_of(m);
    let (_, iv_gram_condition) = cond_of(gram);
    IdentificationReport {
        smallest_singular_value: smin,
        condition,
        iv_gram_condition,
        flagged: !(condition < IDENTIFICATION_CONDITION_LIMIT)
            || !(iv_gram_condition < IDENTIFICATION_CONDITION_LIMIT),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate, DgpConfig, ErrorDist};
    use crate::model::{ModelSpec, Theta};
    use crate::weights::{build_queen_contiguity, build_second_order_contiguity, SpatialWeightSet};

    fn m1_data(seed: u64, t_len: usize) -> (GmmData, SpatialWeightSet) {
        let w = build_queen_contiguity(4).unwrap();
        let spec = ModelSpec::new(1, 2);
        let theta = Theta::new(vec![0.2], 0.2, vec![-0.2], vec![0.5, 1.0]);
        let mut config = DgpConfig::new(spec, theta, t_len, ErrorDist::Gaussian, seed);
        config.burn_in = 50;
        let sim = simulate(&config, &w).unwrap();
        (GmmData::build(&sim.panel, &w, &spec).unwrap(), w)
    }

    #[test]
    fn default_iv_width_p1_k2() {
        let (data, w) = m1_data(11, 6);
        let iv = default_iv(&data, &w).unwrap();
        assert_eq!(iv.len(), 5);
        assert_eq!(iv[0].ncols(), 9); // (1+1+1)(1+2)
    }

    #[test]
    fn default_iv_width_p2() {
        let w = build_second_order_contiguity(4).unwrap();
        let spec = ModelSpec::new(2, 2);
        let theta = Theta::new(vec![0.3, 0.1], 0.1, vec![0.01, 0.01], vec![0.5, 1.0]);
        let mut config = DgpConfig::new(spec, theta, 6, ErrorDist::Gaussian, 3);
        config.burn_in = 50;
        let sim = simulate(&config, &w).unwrap();
        let data = GmmData::build(&sim.panel, &w, &spec).unwrap();
        let iv = default_iv(&data, &w).unwrap();
        // lag part 1+2+4 = 7, with k=2 regressor part 14
        assert_eq!(iv[0].ncols(), 21);
    }

    #[test]
    fn quadratic_matrices_are_trace_centered() {
        for side in [3usize, 4, 5] {
            let w = build_queen_contiguity(side).unwrap();
            for proj in [Projection::Demean, Projection::Identity] {
                for p in default_quadratic(&w, proj) {
                    let c = proj.conjugate(&p);
                    assert!(c.trace().abs() < 1e-10, "tr(JPJ) = {}", c.trace());
                }
            }
        }
        let w2 = build_second_order_contiguity(4).unwrap();
        let quads = default_quadratic(&w2, Projection::Demean);
        assert_eq!(quads.len(), 4);
    }

    #[test]
    fn ring_quadratic_matches_hand_computation() {
        // 4-node ring, row-normalized: tr(MJ) = -1, so P = M + J/3
        let mut m = DMatrix::zeros(4, 4);
        for i in 0..4 {
            m[(i, (i + 1) % 4)] = 0.5;
            m[(i, (i + 3) % 4)] = 0.5;
        }
        let w = SpatialWeightSet::new(vec![m.clone()]).unwrap();
        let p = default_quadratic(&w, Projection::Demean).remove(0);
        let jmat = Projection::Demean.matrix(4);
        let expect = &m + jmat / 3.0;
        assert!((p - expect).norm() < 1e-12);
    }

    #[test]
    fn moment_vector_zero_at_exact_fit() {
        // noise-free panel: the residual vanishes at the generating theta
        let w = build_queen_contiguity(3).unwrap();
        let spec = ModelSpec::new(1, 1);
        let theta = Theta::new(vec![0.2], 0.3, vec![-0.1], vec![0.7]);
        let sim = crate::dgp::simulate_with_draws(
            &DgpConfig::new(spec, theta.clone(), 5, ErrorDist::Gaussian, 0),
            &w,
            &DVector::from_fn(9, |i, _| i as f64 * 0.1),
            &DVector::from_fn(5, |t, _| (t as f64).sin()),
            &(0..5)
                .map(|t| DMatrix::from_fn(9, 1, |i, _| ((i + t) as f64 * 0.37).cos()))
                .collect::<Vec<_>>(),
            &vec![DVector::from_element(9, 1.0); 5],
            &[],
            &[],
            &[],
        )
        .unwrap();
        let data = GmmData::build(&sim.panel, &w, &spec).unwrap();
        let moments = MomentSet::default_for(&data, &w).unwrap();
        let eval = MomentEvaluator::new(&data, &moments).unwrap();
        let g = eval.moment_vector(&theta);
        assert!(g.norm() < 1e-8, "g norm {}", g.norm());
    }

    #[test]
    fn quadratic_moments_ignore_constant_shifts() {
        let (data, w) = m1_data(21, 6);
        let moments = MomentSet::default_for(&data, &w).unwrap();
        let u = DVector::from_fn(data.n, |i, _| (i as f64 * 1.3).sin());
        let shifted = u.add_scalar(5.0);
        for p in &moments.quad {
            let ju = data.proj.vec(&u);
            let jus = data.proj.vec(&shifted);
            let a = ju.dot(&(p * &ju));
            let b = jus.dot(&(p * &jus));
            assert!((a - b).abs() < 1e-8 * a.abs().max(1.0));
        }
    }

    #[test]
    fn sigma2_zero_for_zero_residuals() {
        let (data, w) = m1_data(31, 5);
        // evaluating at the data-generating theta of a noise-free panel is
        // covered above; here force residuals to zero algebraically
        let theta = Theta::new(vec![0.0], 0.0, vec![0.0], vec![0.0, 0.0]);
        let mut clone = data.clone();
        for t in 0..clone.t_obs {
            clone.y2[t] = DVector::zeros(clone.n);
            clone.jy2[t] = DVector::zeros(clone.n);
            clone.wy2[t] = vec![DVector::zeros(clone.n)];
            clone.jwy2[t] = vec![DVector::zeros(clone.n)];
            clone.z[t] = DMatrix::zeros(clone.n, clone.spec.k_z());
            clone.jz[t] = DMatrix::zeros(clone.n, clone.spec.k_z());
        }
        assert_eq!(sigma2_hat(&clone, &theta), 0.0);
        let _ = w;
    }

    #[test]
    fn mu4_rademacher_recovers_unit_fourth_moment() {
        // inject iid +-1 level residuals: sigma^2 = 1, mu4 = 1
        let n = 100;
        let t_len = 40;
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(5);
        let resid = DMatrix::from_fn(n, t_len, |_, _| {
            if rand::Rng::random::<bool>(&mut rng) {
                1.0
            } else {
                -1.0
            }
        });
        let (mu4, clamped) = mu4_from_level_residuals(&resid, Projection::Demean, 1.0);
        assert!(!clamped);
        assert!((mu4 - 1.0).abs() < 0.1, "mu4 {mu4}");
    }

    #[test]
    fn mu4_zero_residuals() {
        let resid = DMatrix::zeros(10, 5);
        let (mu4, _) = mu4_from_level_residuals(&resid, Projection::Demean, 0.0);
        assert_eq!(mu4, 0.0);
    }

    #[test]
    fn omega_linear_only_matches_qjq() {
        let (data, w) = m1_data(41, 6);
        let iv = default_iv(&data, &w).unwrap();
        let moments = MomentSet { iv: iv.clone(), quad: vec![], provenance: MomentProvenance::Default };
        let sigma2 = 2.0;
        let omega = omega_hat(&data, &moments, sigma2, 3.0 * sigma2 * sigma2).unwrap();
        let mut expect = DMatrix::zeros(moments.k_q(), moments.k_q());
        for t in 0..data.t_obs {
            let jq = data.proj.cols(&iv[t]);
            expect += jq.transpose() * jq;
        }
        expect *= sigma2 / data.n_total as f64;
        assert!((&omega.matrix - &expect).norm() < 1e-9 * expect.norm().max(1.0) + 1e-7);
    }

    #[test]
    fn omega_is_symmetric_psd() {
        let (data, w) = m1_data(51, 8);
        let moments = MomentSet::default_for(&data, &w).unwrap();
        let omega = omega_hat(&data, &moments, 4.9, 170.0).unwrap();
        assert!((&omega.matrix - omega.matrix.transpose()).norm() < 1e-12);
        let eig = omega.matrix.symmetric_eigenvalues();
        assert!(eig.min() > -1e-10, "min eigenvalue {}", eig.min());
    }

    #[test]
    fn identification_flags_duplicate_columns() {
        let (data, w) = m1_data(61, 8);
        let mut iv = default_iv(&data, &w).unwrap();
        for q in iv.iter_mut() {
            let dup = q.column(0).clone_owned();
            q.set_column(1, &dup);
        }
        let l_cols: Vec<DMatrix<f64>> = (0..data.t_obs)
            .map(|t| DMatrix::from_fn(data.n, 1, |i, _| ((i + t) as f64).cos()))
            .collect();
        let report = identification_diagnostic(&data, &iv, &l_cols);
        assert!(report.flagged, "condition {}", report.condition);

        // random full-rank instruments must not be flagged
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(9);
        let iv_ok: Vec<DMatrix<f64>> = (0..data.t_obs)
            .map(|_| {
                DMatrix::from_fn(data.n, data.spec.k_z() + 1, |_, _| {
                    rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
                })
            })
            .collect();
        let report = identification_diagnostic(&data, &iv_ok, &l_cols);
        assert!(!report.flagged, "condition {}", report.condition);
    }
}
