//! Feasible best moment set: fitted-mean instruments for the transformed
//! lag and spillover-based quadratic matrices with a kurtosis-adjusted
//! diagonal correction.
//!
//! The instrument for the transformed lag is its conditional-mean
//! approximation `H_t`, built from three pieces at preliminary estimates:
//! the own-lag part damped by transition powers, the forward sums of the
//! fitted exogenous parts, and the unit-effect recovery averaged over past
//! level residuals. Transition powers are truncated once their infinity
//! norm falls below [`POWER_TRUNCATION`] (or at T, whichever comes first).

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::model::build_operators;
use crate::moments::{center_quadratic, GmmData, MomentProvenance, MomentSet, Projection};
use crate::transforms::helmert_scale;
use crate::weights::SpatialWeightSet;

use super::{recover_effects, GmmFit};

/// Transition powers below this infinity norm are treated as zero.
pub const POWER_TRUNCATION: f64 = 1e-12;

/// Kurtosis-dependent weight of the diagonal correction in the best
/// quadratic matrices: zero when the kurtosis ratio is 3.
pub fn diagonal_correction(n: usize, eta4: f64) -> f64 {
    let nf = n as f64;
    let r = nf / (nf - 2.0);
    r * r * (1.0 / (r + (eta4 - 3.0) / 2.0) - 1.0 / r)
}

/// Build the feasible best moment set from a preliminary fit.
///
/// Needs the preliminary coefficient estimates together with their variance
/// and fourth-moment plug-ins; recovers time effects itself when the model
/// has them (for row-normalized weights those columns are annihilated by
/// the projection either way).
pub fn best_instruments(
    data: &GmmData,
    weights: &SpatialWeightSet,
    prelim: &GmmFit,
) -> Result<MomentSet> {
    let n = data.n;
    let p = data.spec.spatial_order;
    let k = data.spec.n_regressors;
    let t_len = data.t_periods();
    let theta = &prelim.theta;
    let eta = theta.eta();
    let beta = DVector::from_vec(theta.beta.clone());

    let ops = build_operators(&data.spec, theta, weights)?;

    // time effects in levels and transformed; zero when absent
    let (alpha, _) = if data.spec.has_time_effects {
        recover_effects(data, weights, theta)
    } else {
        (DVector::zeros(t_len), DVector::zeros(n))
    };
    let alpha_star = if data.spec.has_time_effects {
        let row = DMatrix::from_fn(1, t_len, |_, t| alpha[t]);
        let tr = crate::transforms::helmert(&row)?;
        DVector::from_fn(data.t_obs, |t, _| tr[(0, t)])
    } else {
        DVector::zeros(data.t_obs)
    };

    // truncated transition powers A^1..A^hmax and prefix sums B_q = sum_{h<=q} A^h
    let mut powers: Vec<DMatrix<f64>> = Vec::new();
    let mut cur = ops.a.clone();
    for _ in 1..=t_len {
        let norm = (0..n)
            .map(|i| cur.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        if norm < POWER_TRUNCATION {
            break;
        }
        powers.push(cur.clone());
        cur = &cur * &ops.a;
    }
    let mut bsum: Vec<DMatrix<f64>> = Vec::with_capacity(t_len);
    bsum.push(DMatrix::identity(n, n));
    for q in 1..t_len {
        let next = if q <= powers.len() {
            &bsum[q - 1] + &powers[q - 1]
        } else {
            bsum[q - 1].clone()
        };
        bsum.push(next);
    }

    // fitted exogenous parts u_r = S^{-1}(X_r beta + alpha_r 1), r = 1..T-1
    let fitted: Vec<DVector<f64>> = (1..t_len)
        .map(|r| {
            let mut v = DVector::from_element(n, alpha[r - 1]);
            if k > 0 {
                v += &data.x[r - 1] * &beta;
            }
            &ops.s_inv * v
        })
        .collect();

    // suffix sums over r = t..T-1 of B_{T-r-1} u_r and of B_{T-r-1} itself
    let mut r_suffix: Vec<DVector<f64>> = vec![DVector::zeros(n); data.t_obs + 1];
    let mut c_suffix: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); data.t_obs + 1];
    for t in (1..t_len).rev() {
        let b = &bsum[t_len - t - 1];
        r_suffix[t - 1] = &r_suffix[t] + b * &fitted[t - 1];
        c_suffix[t - 1] = &c_suffix[t] + b;
    }

    // running sum of past level residuals net of time effects
    let level_resid = data.level_residuals(weights, theta);
    let mut past_sum = DVector::zeros(n);

    let mut iv = Vec::with_capacity(data.t_obs);
    for t in 1..=data.t_obs {
        let c_t = helmert_scale(t, t_len);
        let fwd = (t_len - t) as f64;
        let ylag = data.ystar.column(t - 1).clone_owned();

        // own-lag part: (I - mean of forward transition powers) Y*_{t-1}
        let mut h = ylag.clone();
        h -= (&bsum[t_len - t] - DMatrix::identity(n, n)) * &ylag / fwd;
        // forward fitted exogenous part
        h -= &r_suffix[t - 1] / fwd;
        h *= c_t;
        // unit-effect recovery from past periods (absent at t = 1)
        if t >= 2 {
            let s = t - 1; // newly available past period
            let mut m_s = level_resid.column(s - 1).clone_owned();
            m_s.add_scalar_mut(-alpha[s - 1]);
            past_sum += m_s;
            let correction = &c_suffix[t - 1] * (&ops.s_inv * &past_sum);
            h -= correction * (c_t / (fwd * (t as f64 - 1.0)));
        }

        // K_t = (H_t, M_1 H_t .. M_p H_t, X*_t)
        let k_z = data.spec.k_z();
        let mut kt = DMatrix::zeros(n, k_z);
        kt.set_column(0, &h);
        for j in 0..p {
            kt.set_column(1 + j, &(weights.matrix(j) * &h));
        }
        for c in 0..k {
            kt.set_column(1 + p + c, &data.xstar[t - 1].column(c));
        }

        // Q*_t = (G_1 (K_t eta + alpha*_t 1), .., G_p (..), K_t)
        let mut base = &kt * &eta;
        base.add_scalar_mut(alpha_star[t - 1]);
        let mut q = DMatrix::zeros(n, p + k_z);
        for r in 0..p {
            q.set_column(r, &(&ops.g[r] * &base));
        }
        for c in 0..k_z {
            q.set_column(p + c, &kt.column(c));
        }
        iv.push(q);
    }

    // best quadratic matrices: centered spillover operators plus the
    // kurtosis-weighted diagonal adjustment
    let sigma2 = prelim.sigma2;
    let eta4 = if sigma2 > 1e-14 {
        prelim.mu4.unwrap_or(3.0 * sigma2 * sigma2) / (sigma2 * sigma2)
    } else {
        3.0
    };
    let c_kurt = diagonal_correction(n, eta4);
    let quad = (0..p)
        .map(|j| {
            let mut pstar = center_quadratic(&ops.g[j], data.proj);
            if c_kurt != 0.0 {
                let conj = data.proj.conjugate(&ops.g[j]);
                let tr_gj = trace_against(&ops.g[j], data.proj);
                let mut diag_part = DMatrix::zeros(n, n);
                for i in 0..n {
                    diag_part[(i, i)] = conj[(i, i)] - tr_gj / n as f64;
                }
                pstar += diag_part * c_kurt;
            }
            pstar
        })
        .collect();

    Ok(MomentSet { iv, quad, provenance: MomentProvenance::BestFeasible })
}

/// `tr(G J)` for the demeaning projection, `tr(G)` otherwise.
fn trace_against(g: &DMatrix<f64>, proj: Projection) -> f64 {
    match proj {
        Projection::Identity => g.trace(),
        Projection::Demean => g.trace() - g.sum() / g.nrows() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate, DgpConfig, ErrorDist};
    use crate::estimators::{fit_initial_gmm, FitOptions};
    use crate::model::{ModelSpec, Theta};
    use crate::weights::build_queen_contiguity;

    #[test]
    fn gaussian_kurtosis_ratio_zeroes_the_correction() {
        assert_eq!(diagonal_correction(64, 3.0), 0.0);
        assert_eq!(diagonal_correction(9, 3.0), 0.0);
        assert!(diagonal_correction(64, 7.0).abs() > 0.0);
    }

    #[test]
    fn best_quadratic_matrices_are_trace_centered() {
        let w = build_queen_contiguity(4).unwrap();
        let spec = ModelSpec::new(1, 2);
        let theta = Theta::new(vec![0.2], 0.2, vec![-0.2], vec![0.5, 1.0]);
        let mut config = DgpConfig::new(spec, theta, 10, ErrorDist::Gaussian, 9);
        config.burn_in = 60;
        let sim = simulate(&config, &w).unwrap();
        let data = GmmData::build(&sim.panel, &w, &spec).unwrap();
        let prelim = fit_initial_gmm(&data, &w, &FitOptions::default()).unwrap();
        let best = best_instruments(&data, &w, &prelim).unwrap();
        assert_eq!(best.quad.len(), 1);
        assert_eq!(best.k_q(), 1 + data.spec.k_z());
        for p in &best.quad {
            let c = data.proj.conjugate(p);
            assert!(c.trace().abs() < 1e-10, "tr(JP*J) = {}", c.trace());
        }
    }

    #[test]
    fn time_effects_drop_from_projected_best_iv_under_row_normalization() {
        let w = build_queen_contiguity(4).unwrap();
        let spec = ModelSpec::new(1, 2);
        let theta = Theta::new(vec![0.2], 0.2, vec![-0.2], vec![0.5, 1.0]);
        let mut config = DgpConfig::new(spec, theta, 10, ErrorDist::Gaussian, 13);
        config.burn_in = 60;
        let sim = simulate(&config, &w).unwrap();
        let data = GmmData::build(&sim.panel, &w, &spec).unwrap();
        let prelim = fit_initial_gmm(&data, &w, &FitOptions::default()).unwrap();

        let with_alpha = best_instruments(&data, &w, &prelim).unwrap();

        // rebuild with time effects forced to zero: after projection the
        // instruments must be identical because J G_r 1 = 0 for
        // row-normalized weights
        let spec_no_alpha = ModelSpec { has_time_effects: false, ..spec };
        let mut data_no_alpha = data.clone();
        data_no_alpha.spec = spec_no_alpha;
        let without_alpha = best_instruments(&data_no_alpha, &w, &prelim).unwrap();

        // every alpha contribution to H_t, K_t and the spillover columns is
        // a constant vector under row-normalized weights, so projection
        // makes the two instrument sets identical column by column
        for t in 0..data.t_obs {
            let a = data.proj.cols(&with_alpha.iv[t]);
            let b = data.proj.cols(&without_alpha.iv[t]);
            let scale = a.amax().max(1.0);
            let diff = (a - b).amax();
            assert!(diff < 1e-8 * scale, "period {t} differs by {diff}");
        }
    }
}
