//! Shared oracles and fixtures for the integration suites.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use starch_core::dgp::{simulate, DgpConfig, ErrorDist};
use starch_core::model::{ModelSpec, Theta};
use starch_core::moments::GmmData;
use starch_core::weights::{build_queen_contiguity, SpatialWeightSet};

/// Explicit orthonormal eigenvector block of the within transformation:
/// column t holds the forward-orthogonal weights
/// `c_t (e_t - (1/(T-t)) sum_{h>t} e_h)`. Each column is an eigenvector of
/// `I - 11'/T` with eigenvalue one, and together they span its range.
pub fn forward_orthogonal_basis(t_len: usize) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(t_len, t_len - 1);
    for t in 1..t_len {
        let fwd = (t_len - t) as f64;
        let c = (fwd / (fwd + 1.0)).sqrt();
        f[(t - 1, t - 1)] = c;
        for h in t..t_len {
            f[(h, t - 1)] = -c / fwd;
        }
    }
    f
}

/// Verify the oracle matrix itself: orthonormal columns, orthogonal to the
/// constant vector, and projector equal to the demeaning matrix.
pub fn assert_is_eigenbasis(f: &DMatrix<f64>, tol: f64) {
    let t_len = f.nrows();
    let gram = f.transpose() * f;
    assert!(
        (gram - DMatrix::identity(t_len - 1, t_len - 1)).amax() < tol,
        "columns not orthonormal"
    );
    let ones = DVector::from_element(t_len, 1.0);
    assert!((f.transpose() * &ones).amax() < tol, "columns not orthogonal to 1");
    let j = DMatrix::from_fn(t_len, t_len, |i, k| {
        if i == k { 1.0 - 1.0 / t_len as f64 } else { -1.0 / t_len as f64 }
    });
    assert!(((f * f.transpose()) - j).amax() < tol, "projector differs from demeaning matrix");
}

/// Moments of `log e^2` for standard normal `e`, by deterministic
/// quadrature: substituting `x = exp(u)` turns `2 int_0^inf f(log x^2)
/// phi(x) dx` into a smooth integral handled by Simpson's rule.
pub fn log_chi2_moments_quadrature() -> (f64, f64, f64) {
    let lo = -40.0f64;
    let hi = 5.0f64;
    let steps = 200_000usize; // even
    let h = (hi - lo) / steps as f64;
    let integrand = |u: f64, power: i32, center: f64| -> f64 {
        let x = u.exp();
        let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        (2.0 * u - center).powi(power) * phi * x * 2.0
    };
    let simpson = |power: i32, center: f64| -> f64 {
        let mut acc = integrand(lo, power, center) + integrand(hi, power, center);
        for i in 1..steps {
            let u = lo + i as f64 * h;
            acc += integrand(u, power, center) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    let mean = simpson(1, 0.0);
    let var = simpson(2, mean);
    let mu4 = simpson(4, mean);
    (mean, var, mu4)
}

/// Simulate one panel from the weakly persistent first-order design and
/// build the transformed data for it.
pub fn m1_panel(side: usize, t_periods: usize, dist: ErrorDist, seed: u64) -> (GmmData, SpatialWeightSet) {
    let weights = build_queen_contiguity(side).unwrap();
    let spec = ModelSpec::new(1, 2);
    let theta = Theta::new(vec![0.2], 0.2, vec![-0.2], vec![0.5, 1.0]);
    let config = DgpConfig::new(spec, theta, t_periods, dist, seed);
    let sim = simulate(&config, &weights).unwrap();
    let data = GmmData::build(&sim.panel, &weights, &spec).unwrap();
    (data, weights)
}

pub fn m1_theta() -> Theta {
    Theta::new(vec![0.2], 0.2, vec![-0.2], vec![0.5, 1.0])
}
