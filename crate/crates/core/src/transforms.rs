//! Deterministic data transformations: log-square, forward orthogonal
//! deviations (Helmert), cross-sectional demeaning, first differences.
//!
//! All operations are pure. The forward-orthogonal weights are applied in
//! closed form, column by column; the equivalent orthonormal-eigenvector
//! matrix is never materialized outside of test oracles.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Outcomes closer to zero than this trigger a near-degenerate-log warning.
pub const NEAR_ZERO_OUTCOME: f64 = 1e-12;

/// Elementwise log of squared outcomes: `y* = log(y^2)`.
///
/// Exact zeros abort (the transform is undefined and nothing here invents a
/// continuity device); values below [`NEAR_ZERO_OUTCOME`] in magnitude are
/// counted and logged as a warning.
pub fn log_square(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut zero_count = 0usize;
    let mut first_zero = None;
    let mut near_zero = 0usize;
    for j in 0..y.ncols() {
        for i in 0..y.nrows() {
            let v = y[(i, j)];
            if v == 0.0 {
                zero_count += 1;
                first_zero.get_or_insert((i, j));
            } else if v.abs() < NEAR_ZERO_OUTCOME {
                near_zero += 1;
            }
        }
    }
    if let Some((unit, time)) = first_zero {
        return Err(Error::ZeroOutcome { unit, time, count: zero_count });
    }
    if near_zero > 0 {
        log::warn!("log_square: {near_zero} outcome(s) below {NEAR_ZERO_OUTCOME} in magnitude");
    }
    Ok(y.map(|v| (v * v).ln()))
}

/// Forward-orthogonal scale constant `c_t = sqrt((T-t)/(T-t+1))` for
/// 1-based period `t` out of `t_len`.
pub fn helmert_scale(t: usize, t_len: usize) -> f64 {
    let rem = (t_len - t) as f64;
    (rem / (rem + 1.0)).sqrt()
}

/// Forward orthogonal deviations (Helmert transformation).
///
/// Column `t` (1-based) of the output is
/// `c_t * (col_t - mean(col_{t+1} .. col_T))`, so an n-by-T input maps to
/// n-by-(T-1) and anything constant in time is annihilated.
pub fn helmert(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, t_len) = (m.nrows(), m.ncols());
    if t_len < 2 {
        return Err(Error::DimensionMismatch(format!(
            "forward orthogonal deviations need at least 2 periods, got {t_len}"
        )));
    }
    let mut out = DMatrix::zeros(n, t_len - 1);
    // suffix[i] accumulates the sum of columns t+1..T while t walks backwards
    let mut suffix = m.column(t_len - 1).clone_owned();
    for t in (1..t_len).rev() {
        let c = helmert_scale(t, t_len);
        let fwd = (t_len - t) as f64;
        let col = m.column(t - 1);
        for i in 0..n {
            out[(i, t - 1)] = c * (col[i] - suffix[i] / fwd);
        }
        if t > 1 {
            suffix += col;
        }
    }
    Ok(out)
}

/// Forward orthogonal deviations of the lagged block.
///
/// The input holds periods 0..T-1 (one lag behind the outcome block) and the
/// same weights are applied, so column `t` is
/// `c_t * (col_{t-1} - mean(col_t .. col_{T-1}))` in lag indexing. This is
/// the plain Helmert transform of the shifted matrix.
pub fn helmert_lag(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    helmert(m)
}

/// Remove the cross-sectional mean from every column (the `I - 11'/n`
/// projection).
pub fn demean_cross_section(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n < 2 {
        return Err(Error::DimensionMismatch(format!(
            "cross-sectional demeaning needs n >= 2, got {n}"
        )));
    }
    let mut out = m.clone();
    for j in 0..out.ncols() {
        let mean = out.column(j).sum() / n as f64;
        for i in 0..n {
            out[(i, j)] -= mean;
        }
    }
    Ok(out)
}

/// Columnwise first differences: output column t = col_{t+1} - col_t.
pub fn first_difference(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, t_len) = (m.nrows(), m.ncols());
    if t_len < 2 {
        return Err(Error::DimensionMismatch(format!(
            "first differences need at least 2 periods, got {t_len}"
        )));
    }
    let mut out = DMatrix::zeros(n, t_len - 1);
    for t in 0..t_len - 1 {
        for i in 0..n {
            out[(i, t)] = m[(i, t + 1)] - m[(i, t)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_matrix(n: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, t, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
    }

    #[test]
    fn log_square_sign_invariant() {
        let y = DMatrix::from_row_slice(1, 3, &[1.0, -1.0, std::f64::consts::E]);
        let out = log_square(&y).unwrap();
        assert_eq!(out[(0, 0)], 0.0);
        assert_eq!(out[(0, 1)], 0.0);
        assert!((out[(0, 2)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn log_square_round_trip() {
        let y = random_matrix(6, 5, 1).map(|v| v + 3.0 * v.signum());
        let out = log_square(&y).unwrap();
        for j in 0..5 {
            for i in 0..6 {
                assert!((out[(i, j)].exp() - y[(i, j)] * y[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_square_zero_aborts_with_location() {
        let mut y = DMatrix::from_element(3, 4, 2.0);
        y[(2, 1)] = 0.0;
        match log_square(&y) {
            Err(Error::ZeroOutcome { unit, time, count }) => {
                assert_eq!((unit, time, count), (2, 1, 1));
            }
            other => panic!("expected ZeroOutcome, got {other:?}"),
        }
    }

    #[test]
    fn helmert_annihilates_time_constants() {
        let m = DMatrix::from_fn(4, 6, |i, _| i as f64 * 2.5 - 1.0);
        let out = helmert(&m).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn helmert_two_periods() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, -2.0, 4.0]);
        let out = helmert(&m).unwrap();
        let c = 0.5f64.sqrt();
        assert!((out[(0, 0)] - c * (3.0 - 1.0)).abs() < 1e-15);
        assert!((out[(1, 0)] - c * (-2.0 - 4.0)).abs() < 1e-15);
    }

    #[test]
    fn helmert_lag_matches_shifted_definition() {
        // lag input holds periods 0..T-1; column t must be
        // c_t (col_{t-1} - mean(col_t..col_{T-1})) in lag indexing
        let m = random_matrix(3, 5, 7);
        let out = helmert_lag(&m).unwrap();
        let t_len = 5;
        for t in 1..t_len {
            let c = helmert_scale(t, t_len);
            let fwd = (t_len - t) as f64;
            for i in 0..3 {
                let mean: f64 = (t..=t_len - 1).map(|h| m[(i, h)]).sum::<f64>() / fwd;
                let expect = c * (m[(i, t - 1)] - mean);
                assert!((out[(i, t - 1)] - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn demean_examples() {
        let m = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let out = demean_cross_section(&m).unwrap();
        assert_eq!(out.as_slice(), &[-1.0, 0.0, 1.0]);

        let c = DMatrix::from_element(4, 2, 7.7);
        let out = demean_cross_section(&c).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-14));

        let r = random_matrix(5, 3, 2);
        let once = demean_cross_section(&r).unwrap();
        let twice = demean_cross_section(&once).unwrap();
        assert!((&once - &twice).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn first_difference_examples() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 3.0, 6.0]);
        let out = first_difference(&m).unwrap();
        assert_eq!(out.as_slice(), &[2.0, 3.0]);

        let c = DMatrix::from_element(3, 4, 5.0);
        assert!(first_difference(&c).unwrap().iter().all(|v| *v == 0.0));

        let lin = DMatrix::from_fn(2, 5, |i, t| (i + 1) as f64 * t as f64);
        let out = first_difference(&lin).unwrap();
        for t in 0..4 {
            assert_eq!(out[(0, t)], 1.0);
            assert_eq!(out[(1, t)], 2.0);
        }
    }

    #[test]
    fn demean_and_helmert_commute() {
        let m = random_matrix(6, 7, 3);
        let a = demean_cross_section(&helmert(&m).unwrap()).unwrap();
        let b = helmert(&demean_cross_section(&m).unwrap()).unwrap();
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn short_inputs_rejected() {
        let m = DMatrix::from_element(3, 1, 1.0);
        assert!(helmert(&m).is_err());
        assert!(first_difference(&m).is_err());
        let row = DMatrix::from_element(1, 3, 1.0);
        assert!(demean_cross_section(&row).is_err());
    }
}
