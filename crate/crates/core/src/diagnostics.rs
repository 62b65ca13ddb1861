//! Residual diagnostics: per-location temporal autocorrelation with
//! Ljung-Box p-values and per-period spatial autocorrelation (Moran's I)
//! with seeded permutation p-values.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dgp::mix_seed;
use crate::model::Theta;
use crate::moments::GmmData;
use crate::weights::SpatialWeightSet;

/// Number of label permutations behind each Moran p-value.
pub const DEFAULT_PERMUTATIONS: usize = 999;

/// Significance level used by the summary percentages.
pub const SUMMARY_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoranResult {
    /// 1-based transformed period index.
    pub period: usize,
    pub statistic: f64,
    /// One-sided permutation p-value for positive spatial autocorrelation.
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocationAcf {
    pub location: usize,
    /// Sample autocorrelations at lags 1..=L.
    pub acf: Vec<f64>,
    /// Ljung-Box p-value over those lags.
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub acf: Vec<LocationAcf>,
    pub moran: Vec<MoranResult>,
    /// Share of locations with a Ljung-Box p-value below 5%.
    pub pct_autocorrelated_locations: f64,
    /// Share of periods with significantly positive Moran's I at 5%.
    pub pct_spatially_correlated_periods: f64,
}

/// Sample autocorrelations of one series at lags 1..=max_lag.
pub fn sample_acf(series: &[f64], max_lag: usize) -> Vec<f64> {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|v| (v - mean) * (v - mean)).sum();
    if var == 0.0 {
        return vec![0.0; max_lag];
    }
    (1..=max_lag)
        .map(|lag| {
            let cov: f64 = (lag..n)
                .map(|t| (series[t] - mean) * (series[t - lag] - mean))
                .sum();
            cov / var
        })
        .collect()
}

/// Ljung-Box p-value for joint nullity of the first `acf.len()` sample
/// autocorrelations of a length-n series.
pub fn ljung_box_pvalue(acf: &[f64], n: usize) -> f64 {
    let l = acf.len();
    if l == 0 || n <= l + 1 {
        return 1.0;
    }
    let nf = n as f64;
    let stat: f64 = nf
        * (nf + 2.0)
        * acf
            .iter()
            .enumerate()
            .map(|(idx, r)| r * r / (nf - (idx + 1) as f64))
            .sum::<f64>();
    let chi = ChiSquared::new(l as f64).expect("positive dof");
    1.0 - chi.cdf(stat)
}

/// Moran's I of one cross-section against a row-normalized weight matrix:
/// `(u' W u) / (u' u)` on the demeaned vector.
pub fn morans_i(values: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    let mean = values.mean();
    let u = values.map(|v| v - mean);
    let den = u.norm_squared();
    if den == 0.0 {
        return 0.0;
    }
    u.dot(&(w * &u)) / den
}

fn moran_permutation_pvalue(
    values: &DVector<f64>,
    w: &DMatrix<f64>,
    observed: f64,
    n_perms: usize,
    rng: &mut ChaCha12Rng,
) -> f64 {
    let mut pool: Vec<f64> = values.iter().copied().collect();
    let mut at_least = 1usize;
    for _ in 0..n_perms {
        pool.shuffle(rng);
        let perm = DVector::from_column_slice(&pool);
        if morans_i(&perm, w) >= observed {
            at_least += 1;
        }
    }
    at_least as f64 / (n_perms + 1) as f64
}

/// Default lag depth for the temporal ACF: a quarter of the series,
/// capped at 10.
pub fn default_acf_lags(t_obs: usize) -> usize {
    (t_obs / 4).clamp(1, 10)
}

/// Run the full diagnostic battery on fitted transformed residuals.
///
/// Residuals are the projected transformed residuals at `theta`; each
/// location contributes a length-(T-1) series to the temporal block, each
/// period one cross-section to the spatial block. Moran's I is evaluated
/// against the row-normalized first-order weight matrix; the permutation
/// stream is seeded per period so results are independent of threading.
pub fn residual_diagnostics(
    data: &GmmData,
    weights: &SpatialWeightSet,
    theta: &Theta,
    seed: u64,
    n_perms: usize,
) -> Diagnostics {
    let resid = data.projected_residuals(theta);
    let n = data.n;
    let t_obs = data.t_obs;
    let max_lag = default_acf_lags(t_obs);

    let w_first = if weights.is_matrix_row_normalized(0) {
        weights.matrix(0).clone()
    } else {
        weights.row_normalize().matrix(0).clone()
    };

    let acf: Vec<LocationAcf> = (0..n)
        .map(|i| {
            let series: Vec<f64> = (0..t_obs).map(|t| resid[t][i]).collect();
            let acf = sample_acf(&series, max_lag);
            let p_value = ljung_box_pvalue(&acf, t_obs);
            LocationAcf { location: i, acf, p_value }
        })
        .collect();

    let moran: Vec<MoranResult> = (0..t_obs)
        .map(|t| {
            let statistic = morans_i(&resid[t], &w_first);
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, 0x4d6f_7261_6e00_0000 ^ t as u64));
            let p_value = moran_permutation_pvalue(&resid[t], &w_first, statistic, n_perms, &mut rng);
            MoranResult { period: t + 1, statistic, p_value }
        })
        .collect();

    let pct_autocorrelated_locations =
        100.0 * acf.iter().filter(|a| a.p_value < SUMMARY_ALPHA).count() as f64 / n as f64;
    let pct_spatially_correlated_periods =
        100.0 * moran.iter().filter(|m| m.p_value < SUMMARY_ALPHA).count() as f64 / t_obs as f64;

    Diagnostics { acf, moran, pct_autocorrelated_locations, pct_spatially_correlated_periods }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn ring4() -> DMatrix<f64> {
        let mut m = DMatrix::zeros(4, 4);
        for i in 0..4 {
            m[(i, (i + 1) % 4)] = 0.5;
            m[(i, (i + 3) % 4)] = 0.5;
        }
        m
    }

    #[test]
    fn alternating_ring_is_perfectly_negative() {
        let u = DVector::from_column_slice(&[1.0, -1.0, 1.0, -1.0]);
        let i = morans_i(&u, &ring4());
        assert!((i + 1.0).abs() < 1e-12, "Moran {i}");
    }

    #[test]
    fn shared_component_is_detected() {
        // nearly common values across a lattice: Moran close to its maximum
        let side = 5;
        let w = crate::weights::build_queen_contiguity(side).unwrap();
        let n = side * side;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let u = DVector::from_fn(n, |i, _| {
            2.0 + (i as f64 * 0.001) + 1e-6 * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let stat = morans_i(&u, w.matrix(0));
        let mut prng = ChaCha12Rng::seed_from_u64(4);
        let p = moran_permutation_pvalue(&u, w.matrix(0), stat, 999, &mut prng);
        assert!(p < 0.01, "p = {p}");
    }

    #[test]
    fn iid_series_reject_at_nominal_rate() {
        // 190 locations, 239 periods of white noise: the Ljung-Box rejection
        // rate stays within 3 binomial standard errors of 5%
        let n = 190;
        let t_obs = 239;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut rejections = 0;
        for _ in 0..n {
            let series: Vec<f64> =
                (0..t_obs).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let acf = sample_acf(&series, 10);
            if ljung_box_pvalue(&acf, t_obs) < 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / n as f64;
        let band = 3.0 * (0.05f64 * 0.95 / n as f64).sqrt();
        assert!((rate - 0.05).abs() < band, "rate {rate}, band {band}");
    }

    #[test]
    fn autocorrelated_series_is_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut series = vec![0.0f64; 200];
        for t in 1..200 {
            series[t] = 0.7 * series[t - 1] + rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let acf = sample_acf(&series, 10);
        assert!(ljung_box_pvalue(&acf, 200) < 1e-6);
    }
}
