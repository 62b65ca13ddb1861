//! Simulation of panels from the dynamic spatiotemporal ARCH process.
//!
//! Each period requires one linear solve with the spatial filter: the
//! log-squared outcome follows
//! `S Y*_t = gamma Y*_{t-1} + sum_l delta_l M_l Y*_{t-1} + X_t beta + mu + alpha_t 1 + e*_t`
//! with `e*_t = log e_t^2`, after which `h_t = exp(Y*_t - e*_t)` and
//! `y_t = sign(e_t) exp(Y*_t / 2)` recover levels.
//!
//! Reproducibility: every random ingredient (errors, regressors, fixed
//! effects, burn-in) draws from its own substream derived from the
//! configured seed by a SplitMix64 mix, so runs are bit-identical for a
//! given seed and independent of threading. Burn-in draws are indexed by
//! distance from period zero and consumed oldest-first, which makes a longer
//! burn-in prepend history instead of reshuffling it.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_operators, ModelSpec, Theta};
use crate::weights::SpatialWeightSet;

/// Log-squared outcomes beyond this magnitude abort the simulation instead
/// of silently overflowing `exp`.
pub const DIVERGENCE_LIMIT: f64 = 700.0;

/// Default number of warm-start periods approximating the infinite-history
/// initial condition.
pub const DEFAULT_BURN_IN: usize = 200;

/// Error distribution of the outcome equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    /// Standard normal.
    Gaussian,
    /// Student's t with `df` degrees of freedom, used raw (variance
    /// df/(df-2), deliberately not rescaled to 1).
    StudentT { df: f64 },
}

impl ErrorDist {
    pub fn t3() -> Self {
        ErrorDist::StudentT { df: 3.0 }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ErrorDist::Gaussian => Ok(()),
            ErrorDist::StudentT { df } if *df > 2.0 => Ok(()),
            ErrorDist::StudentT { df } => Err(Error::InvalidConfig(format!(
                "student_t needs df > 2, got {df}"
            ))),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            ErrorDist::Gaussian => rng.sample(StandardNormal),
            ErrorDist::StudentT { df } => rng.sample(StudentT::new(*df).expect("validated df")),
        }
    }
}

impl std::fmt::Display for ErrorDist {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ErrorDist::Gaussian => write!(f, "gaussian"),
            ErrorDist::StudentT { df } => write!(f, "t{df}"),
        }
    }
}

/// Configuration of a single simulated panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    pub spec: ModelSpec,
    pub theta: Theta,
    /// Number of observed periods T (plus the initial period 0).
    pub t_periods: usize,
    /// Warm-start periods discarded before period 0.
    pub burn_in: usize,
    pub error_dist: ErrorDist,
    pub seed: u64,
}

impl DgpConfig {
    pub fn new(spec: ModelSpec, theta: Theta, t_periods: usize, error_dist: ErrorDist, seed: u64) -> Self {
        DgpConfig { spec, theta, t_periods, burn_in: DEFAULT_BURN_IN, error_dist, seed }
    }
}

/// Observed data: outcomes including the initial period, and per-period
/// regressor matrices.
#[derive(Debug, Clone)]
pub struct Panel {
    /// n-by-(T+1) outcomes; column 0 is the observable initial period.
    pub y: DMatrix<f64>,
    /// Regressors for periods 1..T, each n-by-k.
    pub x: Vec<DMatrix<f64>>,
}

impl Panel {
    pub fn new(y: DMatrix<f64>, x: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = y.nrows();
        if y.ncols() < 2 {
            return Err(Error::DimensionMismatch(
                "panel needs the initial period plus at least one observation".into(),
            ));
        }
        let t = y.ncols() - 1;
        if x.len() != t {
            return Err(Error::DimensionMismatch(format!(
                "expected {} regressor periods, got {}",
                t,
                x.len()
            )));
        }
        let k = x.first().map_or(0, |m| m.ncols());
        for (i, m) in x.iter().enumerate() {
            if m.nrows() != n || m.ncols() != k {
                return Err(Error::DimensionMismatch(format!(
                    "regressor block {} is {}x{}, expected {}x{}",
                    i + 1,
                    m.nrows(),
                    m.ncols(),
                    n,
                    k
                )));
            }
        }
        Ok(Panel { y, x })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    /// Observed periods T (excluding period 0).
    pub fn t_periods(&self) -> usize {
        self.y.ncols() - 1
    }

    pub fn n_regressors(&self) -> usize {
        self.x.first().map_or(0, |m| m.ncols())
    }
}

/// A simulated panel along with the latent quantities that produced it.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: Panel,
    /// Latent volatilities for periods 1..T (n-by-T).
    pub h: DMatrix<f64>,
    /// Log-squared outcomes including period 0 (n-by-(T+1)).
    pub ystar: DMatrix<f64>,
    /// Unit fixed effects actually drawn.
    pub mu: DVector<f64>,
    /// Time fixed effects for periods 1..T (zeros when absent).
    pub alpha: DVector<f64>,
}

const STREAM_MU: u64 = 1;
const STREAM_ALPHA: u64 = 2;
const STREAM_ALPHA_BURN: u64 = 3;
const STREAM_X: u64 = 4;
const STREAM_X_BURN: u64 = 5;
const STREAM_EPS: u64 = 6;
const STREAM_EPS_BURN: u64 = 7;

/// SplitMix64 finalizer. Used to derive independent substreams and
/// per-replication seeds from one master seed.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, tag: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix_seed(seed, tag))
}

/// Draw a vector of errors from the given distribution. Deterministic in
/// the seed; `student_t` requires df > 2.
pub fn draw_errors(dist: ErrorDist, count: usize, seed: u64) -> Result<DVector<f64>> {
    dist.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Ok(DVector::from_fn(count, |_, _| dist.sample(&mut rng)))
}

/// Simulate a panel from the process.
///
/// The warm start iterates `burn_in` periods from a zero state with fresh
/// draws and keeps the final state as period 0. A hard failure is returned
/// when the filter is singular or any `|Y*|` exceeds [`DIVERGENCE_LIMIT`].
pub fn simulate(config: &DgpConfig, weights: &SpatialWeightSet) -> Result<SimulatedPanel> {
    config.error_dist.validate()?;
    config.theta.validate(&config.spec)?;
    if config.t_periods == 0 {
        return Err(Error::InvalidConfig("need at least one observed period".into()));
    }

    let n = weights.n();
    let k = config.spec.n_regressors;
    let seed = config.seed;

    let mut mu_rng = stream(seed, STREAM_MU);
    let mu = if config.spec.has_unit_effects {
        DVector::from_fn(n, |_, _| mu_rng.sample::<f64, _>(StandardNormal))
    } else {
        DVector::zeros(n)
    };

    let mut alpha_rng = stream(seed, STREAM_ALPHA);
    let alpha = if config.spec.has_time_effects {
        DVector::from_fn(config.t_periods, |_, _| alpha_rng.sample::<f64, _>(StandardNormal))
    } else {
        DVector::zeros(config.t_periods)
    };

    let mut x_rng = stream(seed, STREAM_X);
    let x: Vec<DMatrix<f64>> = (0..config.t_periods)
        .map(|_| DMatrix::from_fn(n, k, |_, _| x_rng.sample::<f64, _>(StandardNormal)))
        .collect();

    let mut eps_rng = stream(seed, STREAM_EPS);
    let eps: Vec<DVector<f64>> = (0..config.t_periods)
        .map(|_| DVector::from_fn(n, |_, _| config.error_dist.sample(&mut eps_rng)))
        .collect();

    // Burn-in ingredients are indexed by distance before period 0 and played
    // back oldest-first, so burn_in=400 shares its last 200 pre-periods with
    // burn_in=200 under the same seed.
    let mut xb_rng = stream(seed, STREAM_X_BURN);
    let x_burn: Vec<DMatrix<f64>> = (0..config.burn_in)
        .map(|_| DMatrix::from_fn(n, k, |_, _| xb_rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut ab_rng = stream(seed, STREAM_ALPHA_BURN);
    let alpha_burn: Vec<f64> = (0..config.burn_in)
        .map(|_| {
            if config.spec.has_time_effects {
                ab_rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        })
        .collect();
    let mut eb_rng = stream(seed, STREAM_EPS_BURN);
    let eps_burn: Vec<DVector<f64>> = (0..config.burn_in)
        .map(|_| DVector::from_fn(n, |_, _| config.error_dist.sample(&mut eb_rng)))
        .collect();

    simulate_with_draws(config, weights, &mu, &alpha, &x, &eps, &x_burn, &alpha_burn, &eps_burn)
}

/// Run the recursion on caller-supplied draws. This is the deterministic
/// backbone of [`simulate`]; tests use it to inject exact ingredients
/// (for example `eps = 1` everywhere for a noise-free panel).
#[allow(clippy::too_many_arguments)]
pub fn simulate_with_draws(
    config: &DgpConfig,
    weights: &SpatialWeightSet,
    mu: &DVector<f64>,
    alpha: &DVector<f64>,
    x: &[DMatrix<f64>],
    eps: &[DVector<f64>],
    x_burn: &[DMatrix<f64>],
    alpha_burn: &[f64],
    eps_burn: &[DVector<f64>],
) -> Result<SimulatedPanel> {
    let n = weights.n();
    let t_len = config.t_periods;
    let beta = DVector::from_vec(config.theta.beta.clone());
    let ops = build_operators(&config.spec, &config.theta, weights)?;
    let lu = ops.s.clone().lu();

    let lag_op = |state: &DVector<f64>| -> DVector<f64> {
        let mut rhs = state * config.theta.gamma;
        for (l, &d) in config.theta.delta.iter().enumerate() {
            if d != 0.0 {
                rhs += weights.matrix(l) * state * d;
            }
        }
        rhs
    };

    let step = |state: &DVector<f64>,
                xt: &DMatrix<f64>,
                alpha_t: f64,
                eps_t: &DVector<f64>,
                period: usize|
     -> Result<(DVector<f64>, DVector<f64>)> {
        let eps_star = eps_t.map(|e| (e * e).ln());
        let mut rhs = lag_op(state);
        if !beta.is_empty() {
            rhs += xt * &beta;
        }
        rhs += mu;
        rhs.add_scalar_mut(alpha_t);
        rhs += &eps_star;
        let next = lu
            .solve(&rhs)
            .ok_or_else(|| Error::SingularFilter("solve failed during simulation".into()))?;
        for i in 0..n {
            if !next[i].is_finite() || next[i].abs() > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { unit: i, period, limit: DIVERGENCE_LIMIT });
            }
        }
        Ok((next, eps_star))
    };

    // Warm start from a zero state, oldest pre-period first.
    let mut state = DVector::zeros(n);
    let mut last_burn_eps: Option<DVector<f64>> = None;
    let burn = eps_burn.len();
    for b in (0..burn).rev() {
        let (next, _) = step(&state, &x_burn[b], alpha_burn[b], &eps_burn[b], 0)?;
        state = next;
        last_burn_eps = Some(eps_burn[b].clone());
    }

    let mut ystar = DMatrix::zeros(n, t_len + 1);
    let mut y = DMatrix::zeros(n, t_len + 1);
    let mut h = DMatrix::zeros(n, t_len);

    ystar.set_column(0, &state);
    for i in 0..n {
        // sign(0) counts as positive; without a warm start the initial level
        // is exp(0/2) = 1
        let sgn = match &last_burn_eps {
            Some(e) if e[i] < 0.0 => -1.0,
            _ => 1.0,
        };
        y[(i, 0)] = sgn * (state[i] / 2.0).exp();
    }

    for t in 1..=t_len {
        let (next, eps_star) = step(&state, &x[t - 1], alpha[t - 1], &eps[t - 1], t)?;
        state = next;
        ystar.set_column(t, &state);
        for i in 0..n {
            h[(i, t - 1)] = (state[i] - eps_star[i]).exp();
            let sgn = if eps[t - 1][i] < 0.0 { -1.0 } else { 1.0 };
            y[(i, t)] = sgn * (state[i] / 2.0).exp();
        }
    }

    let panel = Panel::new(y, x.to_vec())?;
    Ok(SimulatedPanel { panel, h, ystar, mu: mu.clone(), alpha: alpha.clone() })
}
