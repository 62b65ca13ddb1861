//! Monte Carlo experiments: simulate-estimate replications under the three
//! preset designs (or custom inputs), aggregate bias and mean absolute
//! error, and render bias/MAE tables.
//!
//! Determinism: each replication derives its own seed from the master seed
//! and replication index through a 64-bit mix, and aggregation folds results
//! in replication order, so outputs are bit-identical across runs and
//! worker counts.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{mix_seed, simulate, DgpConfig, ErrorDist, DEFAULT_BURN_IN};
use crate::error::{Error, Result};
use crate::estimators::{fit_stage, FitOptions, FitStage};
use crate::model::{ModelSpec, Theta};
use crate::moments::GmmData;
use crate::weights::{build_queen_contiguity, build_second_order_contiguity, SpatialWeightSet};

/// Replication failure share beyond which a result is marked unreliable.
pub const FAILURE_TOLERANCE: f64 = 0.05;

/// The preset experiment designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    /// First-order model, weakly persistent, two-way fixed effects.
    M1,
    /// First-order model, strongly persistent, no time effects.
    M2,
    /// Second-order model with weak temporal and spatiotemporal effects.
    M3,
}

impl Design {
    pub fn theta0(&self) -> Theta {
        match self {
            Design::M1 => Theta::new(vec![0.2], 0.2, vec![-0.2], vec![0.5, 1.0]),
            Design::M2 => Theta::new(vec![0.2], 0.8, vec![-0.2], vec![0.5, 1.0]),
            Design::M3 => Theta::new(vec![0.6, 0.2], 0.1, vec![0.01, 0.01], vec![0.5, 1.0]),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Design::M1 => ModelSpec::new(1, 2),
            Design::M2 => ModelSpec::new(1, 2).without_time_effects(),
            Design::M3 => ModelSpec::new(2, 2),
        }
    }

    /// Build the preset lattice weights for a cross-section of size n
    /// (must be a perfect square).
    pub fn weights(&self, n: usize) -> Result<SpatialWeightSet> {
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(Error::InvalidConfig(format!(
                "preset designs need a square lattice; n={n} is not a perfect square"
            )));
        }
        match self {
            Design::M1 | Design::M2 => build_queen_contiguity(side),
            Design::M3 => build_second_order_contiguity(side),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Design::M1 => "m1",
            Design::M2 => "m2",
            Design::M3 => "m3",
        }
    }
}

impl std::str::FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Design::M1),
            "m2" => Ok(Design::M2),
            "m3" => Ok(Design::M3),
            other => Err(Error::InvalidConfig(format!(
                "unknown design `{other}`; expected m1|m2|m3"
            ))),
        }
    }
}

/// Configuration of one experiment cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub design: Design,
    pub n: usize,
    pub t_periods: usize,
    pub error_dist: ErrorDist,
    pub replications: usize,
    pub stage: FitStage,
    pub seed: u64,
    #[serde(default)]
    pub burn_in: Option<usize>,
    /// Worker threads; 0 uses the global thread pool.
    #[serde(default)]
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn new(design: Design, n: usize, t_periods: usize, error_dist: ErrorDist, seed: u64) -> Self {
        ExperimentConfig {
            design,
            n,
            t_periods,
            error_dist,
            replications: 200,
            stage: FitStage::BestGmm,
            seed,
            burn_in: None,
            workers: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidConfig("need at least one replication".into()));
        }
        if self.t_periods < 2 {
            return Err(Error::InvalidConfig("need at least two observed periods".into()));
        }
        Ok(())
    }

    pub fn column_label(&self) -> String {
        format!("{} n={} T={}", self.error_dist, self.n, self.t_periods)
    }
}

/// Aggregated experiment outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub design: String,
    pub column_label: String,
    pub stage: FitStage,
    pub labels: Vec<String>,
    pub theta0: Vec<f64>,
    /// Mean estimation error per parameter (empty when nothing succeeded).
    pub bias: Vec<f64>,
    /// Mean absolute estimation error per parameter.
    pub mae: Vec<f64>,
    /// Monte Carlo standard errors of the bias estimates.
    pub bias_se: Vec<f64>,
    /// Monte Carlo standard errors of the MAE estimates.
    pub mae_se: Vec<f64>,
    /// Successful estimates in replication order.
    pub estimates: Vec<Vec<f64>>,
    pub replications: usize,
    pub n_failed: usize,
    /// Failure reasons histogram.
    pub failures: BTreeMap<String, usize>,
    /// True when more than [`FAILURE_TOLERANCE`] of replications failed.
    pub unreliable: bool,
    pub wall_clock_secs: f64,
}

fn failure_kind(err: &Error) -> String {
    match err {
        Error::SingularFilter(_) => "singular_filter",
        Error::Divergence { .. } => "divergence",
        Error::NonConvergence { .. } => "non_convergence",
        Error::UnderIdentified(_) => "under_identified",
        Error::WeightingFailure(_) => "weighting_failure",
        Error::ZeroOutcome { .. } => "zero_outcome",
        _ => "other",
    }
    .to_string()
}

/// Run one experiment cell with the design presets.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let spec = config.design.spec();
    let theta0 = config.design.theta0();
    let weights = config.design.weights(config.n)?;
    run_experiment_with(config, &spec, &theta0, &weights)
}

/// Run one experiment cell with caller-supplied model ingredients (the
/// custom-design path).
pub fn run_experiment_with(
    config: &ExperimentConfig,
    spec: &ModelSpec,
    theta0: &Theta,
    weights: &SpatialWeightSet,
) -> Result<ExperimentResult> {
    config.validate()?;
    theta0.validate(spec)?;
    let started = Instant::now();

    let burn_in = config.burn_in.unwrap_or(DEFAULT_BURN_IN);
    let run_rep = |rep: usize| -> std::result::Result<Vec<f64>, String> {
        let rep_seed = mix_seed(config.seed, rep as u64);
        let mut dgp = DgpConfig::new(*spec, theta0.clone(), config.t_periods, config.error_dist, rep_seed);
        dgp.burn_in = burn_in;
        let outcome = simulate(&dgp, weights).and_then(|sim| {
            let data = GmmData::build(&sim.panel, weights, spec)?;
            fit_stage(&data, weights, config.stage, &FitOptions::default())
        });
        match outcome {
            Ok(fit) => Ok(fit.theta.to_vector().as_slice().to_vec()),
            Err(err) => Err(failure_kind(&err)),
        }
    };

    let outcomes: Vec<std::result::Result<Vec<f64>, String>> = if config.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| (0..config.replications).into_par_iter().map(run_rep).collect())
    } else {
        (0..config.replications).into_par_iter().map(run_rep).collect()
    };

    let truth = theta0.to_vector();
    let dim = truth.len();
    let mut estimates = Vec::new();
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    for outcome in outcomes {
        match outcome {
            Ok(est) => estimates.push(est),
            Err(kind) => *failures.entry(kind).or_insert(0) += 1,
        }
    }
    let n_failed: usize = failures.values().sum();
    if n_failed > 0 {
        log::warn!(
            "{} of {} replications failed: {:?}",
            n_failed,
            config.replications,
            failures
        );
    }

    let (mut bias, mut mae, mut bias_se, mut mae_se) = (vec![], vec![], vec![], vec![]);
    if !estimates.is_empty() {
        let r = estimates.len() as f64;
        for c in 0..dim {
            let errors: Vec<f64> = estimates.iter().map(|e| e[c] - truth[c]).collect();
            let mean = errors.iter().sum::<f64>() / r;
            let abs_mean = errors.iter().map(|v| v.abs()).sum::<f64>() / r;
            let var = errors.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1.0).max(1.0);
            let abs_var = errors
                .iter()
                .map(|v| (v.abs() - abs_mean) * (v.abs() - abs_mean))
                .sum::<f64>()
                / (r - 1.0).max(1.0);
            bias.push(mean);
            mae.push(abs_mean);
            bias_se.push((var / r).sqrt());
            mae_se.push((abs_var / r).sqrt());
            debug_assert!(mean.abs() <= abs_mean + 1e-12);
        }
    }

    Ok(ExperimentResult {
        design: config.design.as_str().to_string(),
        column_label: config.column_label(),
        stage: config.stage,
        labels: spec.param_labels(),
        theta0: truth.as_slice().to_vec(),
        bias,
        mae,
        bias_se,
        mae_se,
        estimates,
        replications: config.replications,
        n_failed,
        failures,
        unreliable: (n_failed as f64) > FAILURE_TOLERANCE * config.replications as f64,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Output format for [`emit_table`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

/// Render bias and MAE blocks, parameters as rows and one column per
/// experiment cell.
pub fn emit_table(results: &[&ExperimentResult], format: TableFormat) -> String {
    if results.is_empty() {
        return "no results\n".to_string();
    }
    let labels = &results[0].labels;
    let theta0 = &results[0].theta0;
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("metric,parameter,truth");
            for r in results {
                out.push(',');
                out.push_str(&r.column_label.replace(',', ";"));
            }
            out.push('\n');
            for (metric, field) in [("bias", 0usize), ("mae", 1usize)] {
                for (i, label) in labels.iter().enumerate() {
                    out.push_str(&format!("{metric},{label},{}", theta0[i]));
                    for r in results {
                        let values = if field == 0 { &r.bias } else { &r.mae };
                        if values.is_empty() {
                            out.push_str(",no-data");
                        } else {
                            out.push_str(&format!(",{:.6}", values[i]));
                        }
                    }
                    out.push('\n');
                }
            }
        }
        TableFormat::Text => {
            let name_w = labels.iter().map(|l| l.len()).max().unwrap_or(5).max(9) + 2;
            let col_w = results
                .iter()
                .map(|r| r.column_label.len())
                .max()
                .unwrap_or(10)
                .max(10)
                + 2;
            out.push_str(&format!("{:6} {:<name_w$}", "", "parameter"));
            for r in results {
                out.push_str(&format!("{:>col_w$}", r.column_label));
            }
            out.push('\n');
            for (metric, take_bias) in [("Bias", true), ("MAE", false)] {
                for (i, label) in labels.iter().enumerate() {
                    let tag = if i == labels.len() / 2 { metric } else { "" };
                    out.push_str(&format!("{tag:6} {label:<name_w$}"));
                    for r in results {
                        let values = if take_bias { &r.bias } else { &r.mae };
                        if values.is_empty() {
                            out.push_str(&format!("{:>col_w$}", "no data"));
                        } else {
                            out.push_str(&format!("{:>col_w$.4}", values[i]));
                        }
                    }
                    out.push('\n');
                }
                out.push('\n');
            }
            for r in results {
                if r.n_failed > 0 {
                    out.push_str(&format!(
                        "note: {} failed {}/{} replications{}\n",
                        r.column_label,
                        r.n_failed,
                        r.replications,
                        if r.unreliable { " (UNRELIABLE)" } else { "" }
                    ));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::new(Design::M1, 16, 6, ErrorDist::Gaussian, 42);
        config.replications = 4;
        config.stage = FitStage::TwoSls;
        config.burn_in = Some(30);
        config
    }

    #[test]
    fn bias_never_exceeds_mae() {
        let result = run_experiment(&tiny_config()).unwrap();
        assert_eq!(result.estimates.len(), 4);
        for (b, m) in result.bias.iter().zip(&result.mae) {
            assert!(b.abs() <= m + 1e-12);
        }
    }

    #[test]
    fn workers_do_not_change_results() {
        let mut one = tiny_config();
        one.workers = 1;
        let mut eight = tiny_config();
        eight.workers = 8;
        let a = run_experiment(&one).unwrap();
        let b = run_experiment(&eight).unwrap();
        assert_eq!(a.estimates, b.estimates);
        assert_eq!(a.bias, b.bias);
        assert_eq!(a.mae, b.mae);
    }

    #[test]
    fn single_rep_deterministic_across_worker_counts() {
        let mut cfg = tiny_config();
        cfg.replications = 1;
        cfg.workers = 1;
        let a = run_experiment(&cfg).unwrap();
        cfg.workers = 8;
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.estimates, b.estimates);
    }

    #[test]
    fn failures_counted_and_flagged() {
        // an explosive custom truth makes the simulator diverge
        let spec = ModelSpec::new(1, 0);
        let theta = Theta::new(vec![0.0], 1.6, vec![0.0], vec![]);
        let weights = build_queen_contiguity(4).unwrap();
        let mut config = ExperimentConfig::new(Design::M1, 16, 12, ErrorDist::Gaussian, 7);
        config.replications = 3;
        config.stage = FitStage::TwoSls;
        config.burn_in = Some(400);
        let result = run_experiment_with(&config, &spec, &theta, &weights).unwrap();
        assert_eq!(result.n_failed, 3);
        assert!(result.unreliable);
        assert!(result.failures.contains_key("divergence"));
        assert!(result.bias.is_empty());
        let table = emit_table(&[&result], TableFormat::Text);
        assert!(table.contains("no data"));
        assert!(table.contains("UNRELIABLE"));
    }

    #[test]
    fn table_layout_m1() {
        let result = run_experiment(&tiny_config()).unwrap();
        let text = emit_table(&[&result], TableFormat::Text);
        for label in ["rho", "gamma", "delta", "beta1", "beta2"] {
            assert!(text.contains(label), "missing {label} in table");
        }
        let csv = emit_table(&[&result], TableFormat::Csv);
        assert_eq!(csv.lines().count(), 1 + 10); // header + 5 params x 2 metrics
    }
}
