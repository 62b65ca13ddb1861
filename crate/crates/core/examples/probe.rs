// temporary probe of Monte Carlo magnitudes
use starch_core::dgp::ErrorDist;
use starch_core::estimators::FitStage;
use starch_core::montecarlo::{run_experiment, Design, ExperimentConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let reps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(50);
    let mut config = ExperimentConfig::new(Design::M1, 64, 20, ErrorDist::Gaussian, 20260810);
    config.replications = reps;
    config.stage = FitStage::BestGmm;
    let start = std::time::Instant::now();
    let r = run_experiment(&config).unwrap();
    println!("elapsed {:.1}s, failed {}/{}", start.elapsed().as_secs_f64(), r.n_failed, r.replications);
    for (i, label) in r.labels.iter().enumerate() {
        println!("{label:>8}: bias {:+.4} (se {:.4})  mae {:.4} (se {:.4})",
            r.bias[i], r.bias_se[i], r.mae[i], r.mae_se[i]);
    }
}
