//! Fit each built-in epistemic estimator on the same validation data and see
//! how it splits the in-domain and out-domain test sets into regions A to D.

use u2c::calibration::{fit_model, FitOptions};
use u2c::epistemic::{EstimatorKind, EstimatorOptions};
use u2c::regions::region_masses;
use u2c::synth::{generate, SynthConfig};

fn main() -> u2c::Result<()> {
    let cfg = SynthConfig {
        n_train_val: 4000,
        n_test_in: 4000,
        n_out: 4000,
        ..SynthConfig::default()
    };
    let data = generate(&cfg)?;
    let head = cfg.head()?;
    for kind in [EstimatorKind::MaxLogit, EstimatorKind::Mahalanobis, EstimatorKind::Knn, EstimatorKind::Ash] {
        let options = FitOptions {
            estimator: kind,
            estimator_options: EstimatorOptions {
                head: Some(head.clone()),
                ..EstimatorOptions::default()
            },
            ..FitOptions::default()
        };
        let (model, log) = fit_model(&data.train_val, &options)?;
        let fmt = |m: [f64; 4]| m.map(|v| format!("{:5.1}", 100.0 * v)).join(" ");
        println!(
            "{:<12} theta {:>9.4}{}\n  test-in    A B C D = {}\n  out-domain A B C D = {}",
            kind.as_str(),
            log.theta,
            if log.threshold_degenerate { " (tied scores at the threshold)" } else { "" },
            fmt(region_masses(&model, &data.test_in)?.masses),
            fmt(region_masses(&model, &data.out_domain)?.masses)
        );
    }
    Ok(())
}
