//! Generate the synthetic benchmark, fit a model on the validation split and
//! compare reject-or-classify with the unified predictor on both test splits.

use u2c::calibration::{fit_model, load_model, save_model, FitOptions};
use u2c::metrics::DEFAULT_BINS;
use u2c::regions::evaluate_dataset;
use u2c::synth::{generate, SynthConfig};

fn main() -> u2c::Result<()> {
    let data = generate(&SynthConfig::default())?;
    let (model, log) = fit_model(&data.train_val, &FitOptions::default())?;
    println!("tau = {:.3}, theta = {:.3}, relabeled {} of {}", log.tau, log.theta, log.relabeled, log.m);

    let dir = std::env::temp_dir().join("u2c-quickstart");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("model.json");
    save_model(&model, &path)?;
    let model = load_model(&path)?;

    println!("{:<12} {:>8} {:>8} {:>8} {:>8}", "split", "err RC", "err U2C", "ece RC", "ece U2C");
    for d in [&data.test_in, &data.out_domain] {
        let e = evaluate_dataset(&model, d, DEFAULT_BINS)?;
        println!(
            "{:<12} {:>7.1}% {:>7.1}% {:>7.1}% {:>7.1}%",
            d.split().to_string(),
            100.0 * e.rc.metrics.err,
            100.0 * e.u2c.metrics.err,
            100.0 * e.rc.metrics.ece,
            100.0 * e.u2c.metrics.ece
        );
    }
    Ok(())
}
