//! Bring your own logits: write CSV dumps with a precomputed `u` column,
//! load them back and run the pipeline with the passthrough estimator.

use u2c::calibration::{fit_model, FitOptions};
use u2c::data::{load_dataset, save_dataset, Dataset, Record, Split};
use u2c::epistemic::EstimatorKind;
use u2c::metrics::DEFAULT_BINS;
use u2c::regions::evaluate_dataset;
use u2c::synth::{generate, SynthConfig};

/// Stand-in for an external model: strip features and attach an energy score.
fn dump(d: &Dataset) -> u2c::Result<Dataset> {
    let records = d
        .records()
        .iter()
        .map(|r| {
            let m = r.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let energy = m + r.logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            Record::new(r.id.clone(), r.label, r.logits.clone()).with_u(-energy)
        })
        .collect();
    Dataset::new(d.c(), d.split(), records)
}

fn main() -> u2c::Result<()> {
    let data = generate(&SynthConfig::default())?;
    let dir = std::env::temp_dir().join("u2c-logit-dump");
    std::fs::create_dir_all(&dir).expect("temp dir");
    for d in [&data.train_val, &data.test_in, &data.out_domain] {
        save_dataset(&dump(d)?, dir.join(format!("{}.csv", d.split())))?;
    }

    let val = load_dataset(dir.join("train-val.csv"), Split::TrainVal)?;
    let options = FitOptions {
        estimator: EstimatorKind::Passthrough,
        ..FitOptions::default()
    };
    let (model, log) = fit_model(&val, &options)?;
    println!("passthrough fit: theta = {:.4}, tau_u loss = {:.4}", log.theta, log.final_loss);
    for split in [Split::TestIn, Split::OutDomain] {
        let d = load_dataset(dir.join(format!("{split}.csv")), split)?;
        let e = evaluate_dataset(&model, &d, DEFAULT_BINS)?;
        println!(
            "{split}: err RC {:.3} / U2C {:.3}, nll U2C {:.3}",
            e.rc.metrics.err, e.u2c.metrics.err, e.u2c.metrics.nll
        );
    }
    Ok(())
}
