//! err, binned ece and nll for both predictors, with the reliability bins
//! of the U2C predictor on in-domain data.

use u2c::calibration::{fit_model, FitOptions};
use u2c::metrics::compute_metrics;
use u2c::predict::{predict_all, Method};
use u2c::synth::{generate, SynthConfig};

fn main() -> u2c::Result<()> {
    let data = generate(&SynthConfig::default())?;
    let (model, _) = fit_model(&data.train_val, &FitOptions::default())?;
    let labels = data.test_in.labels();
    for method in [Method::Rc, Method::U2c] {
        let preds = predict_all(&model, method, data.test_in.records())?;
        let m = compute_metrics(&preds, &labels, 10)?;
        let nll = if m.nll_infinite {
            format!("inf ({} certain mistakes)", m.nll_zero_events)
        } else {
            format!("{:.4}", m.nll)
        };
        println!("{method}: err {:.4}  ece {:.4}  nll {nll}", m.err, m.ece);
        if method == Method::U2c {
            for b in &m.bins {
                if let (Some(conf), Some(acc)) = (b.mean_confidence, b.accuracy) {
                    println!("  ({:.1}, {:.1}]  n = {:5}  conf {conf:.3}  acc {acc:.3}", b.lower, b.upper, b.count);
                }
            }
        }
    }
    Ok(())
}
