//! The two predictors side by side on hand-made records, one per region.

use u2c::calibration::{CalibratedModel, EpistemicCalibrator};
use u2c::epistemic::EpistemicEstimator;
use u2c::predict::{assign_region, ExtendedPredictor};
use u2c::Record;

fn main() -> u2c::Result<()> {
    // u is supplied per record; τ_u maps it linearly to the abstention logit.
    let model = CalibratedModel {
        c: 3,
        tau: 1.0,
        theta: 0.0,
        alpha: 0.95,
        tau_u: EpistemicCalibrator::linear(1.0, 1.0, 0.0, 1.0),
        estimator: EpistemicEstimator::Passthrough,
    };
    let records = [
        Record::new("confident, familiar", 1, vec![4.0, 0.0, 0.0]).with_u(-1.0),
        Record::new("ambiguous, familiar", 1, vec![0.3, 0.2, 0.0]).with_u(-0.5),
        Record::new("confident, unfamiliar", 1, vec![5.0, 0.0, 0.0]).with_u(0.5),
        Record::new("ambiguous, unfamiliar", 4, vec![0.3, 0.2, 0.0]).with_u(2.0),
    ];
    for r in &records {
        let rc = model.rc(r)?;
        let u2c = model.u2c(r)?;
        println!("{} (region {})", r.id, assign_region(&model, r)?);
        println!("  RC  -> class {} p = {:?}", rc.predicted, round(&rc.probs));
        println!("  U2C -> class {} p = {:?}", u2c.predicted, round(&u2c.probs));
    }
    Ok(())
}

fn round(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| (v * 1000.0).round() / 1000.0).collect()
}
