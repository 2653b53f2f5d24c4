//! An uncertainty score that is trustworthy on validation data but flipped on
//! a fifth of the test records. Flipped confident inputs land in region C,
//! where RC abstains with certainty and U2C keeps predicting.

use u2c::calibration::{fit_model, FitOptions};
use u2c::predict::Region;
use u2c::regions::region_report;
use u2c::synth::{generate, Preset, SynthConfig};

fn main() -> u2c::Result<()> {
    let data = generate(&SynthConfig::preset(Preset::Misspecified))?;
    let (model, _) = fit_model(&data.train_val, &FitOptions::default())?;
    let r = region_report(&model, &data.test_in, &data.out_domain)?;
    for (name, masses) in [("test-in", &r.masses_in), ("out-domain", &r.masses_out)] {
        println!(
            "{name:<10} P(B) = {:.4}  P(C) = {:.4}  (C holds {} records)",
            masses.mass(Region::B),
            masses.mass(Region::C),
            masses.counts[Region::C.index()]
        );
    }
    let l1 = &r.lemma1;
    println!(
        "out-domain: err(RC) - err(U2C) = {:+.4}, P(B) - P(C) = {:+.4}",
        l1.err_out_rc - l1.err_out_u2c,
        l1.masses_out.mass(Region::B) - l1.masses_out.mass(Region::C)
    );
    for (name, s) in [("test-in", &r.lemma2.in_domain), ("out-domain", &r.lemma2.out_domain)] {
        println!("{name:<10} nll RC = {}  nll U2C = {:.4}", s.rc_metrics.value(), s.u2c_metrics.value());
    }
    Ok(())
}
