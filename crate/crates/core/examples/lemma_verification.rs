//! Build the full region report, check every identity, then show that the
//! checks catch a predictor whose U2C output has been tampered with.

use u2c::calibration::{fit_model, FitOptions};
use u2c::predict::SwappedU2c;
use u2c::regions::{format_quadrants, region_report, verify_lemma1};
use u2c::synth::{generate, SynthConfig};

fn main() -> u2c::Result<()> {
    let data = generate(&SynthConfig::default())?;
    let (model, _) = fit_model(&data.train_val, &FitOptions::default())?;
    let report = region_report(&model, &data.test_in, &data.out_domain)?;
    print!("{}", format_quadrants(&report));
    println!(
        "error identity residuals: in {:e}, out {:e}",
        report.lemma1_residual_in, report.lemma1_residual_out
    );
    for e in &report.ece.entries {
        println!(
            "  {:<10} {:<4} {}  n = {:5}  closed form {:?}  re-derived {:?}",
            e.domain, e.method.to_string(), e.region, e.count, e.closed_form, e.rederived
        );
    }
    report.check()?;
    println!("all identities hold");

    match verify_lemma1(&SwappedU2c(&model), &data.test_in, &data.out_domain) {
        Ok(_) => println!("negative control unexpectedly passed"),
        Err(e) => println!("negative control rejected: {e}"),
    }
    Ok(())
}
