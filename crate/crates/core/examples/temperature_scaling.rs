//! Temperature scaling on an overconfident classifier: logits are multiplied
//! by 5 after generation and the fitted temperature undoes most of it.

use u2c::calibration::{fit_temperature, temperature_nll};
use u2c::synth::{generate, Preset, SynthConfig};

fn main() -> u2c::Result<()> {
    for preset in [Preset::Default, Preset::Overconfident] {
        let data = generate(&SynthConfig::preset(preset))?;
        let val = &data.train_val;
        let tau = fit_temperature(val)?;
        println!(
            "{preset:?}: tau = {tau:.4}  nll(1) = {:.4}  nll(tau) = {:.4}",
            temperature_nll(val.records(), 1.0),
            temperature_nll(val.records(), tau)
        );
    }
    Ok(())
}
