// Scratch probe: run the static-reference arm directly.
use uac_core::experiment::{ex2_run_arm, resolve_ex2, ExperimentConfig};
use uac_core::sim::ReferenceMode;

fn main() {
    let setup = resolve_ex2(&ExperimentConfig::preset("ex2").unwrap()).unwrap();
    match ex2_run_arm(&setup, ReferenceMode::Static, true) {
        Ok(log) => {
            let max_x1 = log.states.iter().map(|x| x[0].abs()).fold(0.0f64, f64::max);
            let max_th2 = log.estimates.iter().map(|t| t[1].abs()).fold(0.0f64, f64::max);
            println!(
                "static arm ok: steps={}, diverged={}, max |x1| = {max_x1:.3}, max |th2| = {max_th2:.3}",
                log.len(),
                log.diverged
            );
        }
        Err(e) => println!("static arm error: {e}"),
    }
}
