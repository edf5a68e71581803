// Scratch probe: dump the rate-scaling trajectory of one regulation trial.
use uac_core::experiment::{ex1_trial_draw, resolve_ex1, ExperimentConfig};
use uac_core::lyap::AdaptState;
use uac_core::sim::{simulate_uclf, AdaptOptions, SimConfig};

fn main() {
    let trial: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let adaptation = std::env::args().nth(2).map_or(true, |s| s != "off");
    let t_final: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(20.0);
    let setup = resolve_ex1(&ExperimentConfig::preset("ex1").unwrap()).unwrap();
    let (x0, theta) = ex1_trial_draw(&setup, trial);
    println!("trial {trial}: x0 = {:?}, theta* = {:?}", x0.as_slice(), theta.as_slice());
    let sim = SimConfig { log_stride: 1, t_final, ..setup.sim.clone() };
    let log = simulate_uclf(
        &setup.model,
        &setup.uclf,
        &setup.scaling,
        &setup.gains,
        &setup.law,
        &x0,
        &theta,
        &AdaptState::new(setup.theta_hat0.clone(), setup.rho0),
        &sim,
        &AdaptOptions { enabled: adaptation, projection: None },
    );
    match log {
        Ok(log) => {
            println!(
                "diverged = {}, rho clamps = {}, logged = {}",
                log.diverged,
                log.rho_clamp_events,
                log.len()
            );
            // max per-step composite increase
            let mut worst_vc_step = 0.0f64;
            for k in 1..log.len() {
                let dv = log.composite[k] - log.composite[k - 1];
                let tol_scale = (1.0 + log.composite[k]) * sim.dt;
                worst_vc_step = worst_vc_step.max(dv / tol_scale);
            }
            println!("worst per-step composite increase / ((1+Vc) dt) = {worst_vc_step:.3e}");
            let stride = (log.len() / 40).max(1);
            for k in (0..log.len()).step_by(stride) {
                println!(
                    "t={:7.3} |x|={:10.3e} V={:10.3e} Vc={:10.4e} rho={:10.3e} ups={:10.3e} |th|={:9.3e}",
                    log.times[k],
                    log.states[k].norm(),
                    log.certificate[k],
                    log.composite[k],
                    log.rho[k],
                    log.upsilon[k],
                    log.estimates[k].norm(),
                );
            }
            let last = log.len() - 1;
            println!(
                "final: t={:.3} |x|={:.6e} V={:.3e} ups={:.3}",
                log.times[last],
                log.states[last].norm(),
                log.certificate[last],
                log.upsilon[last]
            );
        }
        Err(e) => println!("error: {e}"),
    }
}
