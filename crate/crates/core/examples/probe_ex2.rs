// Scratch probe: energy decrement and tracking quality for the tracking preset.
use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use uac_core::experiment::{ex2_run_arm, resolve_ex2, ExperimentConfig};
use uac_core::lyap::AdaptState;
use uac_core::sim::{simulate_uccm, AdaptOptions, ReferenceMode, SimConfig, UccmSimOptions};

fn main() {
    let dt: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.001);
    let setup = resolve_ex2(&ExperimentConfig::preset("ex2").unwrap()).unwrap();
    let lambda = 0.5;

    // criterion-6 style check: true parameters, adaptation frozen,
    // finite-difference energy rate vs the contraction envelope
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for trial in 0..5 {
        let x0 = DVector::from_fn(3, |i, _| {
            if i == 2 { rng.random_range(-1.0..1.0) + 1.0 } else { rng.random_range(-1.0..1.0) }
        });
        let sim = SimConfig { dt, t_final: 3.0, log_stride: 1, ..setup.sim.clone() };
        let log = simulate_uccm(
            &setup.model,
            &setup.metric,
            &setup.scaling,
            &setup.gains,
            &x0,
            &setup.theta_true,
            &AdaptState::new(setup.theta_true.clone(), 0.0),
            &sim,
            &AdaptOptions::frozen(),
            &UccmSimOptions { geodesic: setup.geodesic, ..Default::default() },
        )
        .unwrap();
        let mut worst = (f64::NEG_INFINITY, 0.0);
        let mut worst_mid = f64::NEG_INFINITY;
        let mut worst_env = f64::NEG_INFINITY;
        let e0 = log.certificate[0];
        for k in 1..log.len() {
            let e_prev = log.certificate[k - 1];
            let e = log.certificate[k];
            let fd = (e - e_prev) / dt;
            let resid = (fd + 2.0 * lambda * e_prev) / (1.0 + e_prev);
            if resid > worst.0 {
                worst = (resid, log.times[k]);
            }
            let resid_mid = (fd + lambda * (e_prev + e)) / (1.0 + e_prev);
            worst_mid = worst_mid.max(resid_mid);
            let env = e / (e0 * (-2.0 * lambda * log.times[k]).exp()) - 1.0;
            worst_env = worst_env.max(env);
        }
        println!(
            "trial {trial}: E0 = {:.3e}, worst resid = {:+.4e} at t = {:.4}, midpoint resid = {:+.4e}, envelope excess = {:+.3e}, geo failures = {}",
            e0, worst.0, worst.1, worst_mid, worst_env, log.geodesic_failures
        );
    }

    // tracking error of the adaptive arm over the last 10 s
    let log = ex2_run_arm(&setup, ReferenceMode::Adaptive, true).unwrap();
    let mut worst_track = 0.0f64;
    for k in 0..log.len() {
        if log.times[k] >= setup.sim.t_final - 10.0 {
            let e1 = (log.states[k][0] - log.times[k].sin()).abs();
            worst_track = worst_track.max(e1);
        }
    }
    println!("adaptive arm: max |x1 - sin t| over the last 10 s = {worst_track:.4e}");
    println!(
        "adaptive arm: clamps rho={}, box={}, geo failures={}",
        log.rho_clamp_events, log.box_clamp_events, log.geodesic_failures
    );
}
