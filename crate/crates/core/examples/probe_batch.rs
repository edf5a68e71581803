// Scratch probe: batch statistics for the regulation preset.
use uac_core::experiment::{ex1_run_trial, resolve_ex1, ExperimentConfig};

fn main() {
    let trials: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let adaptation = std::env::args().nth(2).map_or(true, |s| s != "off");
    let project = std::env::args().nth(3).map_or(false, |s| s == "project");
    let mut setup = resolve_ex1(&ExperimentConfig::preset("ex1").unwrap()).unwrap();
    setup.projection = project;
    let seed: u64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    setup.seed = seed;
    let mut converged = 0;
    let mut diverged_hard = 0;
    let mut floor_events = 0;
    let mut worst_vc = (0usize, f64::NEG_INFINITY);
    let mut worst_vc_clean = (0usize, f64::NEG_INFINITY);
    let mut worst: Vec<(usize, f64, bool, usize)> = Vec::new();
    for i in 0..trials {
        let log = ex1_run_trial(&setup, i, adaptation, 1).unwrap();
        let s = log.summary(0.05);
        if s.converged {
            converged += 1;
        }
        if s.diverged {
            diverged_hard += 1;
        }
        if log.rho_clamp_events > 0 {
            floor_events += 1;
        }
        let dt = 0.005;
        let mut trial_worst = f64::NEG_INFINITY;
        for k in 1..log.len() {
            let ratio =
                (log.composite[k] - log.composite[k - 1]) / ((1.0 + log.composite[k]) * dt);
            trial_worst = trial_worst.max(ratio);
        }
        if trial_worst > worst_vc.1 {
            worst_vc = (i, trial_worst);
        }
        if log.rho_clamp_events == 0 && trial_worst > worst_vc_clean.1 {
            worst_vc_clean = (i, trial_worst);
        }
        if !s.converged {
            worst.push((i, s.final_state_norm, s.diverged, log.rho_clamp_events));
        }
    }
    println!(
        "seed={seed} adaptation={}: {}/{} converged, {} blew past the norm guard, {} trials hit the scaling clamp",
        adaptation, converged, trials, diverged_hard, floor_events
    );
    println!(
        "worst dVc/((1+Vc) dt): all trials {:.3e} (trial {}), clamp-free trials {:.3e} (trial {})",
        worst_vc.1, worst_vc.0, worst_vc_clean.1, worst_vc_clean.0
    );
    for (i, norm, div, clamps) in worst.iter().take(10) {
        println!("  trial {i:3}: final |x| = {norm:9.3e} diverged={div} clamp_events={clamps}");
    }
}
