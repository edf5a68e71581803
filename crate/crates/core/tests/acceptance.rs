//! Acceptance suite: one test per release criterion, each printing a
//! pass line with the measured figures. Tolerances are pinned here, not
//! configurable.
//!
//! Run with `cargo test -p uac-core --test acceptance -- --nocapture`.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use uac_core::control::min_norm_ccm;
use uac_core::experiment::{
    ex1_run_trial, ex1_trial_draw, ex2_metric_artifact, ex2_run_arm, resolve_ex1, resolve_ex2,
    run_monte_carlo_ex1, run_tracking_ex2, time_averaged_energy, validate_certificate,
    Ex1Setup, Ex2Setup, ExperimentConfig, ValidateConfig, EX2_WINDOW_START,
};
use uac_core::fd;
use uac_core::geom::{
    check_c2, energy_along, energy_param_grad, solve_geodesic, GeodesicOptions, MetricArtifact,
    Monomial, PolynomialMetric, C2_DEFAULT_TOL,
};
use uac_core::lyap::{
    adapt_rhs_uclf, backstepping_uclf, uclf_value_and_grads, AdaptGains, AdaptState,
    BacksteppingVariant, ScalingFunction,
};
use uac_core::model::{
    closed_loop_jacobian, contracting_model, eval_dynamics, strict_feedback_model,
};
use uac_core::sim::{
    simulate_uccm, simulate_uclf, AdaptOptions, ReferenceMode, SimConfig, UccmSimOptions,
};

fn ex1_setup() -> Ex1Setup {
    resolve_ex1(&ExperimentConfig::preset("ex1").unwrap()).unwrap()
}

fn ex2_setup() -> Ex2Setup {
    resolve_ex2(&ExperimentConfig::preset("ex2").unwrap()).unwrap()
}

/// Criterion 1: with the regulation preset constants, every Monte Carlo
/// trial reaches |x(20)| < 0.05, within the runtime budget.
#[test]
fn criterion_01_monte_carlo_all_converge() {
    let setup = ex1_setup();
    let outcome = run_monte_carlo_ex1(&setup, false, None).unwrap();
    let s = &outcome.adaptive;
    assert_eq!(s.trials, 100);
    assert_eq!(
        s.converged, 100,
        "only {}/{} trials converged (worst final norm {:.3e})",
        s.converged, s.trials, s.final_norm_percentiles.max
    );
    assert!(
        s.wall_seconds < 60.0,
        "batch took {:.1}s, budget is 60s",
        s.wall_seconds
    );
    println!(
        "[criterion 1] PASS: 100/100 trials converged, worst final |x| = {:.3e}, {:.1}s",
        s.final_norm_percentiles.max, s.wall_seconds
    );
}

/// Criterion 2: disabling adaptation on the identical draws loses at
/// least one trial, and strictly more than the adaptive arm.
#[test]
fn criterion_02_baseline_arm_fails_more() {
    let setup = ex1_setup();
    let outcome = run_monte_carlo_ex1(&setup, true, None).unwrap();
    let adaptive = &outcome.adaptive;
    let baseline = outcome.baseline.as_ref().expect("baseline arm requested");
    assert!(baseline.diverged >= 1, "baseline arm never failed");
    assert!(
        baseline.diverged > adaptive.diverged,
        "baseline failures ({}) not strictly above adaptive failures ({})",
        baseline.diverged,
        adaptive.diverged
    );
    println!(
        "[criterion 2] PASS: baseline {}/{} failed vs adaptive {}/{}",
        baseline.diverged, baseline.trials, adaptive.diverged, adaptive.trials
    );
}

/// Criterion 3: with the estimate pinned at the true parameters the
/// certificate tracks the exponential envelope V(0) e^{-4t} within 2%.
#[test]
fn criterion_03_known_model_exponential_rate() {
    let setup = ex1_setup();
    let mut worst_excess = f64::NEG_INFINITY;
    for trial in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        rng.set_stream(trial + 1);
        let x0 = DVector::from_fn(3, |_, _| rng.random_range(-2.0..=2.0));
        let theta = DVector::from_fn(2, |i, _| {
            let (lo, hi) = [(-0.2, 0.4), (0.2, 0.6)][i];
            rng.random_range(lo..=hi)
        });
        let sim = SimConfig { log_stride: 1, ..setup.sim.clone() };
        let log = simulate_uclf(
            &setup.model,
            &setup.uclf,
            &setup.scaling,
            &setup.gains,
            &setup.law,
            &x0,
            &theta,
            &AdaptState::new(theta.clone(), 0.0),
            &sim,
            &AdaptOptions::frozen(),
        )
        .unwrap();
        assert!(!log.diverged);
        let v0 = log.certificate[0];
        for (t, v) in log.times.iter().zip(&log.certificate) {
            let envelope = v0 * (-4.0 * t).exp() * 1.02;
            assert!(
                *v <= envelope + 1e-300,
                "trial {trial}: V({t}) = {v:.6e} above envelope {envelope:.6e}"
            );
            if envelope > 0.0 {
                worst_excess = worst_excess.max(v / envelope - 1.0);
            }
        }
    }
    println!(
        "[criterion 3] PASS: V(t) within the 1.02 envelope on 10 trials (worst margin {:.2e})",
        worst_excess
    );
}

/// Criterion 4: per logged step of every regulation trial the composite
/// certificate increases by at most 1e-6 (1 + V_c) dt.
#[test]
fn criterion_04_composite_descent() {
    let setup = ex1_setup();
    let dt = setup.sim.dt;
    let mut worst: f64 = f64::NEG_INFINITY;
    for trial in 0..setup.trials {
        let log = ex1_run_trial(&setup, trial, true, 1).unwrap();
        assert!(!log.diverged, "trial {trial} diverged");
        for k in 1..log.len() {
            let increase = log.composite[k] - log.composite[k - 1];
            let allowance = 1e-6 * (1.0 + log.composite[k]) * dt;
            assert!(
                increase <= allowance,
                "trial {trial} step {k}: composite rose by {increase:.3e} (allowance {allowance:.3e})"
            );
            worst = worst.max(increase / ((1.0 + log.composite[k]) * dt));
        }
    }
    println!(
        "[criterion 4] PASS: worst composite step increase ratio {:.3e} (allowance 1e-6)",
        worst
    );
}

/// Criterion 5: the rate-scaling construction cancels the estimate-drift
/// term identically, for both certificate routes.
#[test]
fn criterion_05_cancellation_identities() {
    let model = strict_feedback_model();
    let uclf = backstepping_uclf(BacksteppingVariant::Derived);
    let scaling = ScalingFunction::standard();
    let gains = AdaptGains::diagonal(&[0.1, 0.1], 100.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_v: f64 = 0.0;
    for _ in 0..1000 {
        let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let state = AdaptState::new(
            DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
            rng.random_range(-3.0..3.0),
        );
        let rates = adapt_rhs_uclf(&model, &uclf, &scaling, &gains, &x, &state, 0.0).unwrap();
        let eval = uclf_value_and_grads(&uclf, &x, &state.theta_hat).unwrap();
        let (ups, ups_rho) = scaling.eval(state.rho);
        let resid = ups_rho * rates.rho_dot * (eval.v + gains.eta())
            + ups * eval.dv_dtheta.dot(&rates.theta_hat_dot);
        let scale = (ups * eval.dv_dtheta.dot(&rates.theta_hat_dot)).abs().max(1.0);
        assert!(resid.abs() / scale < 1e-10, "lyapunov cancellation residual {resid:.3e}");
        worst_v = worst_v.max(resid.abs() / scale);
    }

    let setup = ex2_setup();
    let e_gains = AdaptGains::diagonal(&[5.0; 4], 0.1).unwrap();
    let mut worst_e: f64 = 0.0;
    for _ in 0..1000 {
        let x_d = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let state = AdaptState::new(
            DVector::from_fn(4, |i, _| {
                rng.random_range(setup.theta_box.lower[i]..setup.theta_box.upper[i])
            }),
            rng.random_range(-3.0..3.0),
        );
        let geo = solve_geodesic(
            &setup.metric,
            &state.theta_hat,
            &x_d,
            &x,
            0.0,
            None,
            &setup.geodesic,
        )
        .unwrap();
        let rates = uac_core::geom::adapt_rhs_uccm(
            &setup.model,
            &setup.metric,
            &scaling,
            &e_gains,
            &x,
            &x_d,
            &state,
            &geo,
            0.0,
        )
        .unwrap();
        let de = energy_param_grad(&setup.metric, &geo, &state.theta_hat, 0.0).unwrap();
        let (ups, ups_rho) = scaling.eval(state.rho);
        let resid = ups_rho * rates.rho_dot * (geo.energy() + e_gains.eta())
            + ups * de.dot(&rates.theta_hat_dot);
        let scale = (ups * de.dot(&rates.theta_hat_dot)).abs().max(1.0);
        assert!(resid.abs() / scale < 1e-10, "energy cancellation residual {resid:.3e}");
        worst_e = worst_e.max(resid.abs() / scale);
    }
    println!(
        "[criterion 5] PASS: drift cancellation residuals {:.2e} (certificate), {:.2e} (energy) over 1000 states each",
        worst_v, worst_e
    );
}

/// Criterion 6: with the true parameters and the shipped metric, the
/// finite-difference energy rate satisfies the contraction bound.
#[test]
fn criterion_06_energy_decrement_along_trajectories() {
    let setup = ex2_setup();
    let lambda = setup.metric.lambda();
    let dt = 2e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut worst: f64 = f64::NEG_INFINITY;
    for trial in 0..5 {
        let x0 = DVector::from_fn(3, |i, _| {
            if i == 2 {
                rng.random_range(-1.0..1.0) + 1.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let sim = SimConfig { dt, t_final: 1.2, log_stride: 1, ..setup.sim.clone() };
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
        assert!(!log.diverged);
        for k in 1..log.len() {
            let e_prev = log.certificate[k - 1];
            let fd_rate = (log.certificate[k] - e_prev) / dt;
            let allowance = 1e-4 * (1.0 + e_prev);
            assert!(
                fd_rate <= -2.0 * lambda * e_prev + allowance,
                "trial {trial} t = {:.4}: E_dot = {fd_rate:.5e} vs bound {:.5e}",
                log.times[k],
                -2.0 * lambda * e_prev + allowance
            );
            worst = worst.max((fd_rate + 2.0 * lambda * e_prev) / (1.0 + e_prev));
        }
    }
    println!(
        "[criterion 6] PASS: E_dot <= -2 lambda E + 1e-4 (1+E) on 5 trajectories (worst residual {:.2e})",
        worst
    );
}

/// Criterion 7: the adaptive-reference arm beats the static-reference arm
/// in time-averaged energy, within the runtime budget per arm.
#[test]
fn criterion_07_tracking_comparison() {
    let setup = ex2_setup();
    let t0 = std::time::Instant::now();
    let adaptive = ex2_run_arm(&setup, ReferenceMode::Adaptive, true).unwrap();
    let t_adaptive = t0.elapsed().as_secs_f64();
    let t0 = std::time::Instant::now();
    let static_arm = ex2_run_arm(&setup, ReferenceMode::Static, true).unwrap();
    let t_static = t0.elapsed().as_secs_f64();

    assert!(!adaptive.diverged && !static_arm.diverged);
    assert!(t_adaptive < 120.0, "adaptive arm took {t_adaptive:.1}s");
    assert!(t_static < 120.0, "static arm took {t_static:.1}s");
    let ea = time_averaged_energy(&adaptive, EX2_WINDOW_START);
    let es = time_averaged_energy(&static_arm, EX2_WINDOW_START);
    assert!(
        ea < es,
        "adaptive-reference mean energy {ea:.4e} not below static {es:.4e}"
    );
    println!(
        "[criterion 7] PASS: mean energy over [5,30]s: adaptive {:.4e} < static {:.4e} ({:.1}s / {:.1}s)",
        ea, es, t_adaptive, t_static
    );
}

/// Criterion 8: geodesic solver properties — exact Euclidean recovery,
/// constant metric speed, and energy never above the straight-line
/// initialization.
#[test]
fn criterion_08_geodesic_properties() {
    use uac_core::geom::MetricFamily;
    let mut rng = ChaCha8Rng::seed_from_u64(88);

    // Euclidean recovery
    let euclid = MetricFamily::constant(nalgebra::DMatrix::identity(3, 3), 0, 0.5).unwrap();
    let mut worst_euclid: f64 = 0.0;
    for _ in 0..20 {
        let x_d = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let geo = solve_geodesic(
            &euclid,
            &DVector::zeros(0),
            &x_d,
            &x,
            0.0,
            None,
            &GeodesicOptions::default(),
        )
        .unwrap();
        assert!(geo.converged());
        let err = (geo.energy() - (&x - &x_d).norm_squared()).abs();
        assert!(err < 1e-10, "euclidean energy error {err:.3e}");
        worst_euclid = worst_euclid.max(err);
    }

    // shipped metric: constant speed and monotonicity vs straight line
    let setup = ex2_setup();
    let mut worst_speed_dev: f64 = 0.0;
    for _ in 0..20 {
        let x_d = DVector::from_fn(3, |i, _| {
            rng.random_range(-1.5..1.5) * if i == 2 { 2.0 } else { 1.0 }
        });
        let x = DVector::from_fn(3, |i, _| {
            rng.random_range(-1.5..1.5) * if i == 2 { 2.0 } else { 1.0 }
        });
        let theta = DVector::from_fn(4, |i, _| {
            rng.random_range(setup.theta_box.lower[i]..setup.theta_box.upper[i])
        });
        let geo =
            solve_geodesic(&setup.metric, &theta, &x_d, &x, 0.0, None, &setup.geodesic).unwrap();
        assert!(geo.converged());

        // straight-line comparison through the public energy evaluation
        let straight = {
            let nseg = geo.segments();
            let nodes: Vec<DVector<f64>> = (0..=nseg)
                .map(|k| {
                    let s = k as f64 / nseg as f64;
                    &x_d * (1.0 - s) + &x * s
                })
                .collect();
            nodes
        };
        let e_straight = {
            // re-evaluate the discrete energy along the straight polyline
            let solved_once = solve_geodesic(
                &setup.metric,
                &theta,
                &x_d,
                &x,
                0.0,
                None,
                &GeodesicOptions { max_iters: 0, ..setup.geodesic },
            )
            .unwrap();
            assert_eq!(solved_once.nodes(), straight.as_slice());
            energy_along(&setup.metric, &solved_once, &theta, 0.0).unwrap()
        };
        assert!(
            geo.energy() <= e_straight + 1e-12,
            "solved energy {:.6e} above straight-line energy {:.6e}",
            geo.energy(),
            e_straight
        );

        let mut vals = Vec::new();
        for (node, sp) in geo.nodes().iter().zip(geo.speeds()) {
            let m = setup.metric.metric_at(node, &theta, 0.0).unwrap();
            vals.push(sp.dot(&(m * sp)));
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64)
            .sqrt();
        if mean > 1e-12 {
            let dev = sd / mean;
            assert!(dev < 1e-3, "metric speed deviation {dev:.3e}");
            worst_speed_dev = worst_speed_dev.max(dev);
        }
    }
    println!(
        "[criterion 8] PASS: euclidean error {:.1e}, worst speed deviation {:.1e}, energy never above straight line",
        worst_euclid, worst_speed_dev
    );
}

/// Criterion 9: the certificate validators pass the shipped certificates
/// and reject a constructed violation at the correct worst point.
#[test]
fn criterion_09_certificate_validators() {
    // backstepping family feasible on the preset grid
    let report = validate_certificate(&ValidateConfig::preset("ex1-uclf").unwrap()).unwrap();
    assert!(report.pass, "uclf feasibility failed: {report:?}");
    assert_eq!(report.points_checked, 21 * 21 * 21 * 5 * 5);

    // shipped tracking metric passes, with at least 1e4 grid points
    let report = validate_certificate(&ValidateConfig::preset("ex2-uccm").unwrap()).unwrap();
    assert!(report.pass, "shipped metric failed: {report:?}");
    assert!(report.points_checked >= 10_000);

    // explicit scan of the input-compatibility residual on the same grid
    let art = ex2_metric_artifact();
    let fam = art.family().unwrap();
    let model = contracting_model();
    let mut worst_c2: f64 = 0.0;
    let axis = |lo: f64, hi: f64, c: usize| -> Vec<f64> {
        (0..c).map(|i| lo + (hi - lo) * i as f64 / (c - 1) as f64).collect()
    };
    let mut points = 0usize;
    for &x1 in &axis(-2.0, 2.0, 10) {
        for &x2 in &axis(-2.0, 2.0, 10) {
            for &x3 in &axis(-3.0, 3.0, 10) {
                for corner in 0..16u32 {
                    let theta = DVector::from_fn(4, |i, _| {
                        let (lo, hi) =
                            [(-0.4, 0.5), (-1.0, 0.6), (-0.6, 0.75), (-1.75, 0.4)][i];
                        if corner >> i & 1 == 1 {
                            hi
                        } else {
                            lo
                        }
                    });
                    let x = DVector::from_vec(vec![x1, x2, x3]);
                    let rep = check_c2(&fam, &model, &x, &theta, 0.0, C2_DEFAULT_TOL).unwrap();
                    for r in rep.residuals {
                        worst_c2 = worst_c2.max(r);
                    }
                    points += 1;
                }
            }
        }
    }
    assert!(points >= 10_000);
    assert!(worst_c2 < 1e-8, "worst C2 residual {worst_c2:.3e}");

    // constructed violating metric: constant dual, worst point at the
    // grid corner maximizing |x1 theta2|
    let e = |c: f64| Monomial { exps: vec![0; 7], coeff: c };
    let poly = PolynomialMetric::new(
        3,
        4,
        0,
        vec![((0, 0), vec![e(1.0)]), ((1, 1), vec![e(1.0)]), ((2, 2), vec![e(4.0)])],
    )
    .unwrap();
    let bad = MetricArtifact { poly, lambda: 0.5, bounds: (0.2, 1.1) };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad_metric.txt");
    std::fs::write(&path, bad.to_text()).unwrap();
    let cfg = ValidateConfig {
        metric_file: Some(path.to_string_lossy().into_owned()),
        ..ValidateConfig::preset("ex2-uccm").unwrap()
    };
    let report = validate_certificate(&cfg).unwrap();
    assert!(!report.pass);
    assert_eq!(report.worst_kind, "c1");
    assert_eq!(report.worst_x[0].abs(), 2.0, "worst point {:?}", report.worst_x);
    assert_eq!(report.worst_theta[1], -1.0);

    println!(
        "[criterion 9] PASS: uclf grid feasible, shipped metric valid (worst C2 {:.1e} over {} points), violation localized correctly",
        worst_c2, points
    );
}

/// Criterion 10: every analytic derivative matches central finite
/// differences to 1e-4 relative over 100 random probes.
#[test]
fn criterion_10_gradient_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst: f64 = 0.0;
    let mut check = |label: &str, v: f64| {
        assert!(v < 1e-4, "{label}: relative error {v:.3e}");
        worst = worst.max(v);
    };

    // model Jacobians
    for model in [strict_feedback_model(), contracting_model()] {
        for _ in 0..100 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let theta = DVector::from_fn(model.param_dim(), |_, _| rng.random_range(-1.0..1.0));
            let u = DVector::from_fn(1, |_, _| rng.random_range(-2.0..2.0));
            let a = closed_loop_jacobian(&model, &x, &theta, &u, 0.0).unwrap();
            let a_fd =
                fd::jacobian(|xx| eval_dynamics(&model, xx, &theta, &u, 0.0).unwrap(), &x, 1e-5);
            check("closed-loop jacobian", fd::rel_err(&a, &a_fd, 1e-2));
        }
    }

    // certificate gradients, both transform variants
    for variant in [BacksteppingVariant::Verbatim, BacksteppingVariant::Derived] {
        let uclf = backstepping_uclf(variant);
        for _ in 0..100 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let th = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let eval = uclf_value_and_grads(&uclf, &x, &th).unwrap();
            let gx = fd::gradient(
                |xx| uclf_value_and_grads(&uclf, xx, &th).unwrap().v,
                &x,
                1e-5,
            );
            check("dV/dx", fd::rel_err_vec(&eval.dv_dx, &gx, 1e-2));
            let gt = fd::gradient(
                |tt| uclf_value_and_grads(&uclf, &x, tt).unwrap().v,
                &th,
                1e-5,
            );
            check("dV/dtheta", fd::rel_err_vec(&eval.dv_dtheta, &gt, 1e-2));
        }
    }

    // metric partials of the shipped artifact
    let setup = ex2_setup();
    for _ in 0..100 {
        let x = DVector::from_fn(3, |_, _| rng.random_range(-1.8..1.8));
        let th = DVector::from_fn(4, |i, _| {
            rng.random_range(setup.theta_box.lower[i]..setup.theta_box.upper[i])
        });
        for k in 0..3 {
            let a = setup.metric.d_metric_dx(k, &x, &th, 0.0).unwrap();
            let b = fd::matrix_partial(
                |xx| setup.metric.metric_at(xx, &th, 0.0).unwrap(),
                &x,
                k,
                1e-5,
            );
            check("dM/dx", fd::rel_err(&a, &b, 1e-2));
        }
        for i in 0..4 {
            let a = setup.metric.d_metric_dtheta(i, &x, &th, 0.0).unwrap();
            let b = fd::matrix_partial(
                |tt| setup.metric.metric_at(&x, tt, 0.0).unwrap(),
                &th,
                i,
                1e-5,
            );
            check("dM/dtheta", fd::rel_err(&a, &b, 1e-2));
        }
    }

    // energy parameter gradient vs full re-solve differences; one random
    // parameter index per probe
    let opts = GeodesicOptions { grad_tol: 1e-11, max_iters: 500, ..setup.geodesic };
    for _ in 0..100 {
        let x_d = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        if (&x - &x_d).norm() < 0.1 {
            continue;
        }
        let th = DVector::from_fn(4, |i, _| {
            rng.random_range(setup.theta_box.lower[i]..setup.theta_box.upper[i])
        });
        let geo = solve_geodesic(&setup.metric, &th, &x_d, &x, 0.0, None, &opts).unwrap();
        let grad = energy_param_grad(&setup.metric, &geo, &th, 0.0).unwrap();
        let i = rng.random_range(0..4usize);
        let h = 1e-5;
        let mut tp = th.clone();
        let mut tm = th.clone();
        tp[i] += h;
        tm[i] -= h;
        let ep = solve_geodesic(&setup.metric, &tp, &x_d, &x, 0.0, Some(&geo), &opts)
            .unwrap()
            .energy();
        let em = solve_geodesic(&setup.metric, &tm, &x_d, &x, 0.0, Some(&geo), &opts)
            .unwrap()
            .energy();
        let fd_grad = (ep - em) / (2.0 * h);
        let scale = grad[i].abs().max(fd_grad.abs()).max(1e-2);
        check("dE/dtheta", (grad[i] - fd_grad).abs() / scale);
    }

    println!("[criterion 10] PASS: all analytic derivatives within 1e-4 of finite differences (worst {worst:.2e})");
}

/// Criterion 11: with projection on, every logged estimate stays inside
/// the parameter box.
#[test]
fn criterion_11_projection_keeps_estimates_in_box() {
    let setup = ex2_setup();
    assert!(setup.projection);
    let log = ex2_run_arm(&setup, ReferenceMode::Adaptive, true).unwrap();
    for (k, th) in log.estimates.iter().enumerate() {
        assert!(
            setup.theta_box.contains(th, 1e-9),
            "estimate left the box at step {k}: {:?}",
            th.as_slice()
        );
    }
    println!(
        "[criterion 11] PASS: all {} logged estimates inside the parameter box (box clamps absorbed {} overshoots)",
        log.estimates.len(),
        log.box_clamp_events
    );
}

/// Criterion 12: identical config and seed produce byte-identical CSVs.
#[test]
fn criterion_12_byte_identical_outputs() {
    let mut config = ExperimentConfig::preset("ex1").unwrap();
    config.trials = Some(3);
    let setup = resolve_ex1(&config).unwrap();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_monte_carlo_ex1(&setup, true, Some(dir_a.path())).unwrap();
    run_monte_carlo_ex1(&setup, true, Some(dir_b.path())).unwrap();

    let mut compared = 0;
    for entry in walk_csvs(dir_a.path()) {
        let rel = entry.strip_prefix(dir_a.path()).unwrap();
        let a = std::fs::read(&entry).unwrap();
        let b = std::fs::read(dir_b.path().join(rel)).unwrap();
        assert_eq!(a, b, "output differs: {}", rel.display());
        compared += 1;
    }
    assert!(compared >= 8, "expected trial and plot CSVs, found {compared}");

    // tracking outputs too
    let ex2 = ex2_setup();
    let dir_c = tempfile::tempdir().unwrap();
    let dir_d = tempfile::tempdir().unwrap();
    run_tracking_ex2(&ex2, false, Some(dir_c.path())).unwrap();
    run_tracking_ex2(&ex2, false, Some(dir_d.path())).unwrap();
    for entry in walk_csvs(dir_c.path()) {
        let rel = entry.strip_prefix(dir_c.path()).unwrap();
        let a = std::fs::read(&entry).unwrap();
        let b = std::fs::read(dir_d.path().join(rel)).unwrap();
        assert_eq!(a, b, "output differs: {}", rel.display());
        compared += 1;
    }
    println!("[criterion 12] PASS: {compared} CSV files byte-identical across reruns");
}

fn walk_csvs(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

/// Cross-check used by several criteria: the trial draw helper is pinned
/// to the preset seed streams.
#[test]
fn trial_draws_are_reproducible() {
    let setup = ex1_setup();
    let (x0, th) = ex1_trial_draw(&setup, 0);
    let (x1, th1) = ex1_trial_draw(&setup, 0);
    assert_eq!(x0, x1);
    assert_eq!(th, th1);
    // inputs to min_norm_ccm and the rest of the pipeline stay finite on a draw
    let ex2 = ex2_setup();
    let geo = solve_geodesic(
        &ex2.metric,
        &ex2.theta_hat0,
        &DVector::zeros(3),
        &ex2.x0,
        0.0,
        None,
        &ex2.geodesic,
    )
    .unwrap();
    let out = min_norm_ccm(
        &ex2.model,
        &ex2.metric,
        &geo,
        &ex2.x0,
        &DVector::zeros(3),
        &DVector::zeros(1),
        &ex2.theta_hat0,
        0.0,
    )
    .unwrap();
    assert!(out.u[0].is_finite());
}
