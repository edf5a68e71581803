//! Reproducible experiment presets, batch runners, certificate validators,
//! and file outputs.
//!
//! Two presets are built in:
//!
//! * `ex1` — regulation of the strict-feedback benchmark: a Monte Carlo
//!   batch over uniformly sampled initial states and true parameters, with
//!   an optional fixed-estimate baseline arm on the identical draws.
//! * `ex2` — tracking on the contracting benchmark: one adaptive-reference
//!   arm and one static-reference arm from identical initial conditions,
//!   compared by time-averaged Riemannian energy.
//!
//! A single seed governs all sampling; each trial draws from its own
//! counter-mode stream indexed by trial number, so arms and reruns see
//! byte-identical draws and the emitted CSV files are byte-identical for
//! identical configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::UclfControlLaw;
use crate::error::{Error, Result};
use crate::geom::{
    check_c1, check_c2, ex2_dual_template, fit_metric_coeffs, FitOptions, FitPoint,
    GeodesicOptions, MetricArtifact, MetricFamily,
};
use crate::lyap::{
    backstepping_uclf, uclf_value_and_grads, AdaptGains, AdaptState, BacksteppingVariant,
    ScalingFunction, UclfFamily,
};
use crate::model::{builtin_model, eval_dynamics, ParameterBox, SystemModel};
use crate::sim::{
    simulate_uccm, simulate_uclf, AdaptOptions, Integrator, ReferenceMode, SimConfig,
    TrajectoryLog, TrialSummary, UccmSimOptions,
};

/// The dual-metric artifact shipped for the `ex2` preset, produced by the
/// `fit-metric` subcommand and checked by the sampled validators.
pub fn ex2_metric_artifact() -> MetricArtifact {
    MetricArtifact::from_text(include_str!("../assets/ex2_metric.txt"))
        .expect("embedded metric artifact parses")
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsConfig {
    pub gamma_diag: Vec<f64>,
    pub eta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    #[serde(default)]
    pub rho0: f64,
    #[serde(default = "default_rho_max")]
    pub rho_max: f64,
}

fn default_rho_max() -> f64 {
    ScalingFunction::DEFAULT_RHO_MAX
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub t_final: f64,
    pub integrator: String,
    pub projection: bool,
    pub log_stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Per-coordinate `[lo, hi]` intervals for the initial state.
    pub x0_box: Vec<(f64, f64)>,
    /// Per-parameter `[lo, hi]` intervals for the true parameters (and the
    /// projection box when projection is enabled).
    pub theta_box: Vec<(f64, f64)>,
}

/// Experiment configuration: a preset name plus optional overrides, or a
/// fully explicit description. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<GainsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_hat0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_true: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geodesic_segments: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("config file {}: {e}", path.display())))
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            // Projection onto the sampling box is on by default: the
            // estimate's feedback through the transformed coordinates is
            // cubic, and an estimate excursion beyond the parameter set can
            // escape in finite time once the rate scaling reaches its floor.
            "ex1" => Ok(Self {
                preset: Some("ex1".into()),
                model: Some("ex1-strict-feedback".into()),
                controller: Some("backstepping".into()),
                gains: Some(GainsConfig { gamma_diag: vec![0.1, 0.1], eta: 100.0 }),
                scaling: Some(ScalingConfig { a: 0.9, b: 0.1, c: 5.0, rho0: 0.0, rho_max: 500.0 }),
                sim: Some(SimSection {
                    dt: 0.005,
                    t_final: 20.0,
                    integrator: "rk4".into(),
                    projection: true,
                    log_stride: 10,
                }),
                sampling: Some(SamplingConfig {
                    x0_box: vec![(-2.0, 2.0), (-2.0, 2.0), (-2.0, 2.0)],
                    theta_box: vec![(-0.2, 0.4), (0.2, 0.6)],
                }),
                trials: Some(100),
                seed: Some(1),
                convergence_threshold: Some(0.05),
                ..Default::default()
            }),
            "ex2" => Ok(Self {
                preset: Some("ex2".into()),
                model: Some("ex2-contracting".into()),
                gains: Some(GainsConfig { gamma_diag: vec![5.0; 4], eta: 0.1 }),
                scaling: Some(ScalingConfig { a: 0.9, b: 0.1, c: 5.0, rho0: 0.0, rho_max: 500.0 }),
                sim: Some(SimSection {
                    dt: 0.01,
                    t_final: 30.0,
                    integrator: "rk4".into(),
                    projection: true,
                    log_stride: 1,
                }),
                sampling: Some(SamplingConfig {
                    x0_box: vec![],
                    theta_box: vec![(-0.4, 0.5), (-1.0, 0.6), (-0.6, 0.75), (-1.75, 0.4)],
                }),
                theta_true: Some(vec![-0.3, -0.8, -0.25, -0.75]),
                x0: Some(vec![0.5, -0.5, 0.0]),
                trials: Some(1),
                seed: Some(0),
                convergence_threshold: Some(0.05),
                geodesic_segments: Some(10),
                ..Default::default()
            }),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected 'ex1' or 'ex2')"
            ))),
        }
    }

    /// Fills unset fields from the named preset (if any).
    pub fn with_preset_defaults(mut self) -> Result<Self> {
        let Some(name) = self.preset.clone() else {
            return Ok(self);
        };
        let base = Self::preset(&name)?;
        macro_rules! fill {
            ($($f:ident),*) => { $( if self.$f.is_none() { self.$f = base.$f; } )* };
        }
        fill!(
            model, controller, gains, scaling, sim, sampling, trials, seed, theta_hat0,
            theta_true, x0, metric_file, convergence_threshold, geodesic_segments, workers
        );
        Ok(self)
    }

    fn require<'a, T>(field: &'a Option<T>, name: &str) -> Result<&'a T> {
        field
            .as_ref()
            .ok_or_else(|| Error::config(format!("config is missing '{name}' (set it or use a preset)")))
    }

    fn scaling_fn(&self) -> Result<(ScalingFunction, f64)> {
        let s = Self::require(&self.scaling, "scaling")?;
        Ok((ScalingFunction::new(s.a, s.b, s.c, s.rho_max)?, s.rho0))
    }

    fn gains_fn(&self, expected_p: usize) -> Result<AdaptGains> {
        let g = Self::require(&self.gains, "gains")?;
        if g.gamma_diag.len() != expected_p {
            return Err(Error::config(format!(
                "gains.gamma_diag has {} entries, model has {} parameters",
                g.gamma_diag.len(),
                expected_p
            )));
        }
        AdaptGains::diagonal(&g.gamma_diag, g.eta)
    }

    fn sim_config(&self) -> Result<(SimConfig, bool)> {
        let s = Self::require(&self.sim, "sim")?;
        let cfg = SimConfig {
            dt: s.dt,
            t_final: s.t_final,
            integrator: Integrator::from_name(&s.integrator)?,
            log_stride: s.log_stride,
        };
        cfg.validate()?;
        Ok((cfg, s.projection))
    }

    fn theta_box(&self) -> Result<ParameterBox> {
        let s = Self::require(&self.sampling, "sampling")?;
        ParameterBox::from_intervals(&s.theta_box)
    }
}

// ---------------------------------------------------------------------------
// resolved setups
// ---------------------------------------------------------------------------

pub struct Ex1Setup {
    pub model: SystemModel,
    pub uclf: UclfFamily,
    pub law: UclfControlLaw,
    pub gains: AdaptGains,
    pub scaling: ScalingFunction,
    pub sim: SimConfig,
    pub projection: bool,
    pub x0_box: Vec<(f64, f64)>,
    pub theta_box: ParameterBox,
    pub theta_hat0: DVector<f64>,
    pub rho0: f64,
    pub trials: usize,
    pub seed: u64,
    pub convergence_threshold: f64,
    pub workers: usize,
}

pub struct Ex2Setup {
    pub model: SystemModel,
    pub metric: MetricFamily,
    pub artifact: MetricArtifact,
    pub gains: AdaptGains,
    pub scaling: ScalingFunction,
    pub sim: SimConfig,
    pub projection: bool,
    pub theta_box: ParameterBox,
    pub theta_true: DVector<f64>,
    pub theta_hat0: DVector<f64>,
    pub rho0: f64,
    pub x0: DVector<f64>,
    pub geodesic: GeodesicOptions,
    pub seed: u64,
    pub workers: usize,
}

pub fn resolve_ex1(config: &ExperimentConfig) -> Result<Ex1Setup> {
    let config = config.clone().with_preset_defaults()?;
    let model = builtin_model(ExperimentConfig::require(&config.model, "model")?)?;
    if model.name() != "ex1-strict-feedback" {
        return Err(Error::config(
            "the regulation experiment runs on the 'ex1-strict-feedback' model",
        ));
    }
    let law =
        UclfControlLaw::from_name(ExperimentConfig::require(&config.controller, "controller")?)?;
    let variant = match law {
        UclfControlLaw::Backstepping(v) => v,
        UclfControlLaw::MinNorm => BacksteppingVariant::Derived,
    };
    let (scaling, rho0) = config.scaling_fn()?;
    let gains = config.gains_fn(model.param_dim())?;
    let (sim, projection) = config.sim_config()?;
    let sampling = ExperimentConfig::require(&config.sampling, "sampling")?;
    if sampling.x0_box.len() != model.state_dim() {
        return Err(Error::config("sampling.x0_box must have one interval per state"));
    }
    let theta_box = config.theta_box()?;
    if theta_box.dim() != model.param_dim() {
        return Err(Error::config("sampling.theta_box must have one interval per parameter"));
    }
    let theta_hat0 = match &config.theta_hat0 {
        Some(v) => DVector::from_row_slice(v),
        None => theta_box.center(),
    };
    if theta_hat0.len() != model.param_dim() {
        return Err(Error::config("theta_hat0 has the wrong dimension"));
    }
    Ok(Ex1Setup {
        uclf: backstepping_uclf(variant),
        law,
        gains,
        scaling,
        sim,
        projection,
        x0_box: sampling.x0_box.clone(),
        theta_box,
        theta_hat0,
        rho0,
        trials: *ExperimentConfig::require(&config.trials, "trials")?,
        seed: config.seed.unwrap_or(0),
        convergence_threshold: config.convergence_threshold.unwrap_or(0.05),
        workers: config.workers.unwrap_or(0),
        model,
    })
}

pub fn resolve_ex2(config: &ExperimentConfig) -> Result<Ex2Setup> {
    let config = config.clone().with_preset_defaults()?;
    let model = builtin_model(ExperimentConfig::require(&config.model, "model")?)?;
    if model.name() != "ex2-contracting" {
        return Err(Error::config("the tracking experiment runs on the 'ex2-contracting' model"));
    }
    let artifact = match &config.metric_file {
        Some(path) => MetricArtifact::from_text(&fs::read_to_string(Path::new(path))?)?,
        None => ex2_metric_artifact(),
    };
    let metric = artifact.family()?;
    let (scaling, rho0) = config.scaling_fn()?;
    let gains = config.gains_fn(model.param_dim())?;
    let (sim, projection) = config.sim_config()?;
    let theta_box = config.theta_box()?;
    let theta_true = DVector::from_row_slice(ExperimentConfig::require(&config.theta_true, "theta_true")?);
    let theta_hat0 = match &config.theta_hat0 {
        Some(v) => DVector::from_row_slice(v),
        None => theta_box.center(),
    };
    let x0 = DVector::from_row_slice(ExperimentConfig::require(&config.x0, "x0")?);
    if theta_true.len() != model.param_dim()
        || theta_hat0.len() != model.param_dim()
        || x0.len() != model.state_dim()
    {
        return Err(Error::config("theta_true / theta_hat0 / x0 dimensions do not match the model"));
    }
    if !theta_box.contains(&theta_true, 0.0) {
        return Err(Error::config("theta_true lies outside the parameter box"));
    }
    let geodesic = GeodesicOptions {
        segments: config.geodesic_segments.unwrap_or(10),
        ..GeodesicOptions::default()
    };
    Ok(Ex2Setup {
        metric,
        artifact,
        gains,
        scaling,
        sim,
        projection,
        theta_box,
        theta_true,
        theta_hat0,
        rho0,
        x0,
        geodesic,
        seed: config.seed.unwrap_or(0),
        workers: config.workers.unwrap_or(0),
        model,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo batch (regulation)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    #[serde(flatten)]
    pub summary: TrialSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchSummary {
    pub trials: usize,
    pub converged: usize,
    pub diverged: usize,
    pub final_norm_percentiles: Percentiles,
    pub per_trial: Vec<TrialRecord>,
    pub wall_seconds: f64,
}

impl BatchSummary {
    fn from_records(records: Vec<TrialRecord>, wall_seconds: f64) -> Self {
        let trials = records.len();
        let converged = records.iter().filter(|r| r.summary.converged).count();
        let mut finals: Vec<f64> = records
            .iter()
            .map(|r| {
                if r.summary.diverged {
                    f64::INFINITY
                } else {
                    r.summary.final_state_norm
                }
            })
            .collect();
        finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pick = |q: f64| -> f64 {
            if finals.is_empty() {
                f64::NAN
            } else {
                finals[((finals.len() - 1) as f64 * q).round() as usize]
            }
        };
        Self {
            trials,
            converged,
            diverged: trials - converged,
            final_norm_percentiles: Percentiles { p50: pick(0.5), p90: pick(0.9), max: pick(1.0) },
            per_trial: records,
            wall_seconds,
        }
    }
}

/// Uniform draw of `(x0, theta_true)` for a trial. Stream `trial + 1` of
/// the batch seed; the initial state is drawn first, coordinate by
/// coordinate, then the parameters.
pub fn ex1_trial_draw(setup: &Ex1Setup, trial: usize) -> (DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    rng.set_stream(trial as u64 + 1);
    let x0 = DVector::from_iterator(
        setup.x0_box.len(),
        setup.x0_box.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)),
    );
    let theta = DVector::from_iterator(
        setup.theta_box.dim(),
        (0..setup.theta_box.dim())
            .map(|i| rng.random_range(setup.theta_box.lower[i]..=setup.theta_box.upper[i])),
    );
    (x0, theta)
}

/// Runs one regulation trial (used by the batch and by the acceptance
/// suite, which needs per-step logs).
pub fn ex1_run_trial(setup: &Ex1Setup, trial: usize, adaptation: bool, log_stride: usize) -> Result<TrajectoryLog> {
    let (x0, theta_true) = ex1_trial_draw(setup, trial);
    let adapt = AdaptOptions {
        enabled: adaptation,
        projection: if setup.projection { Some(setup.theta_box.clone()) } else { None },
    };
    let sim = SimConfig { log_stride, ..setup.sim.clone() };
    simulate_uclf(
        &setup.model,
        &setup.uclf,
        &setup.scaling,
        &setup.gains,
        &setup.law,
        &x0,
        &theta_true,
        &AdaptState::new(setup.theta_hat0.clone(), setup.rho0),
        &sim,
        &adapt,
    )
}

fn with_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    Ok(pool.install(job))
}

/// Outcome of the Monte Carlo batch: the adaptation arm and, if requested,
/// the fixed-estimate baseline arm on the identical draws.
pub struct Ex1Outcome {
    pub adaptive: BatchSummary,
    pub baseline: Option<BatchSummary>,
}

pub fn run_monte_carlo_ex1(
    setup: &Ex1Setup,
    baseline_arm: bool,
    out_dir: Option<&Path>,
) -> Result<Ex1Outcome> {
    let run_arm = |adaptation: bool| -> Result<(Vec<TrajectoryLog>, BatchSummary)> {
        let start = Instant::now();
        let logs: Vec<(usize, Result<TrajectoryLog>)> = with_pool(setup.workers, || {
            (0..setup.trials)
                .into_par_iter()
                .map(|i| (i, ex1_run_trial(setup, i, adaptation, setup.sim.log_stride)))
                .collect()
        })?;
        let mut collected = Vec::with_capacity(logs.len());
        for (i, log) in logs {
            let log = log.map_err(|e| Error::config(format!("trial {i}: {e}")))?;
            collected.push(log);
        }
        let records: Vec<TrialRecord> = collected
            .iter()
            .enumerate()
            .map(|(i, log)| TrialRecord {
                trial: i,
                summary: log.summary(setup.convergence_threshold),
            })
            .collect();
        let summary = BatchSummary::from_records(records, start.elapsed().as_secs_f64());
        Ok((collected, summary))
    };

    let (logs, adaptive) = run_arm(true)?;
    let baseline = if baseline_arm {
        let (base_logs, base_summary) = run_arm(false)?;
        if let Some(dir) = out_dir {
            write_ex1_arm(dir, "baseline", &base_logs)?;
        }
        Some(base_summary)
    } else {
        None
    };

    if let Some(dir) = out_dir {
        write_ex1_arm(dir, "adaptive", &logs)?;
        let summary_json = serde_json::json!({
            "adaptive": adaptive,
            "baseline": baseline,
        });
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary_json).unwrap())?;
    }
    Ok(Ex1Outcome { adaptive, baseline })
}

fn write_ex1_arm(dir: &Path, arm: &str, logs: &[TrajectoryLog]) -> Result<()> {
    let trials_dir = dir.join(format!("trials_{arm}"));
    fs::create_dir_all(&trials_dir)?;
    for (i, log) in logs.iter().enumerate() {
        fs::write(trials_dir.join(format!("trial_{i:03}.csv")), log.to_csv())?;
    }
    let plots = dir.join("plots");
    fs::create_dir_all(&plots)?;
    fs::write(
        plots.join(format!("state_norms_{arm}.csv")),
        wide_series_csv(logs, |log, k| log.states[k].norm()),
    )?;
    fs::write(
        plots.join(format!("upsilon_{arm}.csv")),
        wide_series_csv(logs, |log, k| log.upsilon[k]),
    )?;
    Ok(())
}

/// Wide CSV: first column time (longest trial), one column per trial;
/// shorter (diverged) trials leave cells empty.
fn wide_series_csv(logs: &[TrajectoryLog], f: impl Fn(&TrajectoryLog, usize) -> f64) -> String {
    use std::fmt::Write;
    let longest = logs.iter().map(|l| l.len()).max().unwrap_or(0);
    let time_src = logs.iter().max_by_key(|l| l.len());
    let mut s = String::new();
    let mut header = vec!["t".to_string()];
    header.extend((0..logs.len()).map(|i| format!("trial_{i:03}")));
    let _ = writeln!(s, "{}", header.join(","));
    for k in 0..longest {
        let mut row = vec![time_src.map_or(String::new(), |l| format!("{}", l.times[k]))];
        for log in logs {
            row.push(if k < log.len() { format!("{}", f(log, k)) } else { String::new() });
        }
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

// ---------------------------------------------------------------------------
// tracking comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct Ex2ArmSummary {
    #[serde(flatten)]
    pub trial: TrialSummary,
    /// Mean logged energy over the averaging window.
    pub time_avg_energy: f64,
    pub window_start: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Ex2Summary {
    pub adaptive: Option<Ex2ArmSummary>,
    pub static_reference: Option<Ex2ArmSummary>,
    /// `time_avg_energy(adaptive) / time_avg_energy(static)`; below one
    /// means the adaptive reference wins.
    pub energy_ratio: Option<f64>,
    pub wall_seconds: f64,
}

pub struct Ex2Outcome {
    pub adaptive: Option<TrajectoryLog>,
    pub static_reference: Option<TrajectoryLog>,
    pub summary: Ex2Summary,
}

/// Time-averaged certificate over `[window_start, t_final]`.
pub fn time_averaged_energy(log: &TrajectoryLog, window_start: f64) -> f64 {
    let vals: Vec<f64> = log
        .times
        .iter()
        .zip(&log.certificate)
        .filter(|(t, _)| **t >= window_start)
        .map(|(_, e)| *e)
        .collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub fn ex2_run_arm(setup: &Ex2Setup, mode: ReferenceMode, adaptation: bool) -> Result<TrajectoryLog> {
    let adapt = AdaptOptions {
        enabled: adaptation,
        projection: if setup.projection { Some(setup.theta_box.clone()) } else { None },
    };
    let opts = UccmSimOptions {
        geodesic: setup.geodesic,
        reference_mode: mode,
        ..UccmSimOptions::default()
    };
    simulate_uccm(
        &setup.model,
        &setup.metric,
        &setup.scaling,
        &setup.gains,
        &setup.x0,
        &setup.theta_true,
        &AdaptState::new(setup.theta_hat0.clone(), setup.rho0),
        &setup.sim,
        &adapt,
        &opts,
    )
}

/// Averaging window start for the tracking comparison (skips the initial
/// transient).
pub const EX2_WINDOW_START: f64 = 5.0;

/// Validates a tracking metric on the preset grid; used by the `ex2`
/// runner before any simulation starts.
pub fn validate_ex2_artifact(artifact: &MetricArtifact) -> Result<ValidationReport> {
    let cfg = ValidateConfig::preset("ex2-uccm")?;
    let model = builtin_model(&cfg.model)?;
    let metric = artifact.family()?;
    let us: Vec<DVector<f64>> =
        cfg.u_samples.iter().map(|u| DVector::from_row_slice(u)).collect();
    validate_uccm_grid(
        &model,
        &metric,
        &grid_points(&cfg.x_grid),
        &grid_points(&cfg.theta_grid),
        &us,
        cfg.tolerance,
    )
}

pub fn run_tracking_ex2(
    setup: &Ex2Setup,
    static_only: bool,
    out_dir: Option<&Path>,
) -> Result<Ex2Outcome> {
    let report = validate_ex2_artifact(&setup.artifact)?;
    if !report.pass {
        return Err(Error::Validation(format!(
            "tracking metric rejected: worst {} = {:.4e} at x = {:?}, theta = {:?}",
            report.worst_kind, report.worst_value, report.worst_x, report.worst_theta
        )));
    }
    let start = Instant::now();
    let arms: Vec<(ReferenceMode, TrajectoryLog)> = {
        let modes: Vec<ReferenceMode> = if static_only {
            vec![ReferenceMode::Static]
        } else {
            vec![ReferenceMode::Adaptive, ReferenceMode::Static]
        };
        let results: Vec<(ReferenceMode, Result<TrajectoryLog>)> = with_pool(setup.workers, || {
            modes
                .into_par_iter()
                .map(|m| (m, ex2_run_arm(setup, m, true)))
                .collect()
        })?;
        let mut arms = Vec::new();
        for (m, r) in results {
            arms.push((m, r?));
        }
        arms
    };

    let mut adaptive = None;
    let mut static_reference = None;
    for (mode, log) in arms {
        match mode {
            ReferenceMode::Adaptive => adaptive = Some(log),
            ReferenceMode::Static => static_reference = Some(log),
        }
    }

    let arm_summary = |log: &TrajectoryLog| Ex2ArmSummary {
        trial: log.summary(0.05),
        time_avg_energy: time_averaged_energy(log, EX2_WINDOW_START),
        window_start: EX2_WINDOW_START,
    };
    let sa = adaptive.as_ref().map(arm_summary);
    let ss = static_reference.as_ref().map(arm_summary);
    let ratio = match (&sa, &ss) {
        (Some(a), Some(s)) if s.time_avg_energy > 0.0 => {
            Some(a.time_avg_energy / s.time_avg_energy)
        }
        _ => None,
    };
    let summary = Ex2Summary {
        adaptive: sa,
        static_reference: ss,
        energy_ratio: ratio,
        wall_seconds: start.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        if let Some(log) = &adaptive {
            fs::write(dir.join("adaptive.csv"), log.to_csv())?;
        }
        if let Some(log) = &static_reference {
            fs::write(dir.join("static.csv"), log.to_csv())?;
        }
        let plots = dir.join("plots");
        fs::create_dir_all(&plots)?;
        if let (Some(a), Some(s)) = (&adaptive, &static_reference) {
            use std::fmt::Write;
            let mut csv = String::from("t,energy_adaptive,energy_static\n");
            for k in 0..a.len().min(s.len()) {
                let _ = writeln!(csv, "{},{},{}", a.times[k], a.certificate[k], s.certificate[k]);
            }
            fs::write(plots.join("energy.csv"), csv)?;
        }
        if let Some(a) = &adaptive {
            use std::fmt::Write;
            let mut csv = String::from("t,x1,x2,x3,xd1,xd2,xd3\n");
            for k in 0..a.len() {
                let x = &a.states[k];
                let xd = &a.reference_states[k];
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    a.times[k], x[0], x[1], x[2], xd[0], xd[1], xd[2]
                );
            }
            fs::write(plots.join("tracking.csv"), csv)?;
        }
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap())?;
    }
    Ok(Ex2Outcome { adaptive, static_reference, summary })
}

// ---------------------------------------------------------------------------
// certificate validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    /// `"uclf"` or `"uccm"`.
    pub certificate: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_file: Option<String>,
    /// Per-coordinate `[lo, hi, count]`.
    pub x_grid: Vec<(f64, f64, usize)>,
    pub theta_grid: Vec<(f64, f64, usize)>,
    #[serde(default)]
    pub u_samples: Vec<Vec<f64>>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    1e-8
}

impl ValidateConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("validate config {}: {e}", path.display())))
    }

    /// Built-in grids: `ex1-uclf` (feasibility of the backstepping family)
    /// and `ex2-uccm` (the shipped metric artifact).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ex1-uclf" => Ok(Self {
                certificate: "uclf".into(),
                model: "ex1-strict-feedback".into(),
                variant: Some("derived".into()),
                metric_file: None,
                x_grid: vec![(-2.0, 2.0, 21), (-2.0, 2.0, 21), (-2.0, 2.0, 21)],
                theta_grid: vec![(-0.2, 0.4, 5), (0.2, 0.6, 5)],
                u_samples: vec![],
                tolerance: 1e-8,
            }),
            "ex2-uccm" => Ok(Self {
                certificate: "uccm".into(),
                model: "ex2-contracting".into(),
                variant: None,
                metric_file: None,
                x_grid: vec![(-2.0, 2.0, 10), (-2.0, 2.0, 10), (-3.0, 3.0, 10)],
                theta_grid: vec![
                    (-0.4, 0.5, 2),
                    (-1.0, 0.6, 2),
                    (-0.6, 0.75, 2),
                    (-1.75, 0.4, 2),
                ],
                u_samples: vec![vec![-4.0], vec![4.0]],
                tolerance: 1e-8,
            }),
            other => Err(Error::config(format!(
                "unknown validation preset '{other}' (expected 'ex1-uclf' or 'ex2-uccm')"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub pass: bool,
    pub points_checked: usize,
    /// What failed (or came closest): `"c1"`, `"c2"`, `"metric lower
    /// bound"`, `"metric upper bound"`, `"uclf feasibility"`.
    pub worst_kind: String,
    pub worst_value: f64,
    pub worst_x: Vec<f64>,
    pub worst_theta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_u: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

fn axis_points(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 0 {
        return vec![];
    }
    if count == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

fn grid_points(ranges: &[(f64, f64, usize)]) -> Vec<DVector<f64>> {
    if ranges.iter().any(|&(_, _, c)| c == 0) {
        return vec![];
    }
    let axes: Vec<Vec<f64>> = ranges.iter().map(|&(lo, hi, c)| axis_points(lo, hi, c)).collect();
    let mut out = vec![DVector::zeros(ranges.len())];
    for (dim, ax) in axes.iter().enumerate() {
        let mut next = Vec::with_capacity(out.len() * ax.len());
        for base in &out {
            for &v in ax {
                let mut b = base.clone();
                b[dim] = v;
                next.push(b);
            }
        }
        out = next;
    }
    out
}

pub fn validate_certificate(config: &ValidateConfig) -> Result<ValidationReport> {
    let model = builtin_model(&config.model)?;
    let xs = grid_points(&config.x_grid);
    let thetas = grid_points(&config.theta_grid);

    if xs.is_empty() || thetas.is_empty() {
        return Ok(ValidationReport {
            pass: true,
            points_checked: 0,
            worst_kind: "none".into(),
            worst_value: f64::NEG_INFINITY,
            worst_x: vec![],
            worst_theta: vec![],
            worst_u: None,
            warnings: vec!["empty validation grid: vacuous pass".into()],
        });
    }

    match config.certificate.as_str() {
        "uclf" => {
            let variant =
                BacksteppingVariant::from_name(config.variant.as_deref().unwrap_or("derived"))?;
            let uclf = backstepping_uclf(variant);
            validate_uclf_feasibility(&model, &uclf, &xs, &thetas)
        }
        "uccm" => {
            let artifact = match &config.metric_file {
                Some(p) => MetricArtifact::from_text(&fs::read_to_string(Path::new(p))?)?,
                None => ex2_metric_artifact(),
            };
            let metric = artifact.family()?;
            let us: Vec<DVector<f64>> = if config.u_samples.is_empty() {
                vec![DVector::zeros(model.input_dim())]
            } else {
                config.u_samples.iter().map(|u| DVector::from_row_slice(u)).collect()
            };
            validate_uccm_grid(&model, &metric, &xs, &thetas, &us, config.tolerance)
        }
        other => Err(Error::config(format!(
            "unknown certificate kind '{other}' (expected 'uclf' or 'uccm')"
        ))),
    }
}

/// Feasibility of the decrement at every grid point: wherever the drift
/// alone violates the decrement (`a > 0`), the input gain must be nonzero.
fn validate_uclf_feasibility(
    model: &SystemModel,
    uclf: &UclfFamily,
    xs: &[DVector<f64>],
    thetas: &[DVector<f64>],
) -> Result<ValidationReport> {
    let mut pass = true;
    let mut worst = (f64::INFINITY, 0usize, 0usize); // min gain among a > 0 points
    let mut points = 0usize;
    for (xi, x) in xs.iter().enumerate() {
        for (ti, theta) in thetas.iter().enumerate() {
            points += 1;
            let eval = uclf_value_and_grads(uclf, x, theta)?;
            let drift = model.nominal(x, 0.0) - model.regressor(x, 0.0).transpose() * theta;
            let a = eval.dv_dx.dot(&drift) + uclf.decrement_rate() * eval.v;
            if a > 0.0 {
                let b = model.input_matrix(x, 0.0).transpose() * &eval.dv_dx;
                let gain = b.norm();
                if gain < worst.0 {
                    worst = (gain, xi, ti);
                }
                if gain <= 1e-12 {
                    pass = false;
                }
            }
        }
    }
    let (gain, xi, ti) = worst;
    Ok(ValidationReport {
        pass,
        points_checked: points,
        worst_kind: "uclf feasibility".into(),
        worst_value: if gain.is_finite() { gain } else { f64::NEG_INFINITY },
        worst_x: xs[xi].as_slice().to_vec(),
        worst_theta: thetas[ti].as_slice().to_vec(),
        worst_u: None,
        warnings: vec![],
    })
}

fn validate_uccm_grid(
    model: &SystemModel,
    metric: &MetricFamily,
    xs: &[DVector<f64>],
    thetas: &[DVector<f64>],
    us: &[DVector<f64>],
    tol: f64,
) -> Result<ValidationReport> {
    struct Worst {
        value: f64,
        kind: &'static str,
        x: usize,
        theta: usize,
        u: Option<usize>,
    }
    let mut worst = Worst { value: f64::NEG_INFINITY, kind: "none", x: 0, theta: 0, u: None };
    let mut points = 0usize;
    let (m_lo, m_hi) = metric.bounds();

    for (xi, x) in xs.iter().enumerate() {
        for (ti, theta) in thetas.iter().enumerate() {
            points += 1;
            let mut push = |v: f64, kind: &'static str, ui: Option<usize>| {
                if v > worst.value {
                    worst = Worst { value: v, kind, x: xi, theta: ti, u: ui };
                }
            };
            // uniform metric bounds
            let m = metric.metric_at(x, theta, 0.0)?;
            let eigs = m.symmetric_eigen().eigenvalues;
            push(m_lo - eigs.min(), "metric lower bound", None);
            push(eigs.max() - m_hi, "metric upper bound", None);
            // input compatibility
            let c2 = check_c2(metric, model, x, theta, 0.0, tol)?;
            for r in &c2.residuals {
                push(*r - tol, "c2", None);
            }
            // contraction of the unactuated block, along the closed-loop drift
            for (ui, u) in us.iter().enumerate() {
                let x_dot = eval_dynamics(model, x, theta, u, 0.0)?;
                let c1 = check_c1(metric, model, x, theta, u, 0.0, &x_dot, tol)?;
                if c1.max_eig.is_finite() {
                    push(c1.max_eig - tol, "c1", Some(ui));
                }
            }
        }
    }
    Ok(ValidationReport {
        pass: worst.value <= 0.0,
        points_checked: points,
        worst_kind: worst.kind.into(),
        worst_value: worst.value,
        worst_x: xs[worst.x].as_slice().to_vec(),
        worst_theta: thetas[worst.theta].as_slice().to_vec(),
        worst_u: worst.u.map(|ui| us[ui].as_slice().to_vec()),
        warnings: vec![],
    })
}

// ---------------------------------------------------------------------------
// metric fitting entry point
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub model: String,
    /// `"ex2"` selects the built-in template for the contracting benchmark.
    pub template: String,
    pub lambda: f64,
    pub x_grid: Vec<(f64, f64, usize)>,
    pub theta_grid: Vec<(f64, f64, usize)>,
    #[serde(default)]
    pub u_samples: Vec<Vec<f64>>,
    #[serde(default = "default_w_bounds")]
    pub w_bounds: (f64, f64),
    #[serde(default = "default_fit_margin")]
    pub margin: f64,
    #[serde(default = "default_fit_iters")]
    pub max_iters: usize,
}

fn default_w_bounds() -> (f64, f64) {
    (0.2, 25.0)
}
fn default_fit_margin() -> f64 {
    5e-2
}
fn default_fit_iters() -> usize {
    800
}

impl FitConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("fit config {}: {e}", path.display())))
    }

    pub fn preset_ex2() -> Self {
        Self {
            model: "ex2-contracting".into(),
            template: "ex2".into(),
            lambda: 0.5,
            x_grid: vec![(-2.0, 2.0, 5), (-2.0, 2.0, 3), (-3.0, 3.0, 3)],
            theta_grid: vec![
                (-0.4, 0.5, 2),
                (-1.0, 0.6, 2),
                (-0.6, 0.75, 2),
                (-1.75, 0.4, 2),
            ],
            u_samples: vec![vec![-4.0], vec![0.0], vec![4.0]],
            w_bounds: (0.2, 25.0),
            margin: 5e-2,
            max_iters: 800,
        }
    }
}

/// Fits the template over the configured grid and packages the result as a
/// metric artifact (primal bounds are the reciprocals of the dual band).
pub fn run_fit_metric(config: &FitConfig) -> Result<MetricArtifact> {
    let model = builtin_model(&config.model)?;
    let template = match config.template.as_str() {
        "ex2" => ex2_dual_template(),
        other => {
            return Err(Error::config(format!(
                "unknown template '{other}' (expected 'ex2')"
            )))
        }
    };
    let xs = grid_points(&config.x_grid);
    let thetas = grid_points(&config.theta_grid);
    let us: Vec<DVector<f64>> = if config.u_samples.is_empty() {
        vec![DVector::zeros(model.input_dim())]
    } else {
        config.u_samples.iter().map(|u| DVector::from_row_slice(u)).collect()
    };
    let mut samples = Vec::with_capacity(xs.len() * thetas.len() * us.len());
    for x in &xs {
        for theta in &thetas {
            for u in &us {
                samples.push(FitPoint { x: x.clone(), theta: theta.clone(), u: u.clone() });
            }
        }
    }
    let opts = FitOptions {
        max_iters: config.max_iters,
        margin: config.margin,
        w_bounds: config.w_bounds,
        ..FitOptions::default()
    };
    let fitted = fit_metric_coeffs(&model, &template, config.lambda, &samples, &opts)?;
    Ok(MetricArtifact {
        poly: fitted,
        lambda: config.lambda,
        bounds: (1.0 / config.w_bounds.1, 1.0 / config.w_bounds.0),
    })
}

/// Writes the resolved config snapshot into the run directory.
pub fn write_config_snapshot<T: Serialize>(dir: &Path, config: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(config).unwrap())?;
    Ok(path)
}
