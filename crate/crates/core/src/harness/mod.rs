//! Scenario engine: prior estimation runs, per-run controller design,
//! closed-loop simulation with on-board fusion, and the velocity sweep.
//!
//! Every random stream is seeded from the master seed and a fixed label, so
//! results do not depend on thread scheduling.

pub mod config;
mod output;

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{DesignMode, PriorSource, RunSpec, ScenarioConfig};
pub use output::{FrrfRow, FusionRow, SweepRow};

use crate::codesign::{
    a_g, bounds_for_box, check_ag_hurwitz, design_km_p, design_p_for_gain, nominal_system, optimize_velocity, theta_true,
    verify_common_lyapunov, worst_norm_over_omega, CodesignError, DesignResult, GainDesign, LyapunovCertificate, StiffnessBox,
    UncertaintyBounds,
};
use crate::frrf::sim::{generate_weather, ArrivalModel, FieldSimulator, InputWaveform};
use crate::frrf::{
    AreaId, FilterState, FixedRankResilientFilter, FrrfError, GridSpec, PriorDistribution, SpatioTemporalModel, StaticBasis,
};
use crate::fusion::{posterior_fuse, update_filter_gain, FusionError, OnboardMeasurement};
use crate::l1ac::{ClosedLoopSim, L1Config, L1Error, LoopMetrics, TraceSample};
use crate::linalg;
use crate::vehicle::error_matrices;
use config::{rows_to_matrix, FrrfScenario};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },
    #[error("filter failed at step {step}: {source}")]
    Filter { step: u64, source: FrrfError },
    #[error("run {run}: {source}")]
    Design { run: String, source: CodesignError },
    #[error("run {run}: {source}")]
    Controller { run: String, source: L1Error },
    #[error("i/o error: {0}")]
    Io(String),
}

impl HarnessError {
    /// 2 for configuration problems, 3 for infeasible designs, 4 for
    /// divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 2,
            HarnessError::Design { source: CodesignError::Infeasible { .. }, .. } => 3,
            HarnessError::Controller { source: L1Error::Divergence { .. }, .. } => 4,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream named `label` under `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(h))
}

// ---------------------------------------------------------------- estimate

/// One filter run over the scenario horizon.
#[derive(Debug, Clone)]
pub struct FrrfRun {
    pub rows: Vec<FrrfRow>,
    /// `Σ_s P^q_{s,k}` per step.
    pub trace: Vec<f64>,
    /// `‖q_k − q̂_k‖` per step.
    pub error_norm: Vec<f64>,
    pub uncompensated_steps: usize,
    pub burn_in: u64,
}

impl FrrfRun {
    fn tail_mean(&self, xs: &[f64]) -> f64 {
        let tail = &xs[self.burn_in as usize..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn avg_trace(&self) -> f64 {
        self.tail_mean(&self.trace)
    }

    pub fn avg_error(&self) -> f64 {
        self.tail_mean(&self.error_norm)
    }

    pub fn estimate(&self, area: AreaId, k: u64) -> Option<&FrrfRow> {
        self.rows.iter().find(|r| r.k == k && r.area == area.0)
    }
}

pub fn build_model(f: &FrrfScenario, weather_seed: u64) -> Result<SpatioTemporalModel, HarnessError> {
    let grid = GridSpec::new(f.rows, f.cols).map_err(|e| HarnessError::Config { path: "$.frrf".into(), message: e.to_string() })?;
    let n = grid.n_areas();
    let basis =
        StaticBasis::w_wavelet(&grid, f.rank).map_err(|e| HarnessError::Config { path: "$.frrf.rank".into(), message: e.to_string() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(weather_seed);
    let mu = generate_weather(&grid, f.steps, f.weather.lo, f.weather.hi, &f.weather.fixed, &mut rng);
    Ok(SpatioTemporalModel {
        grid,
        basis: Arc::new(basis),
        transition: DMatrix::identity(f.rank, f.rank),
        input_map: DMatrix::identity(f.rank, f.rank),
        p_eps: vec![f.p_eps; n],
        p_xi: vec![f.p_xi; n],
        p_zeta: DMatrix::identity(f.rank, f.rank) * f.p_zeta,
        mu,
    })
}

/// Runs the filter against a simulated field. The filter starts from
/// `η̂₀ = eta0_offset · 1` with covariance `p0 I`; the truth starts from a
/// draw of `N(0, p0 I)`.
pub fn frrf_experiment(
    f: &FrrfScenario,
    model: &SpatioTemporalModel,
    arrivals: &ArrivalModel,
    input: InputWaveform,
    eta0_offset: f64,
    seed: u64,
) -> Result<FrrfRun, HarnessError> {
    let n = f.rank;
    let p0 = DMatrix::identity(n, n) * f.p0;
    let wrap = |step: u64| move |source: FrrfError| HarnessError::Filter { step, source };
    let mut sim = FieldSimulator::new(model.clone(), arrivals.clone(), input, &DVector::zeros(n), &p0, seed).map_err(wrap(0))?;
    let init = FilterState::new(0, DVector::from_element(n, eta0_offset), p0.clone());
    let mut filter = FixedRankResilientFilter::new(model.clone(), init).map_err(wrap(0))?;
    let areas: Vec<AreaId> = model.grid.areas().collect();
    let mut run = FrrfRun { rows: Vec::new(), trace: Vec::new(), error_norm: Vec::new(), uncompensated_steps: 0, burn_in: f.burn_in };
    for _ in 0..f.steps {
        let step = sim.next_step().map_err(wrap(sim.k() + 1))?;
        let out = filter.step(&step.batch, &areas).map_err(wrap(step.k))?;
        if !out.predicted.rank_ok {
            run.uncompensated_steps += 1;
        }
        let mut trace = 0.0;
        let mut sq = 0.0;
        for (est, truth) in out.estimates.iter().zip(&step.truth) {
            let error = truth - est.q_hat;
            trace += est.p_q;
            sq += error * error;
            run.rows.push(FrrfRow { k: step.k, area: est.s_star.0, q_hat: est.q_hat, p_q: est.p_q, truth: *truth, error });
        }
        run.trace.push(trace);
        run.error_norm.push(sq.sqrt());
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaPrior {
    pub area: AreaId,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub avg_trace_sparse: f64,
    pub avg_trace_full: f64,
    pub trace_ratio: f64,
    pub avg_error_sparse: f64,
    pub avg_error_full: f64,
    pub uncompensated_steps_sparse: usize,
    pub uncompensated_steps_full: usize,
    /// Query estimates of the full run at the design step.
    pub priors: Vec<AreaPrior>,
}

#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub sparse: FrrfRun,
    pub full: FrrfRun,
    pub summary: EstimateSummary,
}

pub fn run_prior_estimation(cfg: &ScenarioConfig, seed: u64) -> Result<EstimateOutput, HarnessError> {
    let f = &cfg.frrf;
    let model = build_model(f, derive_seed(seed, "weather"))?;
    let truth_seed = derive_seed(seed, "field");
    let (sparse, full) = rayon::join(
        || frrf_experiment(f, &model, &f.arrivals, f.input, 0.0, truth_seed),
        || frrf_experiment(f, &model, &f.full_arrivals, f.input, 0.0, truth_seed),
    );
    let (sparse, full) = (sparse?, full?);
    let priors = model
        .grid
        .areas()
        .filter_map(|a| full.estimate(a, f.design_step).map(|r| AreaPrior { area: a, mean: r.q_hat, variance: r.p_q }))
        .collect();
    let summary = EstimateSummary {
        avg_trace_sparse: sparse.avg_trace(),
        avg_trace_full: full.avg_trace(),
        trace_ratio: full.avg_trace() / sparse.avg_trace(),
        avg_error_sparse: sparse.avg_error(),
        avg_error_full: full.avg_error(),
        uncompensated_steps_sparse: sparse.uncompensated_steps,
        uncompensated_steps_full: full.uncompensated_steps,
        priors,
    };
    Ok(EstimateOutput { sparse, full, summary })
}

// ------------------------------------------------------------------ design

#[derive(Debug, Clone, PartialEq)]
pub struct RunDesign {
    pub run: String,
    pub area: AreaId,
    pub prior: PriorDistribution,
    pub design: DesignResult,
    pub meets_norm_bound: bool,
}

fn prior_for(spec: &RunSpec, priors: Option<&[AreaPrior]>) -> Result<PriorDistribution, HarnessError> {
    match spec.prior {
        PriorSource::Explicit { mean, variance } => Ok(PriorDistribution::new(mean, variance)),
        PriorSource::Filter(_) => {
            priors.and_then(|ps| ps.iter().find(|p| p.area == spec.area)).map(|p| PriorDistribution::new(p.mean, p.variance)).ok_or_else(
                || HarnessError::Config { path: format!("runs.{}.prior", spec.name), message: "no filter estimate for this area".into() },
            )
        }
    }
}

/// `k_m` and `P` for nominal stiffness `c_hat` under the scenario design settings.
pub fn gains_for(cfg: &ScenarioConfig, c_hat: f64, k_m: Option<Vector4<f64>>) -> Result<GainDesign, CodesignError> {
    let v = &cfg.design.velocity;
    match k_m.or_else(|| cfg.shared_k_m()) {
        Some(k_m) => design_p_for_gain(c_hat, c_hat, v.v_min, v.v_max, &k_m, &cfg.vehicle),
        None => design_km_p(c_hat, c_hat, v.v_min, v.v_max, &cfg.design.poles, &cfg.vehicle),
    }
}

pub fn design_run(cfg: &ScenarioConfig, spec: &RunSpec, priors: Option<&[AreaPrior]>) -> Result<RunDesign, HarnessError> {
    let prior = prior_for(spec, priors)?;
    let wrap = |source: CodesignError| HarnessError::Design { run: spec.name.clone(), source };
    let vc = &cfg.design.velocity;
    let design = match &spec.design {
        DesignMode::Optimize => optimize_for_prior(cfg, &prior).map_err(wrap)?,
        DesignMode::Fixed { v, k, k_m, p } => {
            let nominal = StiffnessBox::from_priors(&prior, &prior).map_err(wrap)?;
            let k_m_given = k_m.map(Vector4::from).or_else(|| cfg.shared_k_m());
            let (k_m, pm) = match (k_m_given, p) {
                (Some(km), Some(rows)) => (km, rows_to_matrix(rows)),
                (km, rows) => {
                    let g = gains_for(cfg, prior.mean, km).map_err(wrap)?;
                    (g.k_m, rows.as_ref().map(rows_to_matrix).unwrap_or(g.p))
                }
            };
            let bounds = bounds_for_box(&nominal, *v, &k_m, &cfg.vehicle, &cfg.road).map_err(wrap)?;
            let (a_m, b_m) = nominal_system(*v, prior.mean, prior.mean, &k_m, &cfg.vehicle).map_err(wrap)?;
            let g_norm = worst_norm_over_omega(&a_m, &b_m, *k, &bounds.omega, vc.omega_grid, vc.norm_dt, f64::INFINITY).map_err(wrap)?;
            let ag = check_ag_hurwitz(&a_m, &b_m, *k, &bounds.theta, &bounds.omega, vc.ag_grid, vc.ag_tol);
            let (a_min, _) = nominal_system(vc.v_min, prior.mean, prior.mean, &k_m, &cfg.vehicle).map_err(wrap)?;
            let (a_max, _) = nominal_system(vc.v_max, prior.mean, prior.mean, &k_m, &cfg.vehicle).map_err(wrap)?;
            let lyapunov = verify_common_lyapunov(&pm, &a_min, &a_max, 1e-6);
            DesignResult { k_m, p: pm, k: *k, v: *v, g_norm, lyapunov, ag, bounds, nominal }
        }
    };
    Ok(RunDesign { run: spec.name.clone(), area: spec.area, prior, meets_norm_bound: design.g_norm <= vc.lambda_gp, design })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub run: String,
    pub area: AreaId,
    pub feasible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorDistribution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meets_norm_bound: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_m: Option<[f64; 4]>,
    /// Row-major.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<[[f64; 4]; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<LyapunovCertificate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ag_pass: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ag_worst_abscissa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<UncertaintyBounds>,
}

fn matrix_rows(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

impl DesignSummary {
    fn new(spec: &RunSpec, r: &Result<RunDesign, HarnessError>) -> Self {
        match r {
            Ok(d) => Self {
                run: d.run.clone(),
                area: d.area,
                feasible: true,
                error: None,
                prior: Some(d.prior),
                v: Some(d.design.v),
                k: Some(d.design.k),
                g_norm: Some(d.design.g_norm),
                meets_norm_bound: Some(d.meets_norm_bound),
                k_m: Some(d.design.k_m.into()),
                p: Some(matrix_rows(&d.design.p)),
                lyapunov: Some(d.design.lyapunov),
                ag_pass: Some(d.design.ag.pass),
                ag_worst_abscissa: Some(d.design.ag.worst_abscissa),
                bounds: Some(d.design.bounds),
            },
            Err(e) => Self {
                run: spec.name.clone(),
                area: spec.area,
                feasible: false,
                error: Some(e.to_string()),
                prior: None,
                v: None,
                k: None,
                g_norm: None,
                meets_norm_bound: None,
                k_m: None,
                p: None,
                lyapunov: None,
                ag_pass: None,
                ag_worst_abscissa: None,
                bounds: None,
            },
        }
    }
}

pub fn run_designs(cfg: &ScenarioConfig, priors: Option<&[AreaPrior]>) -> Vec<Result<RunDesign, HarnessError>> {
    cfg.runs.par_iter().map(|spec| design_run(cfg, spec, priors)).collect()
}

fn needs_filter_priors(cfg: &ScenarioConfig) -> bool {
    cfg.runs.iter().any(|r| matches!(r.prior, PriorSource::Filter(_)))
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: String,
    pub area: AreaId,
    pub v: f64,
    pub truth_f: f64,
    pub truth_r: f64,
    pub k_initial: f64,
    pub k_final: f64,
    pub metrics: LoopMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<f64>,
    /// Spectral abscissa of `A_g` at the true `(θ, w)`.
    pub true_ag_abscissa: f64,
    pub gain_updates: usize,
    pub gain_update_failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_posterior: Option<PriorDistribution>,
}

impl RunReport {
    /// Diverged, or `A_g` at the true parameters is not Hurwitz.
    pub fn flagged_unstable(&self) -> bool {
        self.diverged_at.is_some() || self.true_ag_abscissa >= 0.0
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub samples: Vec<TraceSample>,
    pub fusion: Vec<FusionRow>,
}

/// Closed loop of one designed run at its true stiffness, with periodic
/// posterior fusion and filter-gain re-checks.
pub fn run_closed_loop(cfg: &ScenarioConfig, spec: &RunSpec, d: &RunDesign, seed: u64) -> Result<RunOutput, HarnessError> {
    let design = &d.design;
    let wrap = |source: L1Error| HarnessError::Controller { run: spec.name.clone(), source };
    let (c_f, c_r) = (spec.truth, spec.truth_r());
    let plant = error_matrices(design.v, c_f, c_r, &cfg.vehicle).map_err(|e| wrap(e.into()))?;
    let (a_m, b_m) = nominal_system(design.v, design.nominal.c_f_hat, design.nominal.c_r_hat, &design.k_m, &cfg.vehicle)
        .map_err(|source| HarnessError::Design { run: spec.name.clone(), source })?;
    let l1 = L1Config::new(a_m, b_m, design.k_m, design.p, cfg.controller.gamma, design.k, design.bounds, cfg.controller.proj_eps)
        .map_err(wrap)?;

    let w_true = c_f / design.nominal.c_f_hat;
    let th_true = theta_true(c_f, c_r, &design.nominal, design.v, &design.k_m, &cfg.vehicle);
    let true_ag_abscissa =
        linalg::spectral_abscissa(&DMatrix::from_column_slice(5, 5, a_g(&a_m, &b_m, design.k, &th_true, w_true).as_slice()));

    let mut sim = ClosedLoopSim::new(&plant, &l1, &cfg.road, &cfg.simulation).map_err(wrap)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("fusion/{}", spec.name)));
    let noise = Normal::new(0.0, cfg.fusion.measurement_variance.sqrt()).expect("validated variance");
    let mut posterior = d.prior;
    let mut fusion = vec![FusionRow { t: 0.0, c_post_mean: posterior.mean, c_post_var: posterior.variance, k_current: design.k }];
    let (mut updates, mut failures) = (0, 0);
    let mut diverged_at = None;
    let duration = cfg.simulation.duration;
    let mut j = 1u64;
    while !sim.done() {
        let t_next = if cfg.fusion.enabled { (j as f64 * cfg.fusion.period).min(duration) } else { duration };
        j += 1;
        if let Err(e) = sim.advance_to(t_next) {
            match e {
                L1Error::Divergence { t } => {
                    diverged_at = Some(t);
                    break;
                }
                other => return Err(wrap(other)),
            }
        }
        if !cfg.fusion.enabled {
            continue;
        }
        let reading = OnboardMeasurement { value: c_f + noise.sample(&mut rng), variance: cfg.fusion.measurement_variance };
        let post = posterior_fuse(&posterior, &[reading]).map_err(|e| HarnessError::Io(e.to_string()))?;
        posterior = post.as_prior();
        match update_filter_gain(design.k, &post, &post, design, &cfg.vehicle, &cfg.road, &cfg.fusion.search) {
            Ok(up) => {
                if up.k != sim.config().k {
                    sim.set_filter_gain(up.k).map_err(wrap)?;
                    updates += 1;
                }
            }
            Err(FusionError::Unrecoverable { .. }) => failures += 1,
            Err(e) => return Err(HarnessError::Io(e.to_string())),
        }
        fusion.push(FusionRow { t: sim.time(), c_post_mean: posterior.mean, c_post_var: posterior.variance, k_current: sim.config().k });
    }
    let k_final = sim.config().k;
    let metrics = sim.metrics();
    let trace = sim.finish();
    Ok(RunOutput {
        report: RunReport {
            run: spec.name.clone(),
            area: spec.area,
            v: design.v,
            truth_f: c_f,
            truth_r: c_r,
            k_initial: design.k,
            k_final,
            metrics,
            diverged_at,
            true_ag_abscissa,
            gain_updates: updates,
            gain_update_failures: failures,
            final_posterior: cfg.fusion.enabled.then_some(posterior),
        },
        samples: trace.samples,
        fusion,
    })
}

// ------------------------------------------------------------------- sweep

/// `V*(Ĉ)` over `points` nominal stiffnesses spaced evenly in `[c_min, c_max]`.
pub fn run_velocity_curve(cfg: &ScenarioConfig, c_min: f64, c_max: f64, points: usize) -> Result<Vec<SweepRow>, HarnessError> {
    let cs: Vec<f64> =
        if points <= 1 { vec![c_min] } else { (0..points).map(|i| c_min + (c_max - c_min) * i as f64 / (points - 1) as f64).collect() };
    cs.par_iter()
        .map(|&c| match optimize_for_prior(cfg, &PriorDistribution::new(c, cfg.sweep.variance)) {
            Ok(d) => Ok(SweepRow { c_hat: c, v_star: Some(d.v), k_star: Some(d.k), g_norm: d.g_norm }),
            Err(CodesignError::Infeasible { best_residual, .. }) => {
                Ok(SweepRow { c_hat: c, v_star: None, k_star: None, g_norm: cfg.design.velocity.lambda_gp + best_residual })
            }
            Err(source) => Err(HarnessError::Design { run: format!("sweep@{c}"), source }),
        })
        .collect()
}

/// Velocity and filter gain for a prior shared by both axles. With a shared
/// `k_m` that admits no common `P`, the search still runs and the failed
/// certificate is reported with the result.
pub fn optimize_for_prior(cfg: &ScenarioConfig, prior: &PriorDistribution) -> Result<DesignResult, CodesignError> {
    let gains = match (gains_for(cfg, prior.mean, None), cfg.shared_k_m()) {
        (Ok(g), _) => g,
        (Err(CodesignError::Infeasible { .. }), Some(k_m)) => {
            let cert = LyapunovCertificate { p_min_eig: 1.0, residual_min: f64::NAN, residual_max: f64::NAN, tol: 0.0, pass: false };
            GainDesign { k_m, p: Matrix4::identity(), certificate: cert }
        }
        (Err(e), _) => return Err(e),
    };
    optimize_velocity(&cfg.design.velocity, prior, prior, &gains, &cfg.vehicle, &cfg.road)
}

// -------------------------------------------------------------------- verbs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Estimate,
    Design,
    Simulate,
    Sweep,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub seed: u64,
    pub verb: Verb,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<EstimateSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub designs: Option<Vec<DesignSummary>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<Vec<RunReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepRow>>,
    pub exit_code: i32,
}

/// Runs `verb`, writes its CSVs and `summary.json` into `out`, and returns
/// the summary. Infeasible designs and divergent runs are recorded and
/// reflected in `exit_code` rather than aborting the remaining work.
pub fn execute(verb: Verb, cfg: &ScenarioConfig, seed: u64, out: &Path) -> Result<Summary, HarnessError> {
    std::fs::create_dir_all(out)?;
    let mut summary =
        Summary { scenario: cfg.name.clone(), seed, verb, estimate: None, designs: None, runs: None, sweep: None, exit_code: 0 };
    let all = verb == Verb::All;

    let estimate = if all || verb == Verb::Estimate || (matches!(verb, Verb::Design | Verb::Simulate) && needs_filter_priors(cfg)) {
        Some(run_prior_estimation(cfg, seed)?)
    } else {
        None
    };
    if let Some(est) = &estimate {
        if all || verb == Verb::Estimate {
            output::write_frrf(&out.join("frrf_sparse.csv"), &est.sparse.rows)?;
            output::write_frrf(&out.join("frrf_full.csv"), &est.full.rows)?;
            summary.estimate = Some(est.summary.clone());
        }
    }
    let priors = estimate.as_ref().map(|e| e.summary.priors.as_slice());

    if all || matches!(verb, Verb::Design | Verb::Simulate) {
        let designs = run_designs(cfg, priors);
        for d in &designs {
            if let Err(e) = d {
                if e.exit_code() == 2 {
                    return Err(HarnessError::Config { path: "$.runs".into(), message: e.to_string() });
                }
                summary.exit_code = summary.exit_code.max(e.exit_code());
            }
        }
        summary.designs = Some(cfg.runs.iter().zip(&designs).map(|(s, d)| DesignSummary::new(s, d)).collect());

        if all || verb == Verb::Simulate {
            let jobs: Vec<(&RunSpec, &RunDesign)> =
                cfg.runs.iter().zip(&designs).filter_map(|(s, d)| d.as_ref().ok().map(|d| (s, d))).collect();
            let results: Vec<Result<RunOutput, HarnessError>> = jobs.par_iter().map(|(s, d)| run_closed_loop(cfg, s, d, seed)).collect();
            let mut reports = Vec::new();
            for r in results {
                let r = r?;
                if r.report.diverged_at.is_some() {
                    summary.exit_code = summary.exit_code.max(4);
                }
                output::write_trajectory(&out.join(format!("trajectory_{}.csv", r.report.run)), &r.samples)?;
                output::write_l1_trace(&out.join(format!("l1_{}.csv", r.report.run)), &r.samples)?;
                output::write_fusion(&out.join(format!("fusion_{}.csv", r.report.run)), &r.fusion)?;
                reports.push(r.report);
            }
            summary.runs = Some(reports);
        }
    }

    if all || verb == Verb::Sweep {
        let rows = run_velocity_curve(cfg, cfg.sweep.c_min, cfg.sweep.c_max, cfg.sweep.points)?;
        output::write_sweep(&out.join("sweep.csv"), &rows)?;
        summary.sweep = Some(rows);
    }

    output::write_summary(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_by_label_and_master() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(7, "field"), derive_seed(7, "field"));
    }

    #[test]
    fn exit_codes() {
        let c = HarnessError::Config { path: "$".into(), message: String::new() };
        assert_eq!(c.exit_code(), 2);
        let d = HarnessError::Design { run: "x".into(), source: CodesignError::Infeasible { reason: String::new(), best_residual: 0.0 } };
        assert_eq!(d.exit_code(), 3);
        let v = HarnessError::Controller { run: "x".into(), source: L1Error::Divergence { t: 1.0 } };
        assert_eq!(v.exit_code(), 4);
    }

    #[test]
    fn single_point_sweep_is_one_row() {
        let mut cfg = ScenarioConfig::default();
        cfg.design.velocity.lambda_gp = 0.7;
        let rows = run_velocity_curve(&cfg, 51_826.0, 51_826.0, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].c_hat, 51_826.0);
    }

    #[test]
    fn noiseless_full_measurement_tracks_truth() {
        let f = FrrfScenario {
            rows: 2,
            cols: 2,
            rank: 4,
            p_eps: 1e-8,
            p_xi: 0.0,
            p_zeta: 0.0,
            p0: 1000.0,
            arrivals: ArrivalModel::Full,
            full_arrivals: ArrivalModel::Full,
            steps: 20,
            burn_in: 5,
            design_step: 10,
            ..FrrfScenario::default()
        };
        let model = build_model(&f, 3).unwrap();
        let run = frrf_experiment(&f, &model, &ArrivalModel::Full, f.input, 0.0, 4).unwrap();
        assert!(run.error_norm[5..].iter().all(|e| *e < 1e-3), "{:?}", run.error_norm);
    }
}
