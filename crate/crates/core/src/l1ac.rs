//! L1 adaptive heading controller: state predictor, projected adaptation
//! laws, integrating low-pass control law, and closed-loop simulation
//! against the lateral plant.

use nalgebra::{Matrix4, SVector, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codesign::{Interval, UncertaintyBounds};
use crate::vehicle::{rk4, ErrorState, LateralMatrices, RoadProfile, VehicleError};

/// State norm above which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum L1Error {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("{name} = {value} lies outside its inflated set [{lo}, {hi}]")]
    ProjectionDomain { name: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("closed loop diverged at t = {t} s")]
    Divergence { t: f64 },
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L1Config {
    pub a_m: Matrix4<f64>,
    pub b_m: Vector4<f64>,
    pub c: Vector4<f64>,
    pub k_m: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub gamma: f64,
    pub k: f64,
    pub k_g: f64,
    pub bounds: UncertaintyBounds,
    pub proj_eps: f64,
}

impl L1Config {
    /// Output `c = [1, 0, 0, 0]`; `k_g` is derived.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a_m: Matrix4<f64>,
        b_m: Vector4<f64>,
        k_m: Vector4<f64>,
        p: Matrix4<f64>,
        gamma: f64,
        k: f64,
        bounds: UncertaintyBounds,
        proj_eps: f64,
    ) -> Result<Self, L1Error> {
        let c = Vector4::new(1.0, 0.0, 0.0, 0.0);
        let k_g = feedforward_gain(&a_m, &b_m, &c)?;
        let cfg = Self { a_m, b_m, c, k_m, p, gamma, k, k_g, bounds, proj_eps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), L1Error> {
        let bad = |m: String| Err(L1Error::InvalidConfig(m));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("adaptation gain must be positive, got {}", self.gamma));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return bad(format!("filter gain must be positive, got {}", self.k));
        }
        if !(self.proj_eps > 0.0) {
            return bad(format!("projection margin must be positive, got {}", self.proj_eps));
        }
        let abscissa = self.a_m.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        if !(abscissa < 0.0) {
            return bad(format!("A_m is not Hurwitz (spectral abscissa {abscissa})"));
        }
        let sym = (self.p - self.p.transpose()).abs().max();
        if sym > 1e-9 * self.p.abs().max().max(1.0) {
            return bad("P is not symmetric".into());
        }
        let p_min = self.p.symmetric_eigen().eigenvalues.min();
        if !(p_min > 0.0) {
            return bad(format!("P is not positive definite (min eigenvalue {p_min})"));
        }
        let form = self.a_m.transpose() * self.p + self.p * self.a_m;
        let f_max = (0.5 * (form + form.transpose())).symmetric_eigen().eigenvalues.max();
        if !(f_max < 0.0) {
            return bad(format!("A_mᵀP + P A_m is not negative definite (max eigenvalue {f_max})"));
        }
        let k_g = feedforward_gain(&self.a_m, &self.b_m, &self.c)?;
        if (k_g - self.k_g).abs() > 1e-9 * k_g.abs().max(1.0) {
            return bad(format!("k_g = {} does not match −1/(cᵀA_m⁻¹b_m) = {k_g}", self.k_g));
        }
        Ok(())
    }

    fn sets(&self) -> ParamSets {
        let b = &self.bounds;
        ParamSets { omega: b.omega, theta: b.theta, sigma: Interval::new(-b.delta, b.delta), eps: self.proj_eps }
    }
}

/// `k_g = −1/(cᵀ A_m⁻¹ b_m)`.
pub fn feedforward_gain(a_m: &Matrix4<f64>, b_m: &Vector4<f64>, c: &Vector4<f64>) -> Result<f64, L1Error> {
    let inv = a_m.try_inverse().ok_or_else(|| L1Error::InvalidConfig("A_m is singular".into()))?;
    let dc = c.dot(&(inv * b_m));
    if dc == 0.0 || !dc.is_finite() {
        return Err(L1Error::InvalidConfig("output has zero DC gain".into()));
    }
    Ok(-1.0 / dc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveState {
    pub x_hat: Vector4<f64>,
    pub w_hat: f64,
    pub theta_hat: Vector4<f64>,
    pub sigma_hat: f64,
    pub u_int: f64,
    pub u_ad: f64,
}

impl AdaptiveState {
    /// Nominal start: `ŵ = 1`, `θ̂ = 0`, `σ̂ = 0`, `x̂ = x₀`.
    pub fn initial(x0: &Vector4<f64>) -> Self {
        Self { x_hat: *x0, w_hat: 1.0, theta_hat: Vector4::zeros(), sigma_hat: 0.0, u_int: 0.0, u_ad: 0.0 }
    }

    /// `η̂ = ŵ u_ad + θ̂ᵀx + σ̂`.
    pub fn eta_hat(&self, x: &Vector4<f64>) -> f64 {
        self.w_hat * self.u_ad + self.theta_hat.dot(x) + self.sigma_hat
    }
}

#[derive(Debug, Clone, Copy)]
struct ParamSets {
    omega: Interval,
    theta: [Interval; 4],
    sigma: Interval,
    eps: f64,
}

impl ParamSets {
    /// Largest normalized level over all estimates; `≤ 1` means inside the
    /// inflated sets.
    fn level(&self, w: f64, theta: &Vector4<f64>, sigma: f64) -> f64 {
        let mut m = proj_level(w, &self.omega, self.eps).max(proj_level(sigma, &self.sigma, self.eps));
        for i in 0..4 {
            m = m.max(proj_level(theta[i], &self.theta[i], self.eps));
        }
        m
    }
}

fn inflation(set: &Interval, eps: f64) -> (f64, f64, f64) {
    let c = set.mid();
    let h = 0.5 * set.width();
    let scale = if set.width() > 0.0 { set.width() } else { c.abs().max(1.0) };
    (c, h, eps * scale)
}

/// `f(θ) = ((θ − c)² − h²)/((h + δ)² − h²)`: `≤ 0` on the nominal set, `1`
/// on the inflated boundary.
fn proj_level(value: f64, set: &Interval, eps: f64) -> f64 {
    let (c, h, d) = inflation(set, eps);
    ((value - c).powi(2) - h * h) / ((h + d).powi(2) - h * h)
}

fn proj_unchecked(value: f64, dir: f64, set: &Interval, eps: f64) -> f64 {
    let f = proj_level(value, set, eps);
    let outward = dir * (value - set.mid()) > 0.0;
    if f > 0.0 && outward {
        dir * (1.0 - f).max(0.0)
    } else {
        dir
    }
}

/// Smooth projection of a rate `direction` for a scalar estimate bounded by
/// `set`, with an inflation layer of `eps · width`.
pub fn projection(estimate: f64, direction: f64, set: &Interval, eps: f64) -> Result<f64, L1Error> {
    let (c, h, d) = inflation(set, eps);
    if !((estimate - c).abs() <= (h + d) * (1.0 + 1e-12)) {
        return Err(L1Error::ProjectionDomain { name: "estimate", value: estimate, lo: c - h - d, hi: c + h + d });
    }
    Ok(proj_unchecked(estimate, direction, set, eps))
}

/// Moves `value` by the increment `delta` under the projection flow with the
/// drive held constant: free motion inside the nominal set and the exact
/// `tanh` solution of `u̇ ∝ (1 − f(u))` in the layer, so the result never
/// leaves the inflated set.
fn layer_map(value: f64, delta: f64, set: &Interval, eps: f64) -> f64 {
    if delta == 0.0 {
        return value;
    }
    let (c, h, d) = inflation(set, eps);
    let big = h + d;
    let den = big * big - h * h;
    let s = delta.signum();
    let a = s * (value - c);
    let m = delta.abs();
    let a1 = if a + m <= h {
        a + m
    } else {
        let rest = m - (h - a).max(0.0);
        let phi = (a.max(h) / big).min(1.0).atanh();
        big * (phi + rest * big / den).tanh()
    };
    c + s * a1
}

fn clamp_inflated(value: f64, set: &Interval, eps: f64) -> f64 {
    let (c, h, d) = inflation(set, eps);
    value.clamp(c - h - d, c + h + d)
}

/// Unprojected rates `Γ(−x̃ᵀPb_m)(u_ad, x, 1)`.
fn raw_rates(cfg: &L1Config, st: &AdaptiveState, x: &Vector4<f64>, x_tilde: &Vector4<f64>) -> (f64, Vector4<f64>, f64) {
    let e = -cfg.gamma * x_tilde.dot(&(cfg.p * cfg.b_m));
    (e * st.u_ad, x * e, e)
}

fn check_domain(cfg: &L1Config, st: &AdaptiveState) -> Result<(), L1Error> {
    let s = cfg.sets();
    projection(st.w_hat, 0.0, &s.omega, s.eps).map_err(|e| rename(e, "w_hat"))?;
    for i in 0..4 {
        projection(st.theta_hat[i], 0.0, &s.theta[i], s.eps).map_err(|e| rename(e, "theta_hat"))?;
    }
    projection(st.sigma_hat, 0.0, &s.sigma, s.eps).map_err(|e| rename(e, "sigma_hat"))?;
    Ok(())
}

fn rename(e: L1Error, name: &'static str) -> L1Error {
    match e {
        L1Error::ProjectionDomain { value, lo, hi, .. } => L1Error::ProjectionDomain { name, value, lo, hi },
        other => other,
    }
}

/// One RK4 step of the predictor with `x` and `u_ad` held over the step.
pub fn predictor_step(st: &AdaptiveState, cfg: &L1Config, x: &Vector4<f64>, u_ad: f64, dt: f64) -> Result<Vector4<f64>, L1Error> {
    if !(dt > 0.0) {
        return Err(L1Error::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let eta = st.w_hat * u_ad + st.theta_hat.dot(x) + st.sigma_hat;
    let forcing = cfg.b_m * eta;
    let next = rk4(&st.x_hat, dt, |xh| cfg.a_m * xh + forcing);
    if !next.iter().all(|v| v.is_finite()) {
        return Err(L1Error::Divergence { t: f64::NAN });
    }
    Ok(next)
}

/// One step of the three projected adaptation laws with `x̃ = x̂ − x`, `x`
/// and `u_ad` frozen.
pub fn adaptation_step(
    st: &AdaptiveState,
    cfg: &L1Config,
    x: &Vector4<f64>,
    u_ad: f64,
    dt: f64,
) -> Result<(f64, Vector4<f64>, f64), L1Error> {
    check_domain(cfg, st)?;
    if !(dt > 0.0) {
        return Err(L1Error::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let sets = cfg.sets();
    let (wd, td, sd) = raw_rates(cfg, &AdaptiveState { u_ad, ..*st }, x, &(st.x_hat - x));
    let w = layer_map(st.w_hat, wd * dt, &sets.omega, sets.eps);
    let theta = Vector4::from_fn(|i, _| layer_map(st.theta_hat[i], td[i] * dt, &sets.theta[i], sets.eps));
    let sigma = layer_map(st.sigma_hat, sd * dt, &sets.sigma, sets.eps);
    Ok((w, theta, sigma))
}

/// `u̇_int = −k(η̂ − k_g r)`, `u_ad = u_int`, with `η̂` held over the step.
pub fn control_step(st: &AdaptiveState, cfg: &L1Config, x: &Vector4<f64>, r: f64, dt: f64) -> Result<f64, L1Error> {
    if !(dt > 0.0) {
        return Err(L1Error::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let next = st.u_int - cfg.k * (st.eta_hat(x) - cfg.k_g * r) * dt;
    if !next.is_finite() {
        return Err(L1Error::Divergence { t: f64::NAN });
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopOptions {
    pub duration: f64,
    pub dt: f64,
    pub x0: [f64; 4],
    /// Store one sample every this many integration steps.
    pub record_every: usize,
}

impl Default for ClosedLoopOptions {
    fn default() -> Self {
        Self { duration: 30.0, dt: 1e-4, x0: [0.2, 0.0, 0.02, 0.0], record_every: 100 }
    }
}

impl ClosedLoopOptions {
    pub fn validate(&self) -> Result<(), L1Error> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(L1Error::InvalidConfig(format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.dt > 0.0 && self.dt <= self.duration) {
            return Err(L1Error::InvalidConfig(format!("dt must lie in (0, duration], got {}", self.dt)));
        }
        if self.record_every == 0 {
            return Err(L1Error::InvalidConfig("record_every must be at least 1".into()));
        }
        if !self.x0.iter().all(|v| v.is_finite()) {
            return Err(L1Error::InvalidConfig("initial state is not finite".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: f64,
    pub x: ErrorState,
    pub u: f64,
    pub u_m: f64,
    pub u_ad: f64,
    pub w_hat: f64,
    pub theta_hat: [f64; 4],
    pub sigma_hat: f64,
    /// Road radius at the vehicle position, `None` on a straight.
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LoopMetrics {
    pub max_abs_x1: f64,
    pub max_abs_x2: f64,
    pub rms_x1: f64,
    pub rms_x2: f64,
    pub max_abs_u: f64,
    /// Largest normalized projection level seen at any step.
    pub max_projection_level: f64,
    /// Every step kept the estimates inside their inflated sets.
    pub projection_ok: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub samples: Vec<TraceSample>,
    pub metrics: LoopMetrics,
}

type Joint = SVector<f64, 15>;

fn pack(x: &Vector4<f64>, st: &AdaptiveState) -> Joint {
    let mut z = Joint::zeros();
    z.fixed_rows_mut::<4>(0).copy_from(x);
    z.fixed_rows_mut::<4>(4).copy_from(&st.x_hat);
    z[8] = st.w_hat;
    z.fixed_rows_mut::<4>(9).copy_from(&st.theta_hat);
    z[13] = st.sigma_hat;
    z[14] = st.u_int;
    z
}

fn unpack(z: &Joint) -> (Vector4<f64>, AdaptiveState) {
    let x = z.fixed_rows::<4>(0).into_owned();
    let st = AdaptiveState {
        x_hat: z.fixed_rows::<4>(4).into_owned(),
        w_hat: z[8],
        theta_hat: z.fixed_rows::<4>(9).into_owned(),
        sigma_hat: z[13],
        u_int: z[14],
        u_ad: z[14],
    };
    (x, st)
}

/// One RK4 step of plant, predictor, estimates and control integrator. The
/// estimate increments are then carried through the projection layer by
/// [`layer_map`]. `yaw` holds the desired yaw rate at `t`, `t + h/2`, `t + h`.
fn joint_step(plant: &LateralMatrices, cfg: &L1Config, sets: &ParamSets, z: &Joint, h: f64, yaw: [f64; 3]) -> Joint {
    let rhs = |z: &Joint, yaw_rate: f64| -> Joint {
        let (x, mut st) = unpack(z);
        st.w_hat = clamp_inflated(st.w_hat, &sets.omega, sets.eps);
        st.theta_hat = Vector4::from_fn(|i, _| clamp_inflated(st.theta_hat[i], &sets.theta[i], sets.eps));
        st.sigma_hat = clamp_inflated(st.sigma_hat, &sets.sigma, sets.eps);
        let u = -cfg.k_m.dot(&x) + st.u_ad;
        let eta = st.eta_hat(&x);
        let (wd, td, sd) = raw_rates(cfg, &st, &x, &(st.x_hat - x));
        let mut d = Joint::zeros();
        d.fixed_rows_mut::<4>(0).copy_from(&(plant.a * x + plant.b * u + plant.g * yaw_rate));
        d.fixed_rows_mut::<4>(4).copy_from(&(cfg.a_m * st.x_hat + cfg.b_m * eta));
        d[8] = wd;
        d.fixed_rows_mut::<4>(9).copy_from(&td);
        d[13] = sd;
        d[14] = -cfg.k * eta;
        d
    };
    let k1 = rhs(z, yaw[0]);
    let k2 = rhs(&(z + k1 * (h / 2.0)), yaw[1]);
    let k3 = rhs(&(z + k2 * (h / 2.0)), yaw[1]);
    let k4 = rhs(&(z + k3 * h), yaw[2]);
    let mut next = z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    next[8] = layer_map(z[8], next[8] - z[8], &sets.omega, sets.eps);
    for i in 0..4 {
        next[9 + i] = layer_map(z[9 + i], next[9 + i] - z[9 + i], &sets.theta[i], sets.eps);
    }
    next[13] = layer_map(z[13], next[13] - z[13], &sets.sigma, sets.eps);
    next
}

#[derive(Debug, Clone)]
struct Tally {
    sum_x1: f64,
    sum_x2: f64,
    n: usize,
    m: LoopMetrics,
}

impl Tally {
    fn new() -> Self {
        Self { sum_x1: 0.0, sum_x2: 0.0, n: 0, m: LoopMetrics { projection_ok: true, ..Default::default() } }
    }

    fn add(&mut self, x: &Vector4<f64>, u: f64) {
        self.m.max_abs_x1 = self.m.max_abs_x1.max(x[0].abs());
        self.m.max_abs_x2 = self.m.max_abs_x2.max(x[2].abs());
        self.m.max_abs_u = self.m.max_abs_u.max(u.abs());
        self.sum_x1 += x[0] * x[0];
        self.sum_x2 += x[2] * x[2];
        self.n += 1;
    }

    fn finish(mut self, steps: usize) -> LoopMetrics {
        self.m.rms_x1 = (self.sum_x1 / self.n as f64).sqrt();
        self.m.rms_x2 = (self.sum_x2 / self.n as f64).sqrt();
        self.m.steps = steps;
        self.m
    }
}

/// Stepwise closed-loop simulation, for callers that retune the filter gain
/// between segments.
#[derive(Debug, Clone)]
pub struct ClosedLoopSim<'a> {
    plant: LateralMatrices,
    cfg: L1Config,
    profile: &'a RoadProfile,
    opts: ClosedLoopOptions,
    sets: ParamSets,
    z: Joint,
    n: usize,
    steps: usize,
    samples: Vec<TraceSample>,
    tally: Tally,
}

impl<'a> ClosedLoopSim<'a> {
    pub fn new(plant: &LateralMatrices, cfg: &L1Config, profile: &'a RoadProfile, opts: &ClosedLoopOptions) -> Result<Self, L1Error> {
        cfg.validate()?;
        opts.validate()?;
        let x0 = Vector4::from(opts.x0);
        let st0 = AdaptiveState::initial(&x0);
        check_domain(cfg, &st0)?;
        let mut sim = Self {
            plant: *plant,
            cfg: *cfg,
            profile,
            opts: *opts,
            sets: cfg.sets(),
            z: pack(&x0, &st0),
            n: 0,
            steps: opts.steps(),
            samples: Vec::new(),
            tally: Tally::new(),
        };
        sim.samples.push(sim.sample(0.0));
        sim.tally.add(&x0, 0.0);
        Ok(sim)
    }

    pub fn time(&self) -> f64 {
        self.n as f64 * self.opts.dt
    }

    pub fn done(&self) -> bool {
        self.n >= self.steps
    }

    pub fn state(&self) -> (Vector4<f64>, AdaptiveState) {
        unpack(&self.z)
    }

    pub fn config(&self) -> &L1Config {
        &self.cfg
    }

    pub fn set_filter_gain(&mut self, k: f64) -> Result<(), L1Error> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(L1Error::InvalidConfig(format!("filter gain must be positive, got {k}")));
        }
        self.cfg.k = k;
        Ok(())
    }

    fn sample(&self, t: f64) -> TraceSample {
        let (x, st) = unpack(&self.z);
        let u_m = -self.cfg.k_m.dot(&x);
        TraceSample {
            t,
            x: ErrorState::from_vector(&x),
            u: u_m + st.u_ad,
            u_m,
            u_ad: st.u_ad,
            w_hat: st.w_hat,
            theta_hat: st.theta_hat.into(),
            sigma_hat: st.sigma_hat,
            radius: self.profile.radius(self.plant.v * t),
        }
    }

    /// Advances until `t_end` or the end of the run, whichever is first.
    pub fn advance_to(&mut self, t_end: f64) -> Result<(), L1Error> {
        let v = self.plant.v;
        let dt = self.opts.dt;
        let yaw = |t: f64| self.profile.curvature(v * t).map(|c| v * c);
        let last = ((t_end / dt).round() as usize).min(self.steps);
        while self.n < last {
            let t = self.n as f64 * dt;
            let y = [yaw(t)?, yaw(t + 0.5 * dt)?, yaw(t + dt)?];
            self.z = joint_step(&self.plant, &self.cfg, &self.sets, &self.z, dt, y);
            self.n += 1;
            let t_next = self.n as f64 * dt;
            let (x, st) = unpack(&self.z);
            if !self.z.iter().all(|v| v.is_finite()) || x.norm() > DIVERGENCE_NORM {
                return Err(L1Error::Divergence { t: t_next });
            }
            let level = self.sets.level(st.w_hat, &st.theta_hat, st.sigma_hat);
            self.tally.m.max_projection_level = self.tally.m.max_projection_level.max(level);
            if level > 1.0 + 1e-9 {
                self.tally.m.projection_ok = false;
            }
            self.tally.add(&x, -self.cfg.k_m.dot(&x) + st.u_ad);
            if self.n.is_multiple_of(self.opts.record_every) || self.n == self.steps {
                let s = self.sample(t_next);
                self.samples.push(s);
            }
        }
        Ok(())
    }

    /// Metrics over the steps taken so far.
    pub fn metrics(&self) -> LoopMetrics {
        self.tally.clone().finish(self.n)
    }

    pub fn finish(self) -> ClosedLoopTrace {
        let metrics = self.tally.finish(self.n);
        ClosedLoopTrace { samples: self.samples, metrics }
    }
}

/// Simulates the plant under `u = −k_mᵀx + u_ad` with `r = 0`, travelling
/// the road at the plant velocity. Plant, predictor, estimates and the
/// control integrator are advanced jointly by RK4.
pub fn closed_loop(
    plant: &LateralMatrices,
    cfg: &L1Config,
    profile: &RoadProfile,
    opts: &ClosedLoopOptions,
) -> Result<ClosedLoopTrace, L1Error> {
    let mut sim = ClosedLoopSim::new(plant, cfg, profile, opts)?;
    sim.advance_to(opts.duration)?;
    Ok(sim.finish())
}

/// Known-parameter counterpart of [`closed_loop`]: the filter acts on the
/// true `η = w u_ad + θᵀx + σ(t)` instead of its estimate.
pub fn reference_loop(
    plant: &LateralMatrices,
    cfg: &L1Config,
    profile: &RoadProfile,
    opts: &ClosedLoopOptions,
    w: f64,
    theta: &Vector4<f64>,
    sigma: impl Fn(f64) -> f64,
) -> Result<ClosedLoopTrace, L1Error> {
    opts.validate()?;
    let v = plant.v;
    let yaw = |t: f64| profile.curvature(v * t).map(|c| v * c);
    let rhs = |z: &SVector<f64, 5>, yaw_rate: f64, sig: f64| -> SVector<f64, 5> {
        let x = z.fixed_rows::<4>(0).into_owned();
        let u_ad = z[4];
        let u = -cfg.k_m.dot(&x) + u_ad;
        let x_dot = plant.a * x + plant.b * u + plant.g * yaw_rate;
        let eta = w * u_ad + theta.dot(&x) + sig;
        SVector::<f64, 5>::new(x_dot[0], x_dot[1], x_dot[2], x_dot[3], -cfg.k * eta)
    };
    let steps = opts.steps();
    let h = opts.dt;
    let mut z = SVector::<f64, 5>::new(opts.x0[0], opts.x0[1], opts.x0[2], opts.x0[3], 0.0);
    let sample = |t: f64, z: &SVector<f64, 5>| {
        let x = z.fixed_rows::<4>(0).into_owned();
        let u_m = -cfg.k_m.dot(&x);
        TraceSample {
            t,
            x: ErrorState::from_vector(&x),
            u: u_m + z[4],
            u_m,
            u_ad: z[4],
            w_hat: w,
            theta_hat: (*theta).into(),
            sigma_hat: sigma(t),
            radius: profile.radius(v * t),
        }
    };
    let mut samples = vec![sample(0.0, &z)];
    let mut tally = Tally::new();
    tally.add(&z.fixed_rows::<4>(0).into_owned(), 0.0);
    for n in 0..steps {
        let t = n as f64 * h;
        let (y0, ym, y1) = (yaw(t)?, yaw(t + h / 2.0)?, yaw(t + h)?);
        let (s0, sm, s1) = (sigma(t), sigma(t + h / 2.0), sigma(t + h));
        let k1 = rhs(&z, y0, s0);
        let k2 = rhs(&(z + k1 * (h / 2.0)), ym, sm);
        let k3 = rhs(&(z + k2 * (h / 2.0)), ym, sm);
        let k4 = rhs(&(z + k3 * h), y1, s1);
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let x = z.fixed_rows::<4>(0).into_owned();
        if !z.iter().all(|v| v.is_finite()) || x.norm() > DIVERGENCE_NORM {
            return Err(L1Error::Divergence { t: t + h });
        }
        tally.add(&x, -cfg.k_m.dot(&x) + z[4]);
        if (n + 1) % opts.record_every == 0 || n + 1 == steps {
            samples.push(sample((n + 1) as f64 * h, &z));
        }
    }
    let mut metrics = tally.finish(steps);
    metrics.projection_ok = true;
    Ok(ClosedLoopTrace { samples, metrics })
}
