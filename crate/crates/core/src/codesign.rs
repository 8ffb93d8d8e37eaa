//! Uncertainty bounds from a stiffness prior, common-Lyapunov gain design
//! over a velocity range, L1-norm evaluation, and the joint choice of filter
//! bandwidth and nominal velocity.

use nalgebra::{DMatrix, DVector, Matrix4, Matrix5, RowVector4, Vector4, Vector5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frrf::PriorDistribution;
use crate::linalg;
use crate::vehicle::{check_assumptions, error_matrices, RoadProfile, VehicleError, VehicleParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodesignError {
    #[error("prior N({mean}, {variance}) gives a non-positive stiffness bound")]
    InvalidPrior { mean: f64, variance: f64 },
    #[error("design precondition violated: {0}")]
    Precondition(String),
    #[error("infeasible design: {reason} (best residual {best_residual:e})")]
    Infeasible { reason: String, best_residual: f64 },
    #[error("realization is not stable (spectral abscissa {abscissa})")]
    DivergentNorm { abscissa: f64 },
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
}

/// Closed real interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Self {
        Self { lo: a.min(b), hi: a.max(b) }
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn abs_max(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn contains(&self, x: f64, tol: f64) -> bool {
        x >= self.lo - tol && x <= self.hi + tol
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::new(self.lo * c, self.hi * c)
    }

    pub fn add(&self, o: &Self) -> Self {
        Self { lo: self.lo + o.lo, hi: self.hi + o.hi }
    }

    /// Interval quotient; `o` must not contain zero.
    pub fn div(&self, o: &Self) -> Self {
        let c = [self.lo / o.lo, self.lo / o.hi, self.hi / o.lo, self.hi / o.hi];
        Self { lo: c.iter().cloned().fold(f64::INFINITY, f64::min), hi: c.iter().cloned().fold(f64::NEG_INFINITY, f64::max) }
    }

    /// `n` evenly spaced points including both ends (`n = 1` gives the midpoint).
    pub fn grid(&self, n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![self.mid()],
            _ => (0..n).map(|i| self.lo + self.width() * i as f64 / (n - 1) as f64).collect(),
        }
    }
}

/// 95% band of a stiffness prior.
pub fn confidence_interval(prior: &PriorDistribution) -> Result<Interval, CodesignError> {
    if !(prior.variance >= 0.0) || !prior.mean.is_finite() {
        return Err(CodesignError::InvalidPrior { mean: prior.mean, variance: prior.variance });
    }
    let (lo, hi) = prior.interval();
    if lo <= 0.0 {
        return Err(CodesignError::InvalidPrior { mean: prior.mean, variance: prior.variance });
    }
    Ok(Interval { lo, hi })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBounds {
    pub v: f64,
    pub omega: Interval,
    /// Already divided by `V`.
    pub theta: [Interval; 4],
    pub delta: f64,
    pub d_sigma: f64,
    /// `max_{θ∈Θ} ‖θ‖₁`.
    pub l: f64,
    pub xi: Interval,
}

impl UncertaintyBounds {
    pub fn contains_theta(&self, theta: &Vector4<f64>, tol: f64) -> bool {
        (0..4).all(|i| self.theta[i].contains(theta[i], tol))
    }
}

/// Nominal `(Ĉ_f, Ĉ_r)` and their 95% bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessBox {
    pub c_f_hat: f64,
    pub c_r_hat: f64,
    pub c_f: Interval,
    pub c_r: Interval,
}

impl StiffnessBox {
    pub fn from_priors(prior_f: &PriorDistribution, prior_r: &PriorDistribution) -> Result<Self, CodesignError> {
        Ok(Self { c_f_hat: prior_f.mean, c_r_hat: prior_r.mean, c_f: confidence_interval(prior_f)?, c_r: confidence_interval(prior_r)? })
    }
}

/// `b_m† = [0, m/(4Ĉ_f), 0, I_z/(4Ĉ_f l_f)]`.
pub fn b_m_pinv(c_f_hat: f64, p: &VehicleParams) -> RowVector4<f64> {
    RowVector4::new(0.0, p.m / (4.0 * c_f_hat), 0.0, p.i_z / (4.0 * c_f_hat * p.l_f))
}

fn curvature_load(c_f: f64, c_r: f64, v: f64, p: &VehicleParams) -> f64 {
    2.0 * c_f * p.l_f + c_r * p.l_r * (p.l_r / p.l_f - 1.0) + p.m * v * v / 2.0
}

/// Matched parameter error `θ` for true `(C_f, C_r)`.
pub fn theta_true(c_f: f64, c_r: f64, nominal: &StiffnessBox, v: f64, k_m: &Vector4<f64>, p: &VehicleParams) -> Vector4<f64> {
    let w = c_f / nominal.c_f_hat;
    let kappa = p.i_z * p.l_r / p.l_f - p.m;
    let x = (-(p.m + p.i_z) * (c_f - nominal.c_f_hat) + kappa * (c_r - nominal.c_r_hat)) / (p.m * nominal.c_f_hat);
    let s = x / (2.0 * v * w);
    Vector4::new(0.0, s, 0.0, s) + k_m * (1.0 / w - 1.0)
}

/// Matched disturbance `σ` for true `(C_f, C_r)` at road radius `r`.
pub fn sigma_true(c_f: f64, c_r: f64, c_f_hat: f64, v: f64, r: f64, p: &VehicleParams) -> f64 {
    -curvature_load(c_f, c_r, v, p) / (2.0 * c_f_hat * r)
}

/// `dσ/dt` given `Ṙ`.
pub fn sigma_rate_true(c_f: f64, c_r: f64, c_f_hat: f64, v: f64, r: f64, r_dot: f64, p: &VehicleParams) -> f64 {
    r_dot * curvature_load(c_f, c_r, v, p) / (2.0 * c_f_hat * r * r)
}

pub fn uncertainty_bounds(
    prior_f: &PriorDistribution,
    prior_r: &PriorDistribution,
    v: f64,
    k_m: &Vector4<f64>,
    p: &VehicleParams,
    profile: &RoadProfile,
) -> Result<UncertaintyBounds, CodesignError> {
    let nominal = StiffnessBox::from_priors(prior_f, prior_r)?;
    bounds_for_box(&nominal, v, k_m, p, profile)
}

pub fn bounds_for_box(
    nb: &StiffnessBox,
    v: f64,
    k_m: &Vector4<f64>,
    p: &VehicleParams,
    profile: &RoadProfile,
) -> Result<UncertaintyBounds, CodesignError> {
    p.validate()?;
    if !(v > 0.0) {
        return Err(CodesignError::Precondition(format!("velocity must be positive, got {v}")));
    }
    let rep = check_assumptions(p, profile);
    if !rep.all_ok() {
        return Err(CodesignError::Precondition(format!("vehicle/road assumptions fail: {rep:?}")));
    }
    let (cf_hat, cr_hat) = (nb.c_f_hat, nb.c_r_hat);
    let omega = Interval { lo: nb.c_f.lo / cf_hat, hi: nb.c_f.hi / cf_hat };
    let xi = Interval::new(cf_hat / nb.c_f.hi - 1.0, cf_hat / nb.c_f.lo - 1.0);

    // (C_f − Ĉ_f)/C_f is monotone in C_f; (C_r − Ĉ_r)/C_f is a plain quotient.
    let dcf_over_cf = Interval::new(1.0 - cf_hat / nb.c_f.lo, 1.0 - cf_hat / nb.c_f.hi);
    let dcr_over_cf = Interval::new(nb.c_r.lo - cr_hat, nb.c_r.hi - cr_hat).div(&nb.c_f);
    let kappa = p.moment_margin();
    let shared = dcf_over_cf.scale(-(p.m + p.i_z) / (2.0 * p.m)).add(&dcr_over_cf.scale(kappa / (2.0 * p.m))).scale(1.0 / v);
    let theta = [xi.scale(k_m[0]), shared.add(&xi.scale(k_m[1])), xi.scale(k_m[2]), shared.add(&xi.scale(k_m[3]))];
    let load = curvature_load(nb.c_f.hi, nb.c_r.hi, v, p);
    let r_low = profile.lower_radius();
    let delta = load / (2.0 * cf_hat * r_low);
    let d_sigma = profile.rdot_bound(v) * load / (2.0 * cf_hat);
    let l = theta.iter().map(Interval::abs_max).sum();
    Ok(UncertaintyBounds { v, omega, theta, delta, d_sigma, l, xi })
}

/// `A_m(V) = A(V, Ĉ_f, Ĉ_r) − b_m k_mᵀ` and `b_m = b(Ĉ_f)`.
pub fn nominal_system(
    v: f64,
    c_f_hat: f64,
    c_r_hat: f64,
    k_m: &Vector4<f64>,
    p: &VehicleParams,
) -> Result<(Matrix4<f64>, Vector4<f64>), CodesignError> {
    let mats = error_matrices(v, c_f_hat, c_r_hat, p)?;
    Ok((mats.a - mats.b * k_m.transpose(), mats.b))
}

/// Weight with `A_m(V) = α A_m(V_min) + (1 − α) A_m(V_max)`.
pub fn alpha(v: f64, v_min: f64, v_max: f64) -> f64 {
    (v_min * v_max / v - v_min) / (v_max - v_min)
}

/// Ackermann pole placement: `k` such that `A − b kᵀ` has the given real poles.
pub fn place_poles(a: &Matrix4<f64>, b: &Vector4<f64>, poles: &[f64; 4]) -> Result<Vector4<f64>, CodesignError> {
    let ctrb = Matrix4::from_columns(&[*b, a * b, a * a * b, a * a * a * b]);
    let cond = linalg::condition_number(&DMatrix::from_column_slice(4, 4, ctrb.as_slice()));
    if !(cond < 1e14) {
        return Err(CodesignError::Precondition(format!("pair (A, b) is not controllable (cond {cond:e})")));
    }
    let inv = ctrb.try_inverse().ok_or_else(|| CodesignError::Precondition("controllability matrix singular".into()))?;
    let mut phi = Matrix4::identity();
    for &pole in poles {
        phi *= a - Matrix4::identity() * pole;
    }
    Ok((inv.row(3) * phi).transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCertificate {
    pub p_min_eig: f64,
    /// Largest eigenvalue of `A_mᵀP + P A_m` at `V_min`.
    pub residual_min: f64,
    /// Same at `V_max`.
    pub residual_max: f64,
    pub tol: f64,
    pub pass: bool,
}

impl LyapunovCertificate {
    pub fn worst_residual(&self) -> f64 {
        self.residual_min.max(self.residual_max)
    }
}

fn to_d4(m: &Matrix4<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(4, 4, m.as_slice())
}

/// Largest eigenvalue of `Aᵀ P + P A`.
pub fn lyapunov_residual(p: &Matrix4<f64>, a: &Matrix4<f64>) -> f64 {
    let r = a.transpose() * p + p * a;
    linalg::sym_eigen_range(&to_d4(&((r + r.transpose()) * 0.5))).1
}

pub fn verify_common_lyapunov(p: &Matrix4<f64>, a_min: &Matrix4<f64>, a_max: &Matrix4<f64>, tol: f64) -> LyapunovCertificate {
    let sym = (p + p.transpose()) * 0.5;
    let p_min_eig = linalg::sym_eigen_range(&to_d4(&sym)).0;
    let residual_min = lyapunov_residual(&sym, a_min);
    let residual_max = lyapunov_residual(&sym, a_max);
    let pass = p_min_eig > 0.0 && residual_min < -tol && residual_max < -tol;
    LyapunovCertificate { p_min_eig, residual_min, residual_max, tol, pass }
}

fn lyap4(a: &Matrix4<f64>, q: &Matrix4<f64>) -> Option<Matrix4<f64>> {
    let p = linalg::solve_lyapunov(&to_d4(a), &to_d4(q))?;
    Some(Matrix4::from_column_slice(p.as_slice()))
}

/// Searches a `P` common to both endpoint matrices. Candidates are Lyapunov
/// solutions at convex blends of the endpoints and blends of the endpoint
/// solutions, visited in van der Corput order over the blend weight; if none
/// passes, the margin is maximized directly.
pub fn common_lyapunov_search(
    a_min: &Matrix4<f64>,
    a_max: &Matrix4<f64>,
    tol: f64,
    rounds: usize,
) -> Result<(Matrix4<f64>, LyapunovCertificate), CodesignError> {
    let q = Matrix4::identity();
    let p_lo = lyap4(a_min, &q);
    let p_hi = lyap4(a_max, &q);
    let mut best = f64::INFINITY;
    for r in 0..rounds.max(1) {
        let t = van_der_corput(r);
        let blend = a_min * t + a_max * (1.0 - t);
        let mut cands = Vec::with_capacity(2);
        cands.extend(lyap4(&blend, &q));
        if let (Some(lo), Some(hi)) = (&p_lo, &p_hi) {
            cands.push(lo * t + hi * (1.0 - t));
        }
        for p in cands {
            let p_scaled = p / linalg::max_abs(&to_d4(&p)).max(f64::MIN_POSITIVE);
            let cert = verify_common_lyapunov(&p, a_min, a_max, tol);
            if cert.pass {
                return Ok((p, cert));
            }
            let scaled = verify_common_lyapunov(&p_scaled, a_min, a_max, tol);
            let score = if scaled.p_min_eig > 0.0 { scaled.worst_residual() } else { f64::INFINITY };
            best = best.min(score);
        }
    }
    // Fall back to maximizing the common margin directly.
    if let Some((p, t)) = linalg::common_lyapunov_margin(&[to_d4(a_min), to_d4(a_max)]) {
        if t > 0.0 {
            // scale so that both endpoint forms are ⪯ −I
            let p = Matrix4::from_column_slice(p.as_slice()) / t;
            let cert = verify_common_lyapunov(&p, a_min, a_max, tol);
            if cert.pass {
                return Ok((p, cert));
            }
        }
        best = best.min(-t);
    }
    Err(CodesignError::Infeasible { reason: "no common Lyapunov matrix found at the velocity endpoints".into(), best_residual: best })
}

/// 0, 1, 1/2, 1/4, 3/4, 1/8, ...
fn van_der_corput(r: usize) -> f64 {
    match r {
        0 => 0.0,
        1 => 1.0,
        _ => {
            let mut n = r - 1;
            let (mut x, mut base) = (0.0, 0.5);
            while n > 0 {
                if n & 1 == 1 {
                    x += base;
                }
                n >>= 1;
                base *= 0.5;
            }
            x
        }
    }
}

pub const DEFAULT_POLES: [f64; 4] = [-2.0, -2.5, -3.0, -3.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainDesign {
    pub k_m: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub certificate: LyapunovCertificate,
}

/// Pole placement at the mid velocity followed by a common-Lyapunov search.
pub fn design_km_p(
    c_f_hat: f64,
    c_r_hat: f64,
    v_min: f64,
    v_max: f64,
    poles: &[f64; 4],
    p: &VehicleParams,
) -> Result<GainDesign, CodesignError> {
    if !(v_min > 0.0 && v_min < v_max) {
        return Err(CodesignError::Precondition(format!("need 0 < V_min < V_max, got [{v_min}, {v_max}]")));
    }
    let mid = error_matrices(0.5 * (v_min + v_max), c_f_hat, c_r_hat, p)?;
    let k_m = place_poles(&mid.a, &mid.b, poles)?;
    design_p_for_gain(c_f_hat, c_r_hat, v_min, v_max, &k_m, p)
}

/// Finds `P` for a given `k_m`.
pub fn design_p_for_gain(
    c_f_hat: f64,
    c_r_hat: f64,
    v_min: f64,
    v_max: f64,
    k_m: &Vector4<f64>,
    p: &VehicleParams,
) -> Result<GainDesign, CodesignError> {
    let (a_min, _) = nominal_system(v_min, c_f_hat, c_r_hat, k_m, p)?;
    let (a_max, _) = nominal_system(v_max, c_f_hat, c_r_hat, k_m, p)?;
    let (pm, certificate) = common_lyapunov_search(&a_min, &a_max, 1e-6, 50)?;
    Ok(GainDesign { k_m: *k_m, p: pm, certificate })
}

/// `∫₀^∞ |y_i(t)| dt` for each output row of `ẋ = F x`, `x(0) = B`, `y = C x`.
///
/// Trapezoidal quadrature on exact matrix-exponential samples, out to
/// `horizon` (default `50 / |abscissa|`), plus a tail estimate from the decay
/// rate.
pub fn impulse_l1_norms(
    f: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DMatrix<f64>,
    dt: f64,
    horizon: Option<f64>,
) -> Result<Vec<f64>, CodesignError> {
    let abscissa = linalg::spectral_abscissa(f);
    if !(abscissa < 0.0) {
        return Err(CodesignError::DivergentNorm { abscissa });
    }
    let horizon = horizon.unwrap_or(50.0 / abscissa.abs());
    let steps = (horizon / dt).ceil() as usize;
    let phi = (f * dt).exp();
    let mut x = b.clone();
    let mut prev = (c * &x).abs();
    let mut acc = DVector::zeros(c.nrows());
    for _ in 0..steps {
        x = &phi * &x;
        let cur = (c * &x).abs();
        acc += (&prev + &cur) * (0.5 * dt);
        prev = cur;
    }
    let tail = (c * &x).abs() / abscissa.abs();
    Ok((acc + tail).iter().cloned().collect())
}

/// 5-state realization of `G(s) = (sI − A_m)⁻¹ b_m · s/(s + wk)`.
pub fn g_realization(a_m: &Matrix4<f64>, b_m: &Vector4<f64>, k: f64, w: f64) -> (Matrix5<f64>, Vector5<f64>) {
    let mut f = Matrix5::zeros();
    f.fixed_view_mut::<4, 4>(0, 0).copy_from(a_m);
    f.fixed_view_mut::<4, 1>(0, 4).copy_from(&(b_m * (-w * k)));
    f[(4, 4)] = -w * k;
    let mut b = Vector5::zeros();
    b.fixed_rows_mut::<4>(0).copy_from(b_m);
    b[4] = 1.0;
    (f, b)
}

/// `‖G(s)‖_L1`: the largest row norm.
pub fn l1_norm(a_m: &Matrix4<f64>, b_m: &Vector4<f64>, k: f64, w: f64, horizon: Option<f64>, dt: f64) -> Result<f64, CodesignError> {
    let (f, b) = g_realization(a_m, b_m, k, w);
    let fd = DMatrix::from_column_slice(5, 5, f.as_slice());
    let bd = DVector::from_column_slice(b.as_slice());
    let c = DMatrix::identity(4, 5);
    Ok(impulse_l1_norms(&fd, &bd, &c, dt, horizon)?.into_iter().fold(0.0, f64::max))
}

/// `A_g` for one `(θ, w)`.
pub fn a_g(a_m: &Matrix4<f64>, b_m: &Vector4<f64>, k: f64, theta: &Vector4<f64>, w: f64) -> Matrix5<f64> {
    let mut m = Matrix5::zeros();
    m.fixed_view_mut::<4, 4>(0, 0).copy_from(&(a_m + b_m * theta.transpose()));
    m.fixed_view_mut::<4, 1>(0, 4).copy_from(&(b_m * w));
    m.fixed_view_mut::<1, 4>(4, 0).copy_from(&(theta.transpose() * -k));
    m[(4, 4)] = -k * w;
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgCertificate {
    pub pass: bool,
    pub worst_abscissa: f64,
    pub worst_theta: Vector4<f64>,
    pub worst_w: f64,
    pub samples: usize,
    /// Vertices plus a uniform grid; not a proof over the whole box.
    pub grid_density: usize,
}

fn abscissa5(m: &Matrix5<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Samples `A_g` over the box `Θ × Ω` (vertices and a uniform grid).
pub fn check_ag_hurwitz(
    a_m: &Matrix4<f64>,
    b_m: &Vector4<f64>,
    k: f64,
    theta: &[Interval; 4],
    omega: &Interval,
    grid_density: usize,
    tol: f64,
) -> AgCertificate {
    let axes: Vec<Vec<f64>> = theta
        .iter()
        .chain(std::iter::once(omega))
        .map(|iv| {
            let mut pts = iv.grid(grid_density.max(2));
            pts.dedup();
            pts
        })
        .collect();
    let total: usize = axes.iter().map(Vec::len).product();
    let eval = |idx: usize| {
        let mut rem = idx;
        let mut pick = [0.0; 5];
        for (d, axis) in axes.iter().enumerate() {
            pick[d] = axis[rem % axis.len()];
            rem /= axis.len();
        }
        let th = Vector4::new(pick[0], pick[1], pick[2], pick[3]);
        (abscissa5(&a_g(a_m, b_m, k, &th, pick[4])), th, pick[4])
    };
    let (worst_abscissa, worst_theta, worst_w) =
        (0..total).into_par_iter().map(eval).reduce(|| (f64::NEG_INFINITY, Vector4::zeros(), 1.0), |a, b| if b.0 > a.0 { b } else { a });
    AgCertificate { pass: worst_abscissa < -tol, worst_abscissa, worst_theta, worst_w, samples: total, grid_density }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VelocityDesignConfig {
    pub lambda_gp: f64,
    pub k_bar: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Points sampled on `Ω` for the norm constraint.
    pub omega_grid: usize,
    /// Points per axis for the `A_g` check.
    pub ag_grid: usize,
    pub ag_tol: f64,
    /// Filter gains tried are `k̄ j / k_candidates`, `j = 1..=k_candidates`.
    pub k_candidates: usize,
    /// Coarse downward scan step before bisection.
    pub scan_step: f64,
    pub resolution: f64,
    pub norm_dt: f64,
}

impl Default for VelocityDesignConfig {
    fn default() -> Self {
        Self {
            lambda_gp: 0.585,
            k_bar: 10.0,
            v_min: 10.0,
            v_max: 25.0,
            omega_grid: 5,
            ag_grid: 5,
            ag_tol: 1e-9,
            k_candidates: 10,
            scan_step: 0.5,
            resolution: 0.01,
            norm_dt: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    pub k_m: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub k: f64,
    pub v: f64,
    pub g_norm: f64,
    pub lyapunov: LyapunovCertificate,
    pub ag: AgCertificate,
    pub bounds: UncertaintyBounds,
    pub nominal: StiffnessBox,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    k: f64,
    g_norm: f64,
    ag: AgCertificate,
    bounds: UncertaintyBounds,
}

/// Worst `‖G‖_L1` over the `Ω` grid, stopping early once `limit` is exceeded.
pub fn worst_norm_over_omega(
    a_m: &Matrix4<f64>,
    b_m: &Vector4<f64>,
    k: f64,
    omega: &Interval,
    n: usize,
    dt: f64,
    limit: f64,
) -> Result<f64, CodesignError> {
    let mut worst: f64 = 0.0;
    for w in omega.grid(n.max(1)) {
        worst = worst.max(l1_norm(a_m, b_m, k, w, None, dt)?);
        if worst > limit {
            break;
        }
    }
    Ok(worst)
}

fn feasible_at(
    v: f64,
    cfg: &VelocityDesignConfig,
    nb: &StiffnessBox,
    k_m: &Vector4<f64>,
    p: &VehicleParams,
    profile: &RoadProfile,
) -> Result<Option<Candidate>, CodesignError> {
    let bounds = bounds_for_box(nb, v, k_m, p, profile)?;
    let (a_m, b_m) = nominal_system(v, nb.c_f_hat, nb.c_r_hat, k_m, p)?;
    let n = cfg.k_candidates.max(1);
    let ks: Vec<f64> = (1..=n).rev().map(|j| cfg.k_bar * j as f64 / n as f64).collect();
    let norms: Vec<(f64, Option<f64>)> = ks
        .par_iter()
        .map(|&k| {
            let g = worst_norm_over_omega(&a_m, &b_m, k, &bounds.omega, cfg.omega_grid, cfg.norm_dt, cfg.lambda_gp).ok();
            (k, g)
        })
        .collect();
    let mut ordered: Vec<(f64, f64)> = norms.into_iter().filter_map(|(k, g)| g.filter(|g| *g <= cfg.lambda_gp).map(|g| (k, g))).collect();
    ordered.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)));
    for (k, g_norm) in ordered {
        let ag = check_ag_hurwitz(&a_m, &b_m, k, &bounds.theta, &bounds.omega, cfg.ag_grid, cfg.ag_tol);
        if ag.pass {
            return Ok(Some(Candidate { k, g_norm, ag, bounds }));
        }
    }
    Ok(None)
}

/// Largest velocity in `[V_min, V_max]` for which some `k ≤ k̄` meets the
/// norm bound over `Ω` and keeps `A_g` Hurwitz over the uncertainty box.
pub fn optimize_velocity(
    cfg: &VelocityDesignConfig,
    prior_f: &PriorDistribution,
    prior_r: &PriorDistribution,
    gains: &GainDesign,
    p: &VehicleParams,
    profile: &RoadProfile,
) -> Result<DesignResult, CodesignError> {
    if !(cfg.v_min > 0.0 && cfg.v_min < cfg.v_max) || !(cfg.k_bar > 0.0) || !(cfg.lambda_gp > 0.0) {
        return Err(CodesignError::Precondition(format!("bad velocity design config {cfg:?}")));
    }
    let nb = StiffnessBox::from_priors(prior_f, prior_r)?;
    let k_m = gains.k_m;
    let finish = |v: f64, c: Candidate| -> Result<DesignResult, CodesignError> {
        let (a_min, _) = nominal_system(cfg.v_min, nb.c_f_hat, nb.c_r_hat, &k_m, p)?;
        let (a_max, _) = nominal_system(cfg.v_max, nb.c_f_hat, nb.c_r_hat, &k_m, p)?;
        let lyapunov = verify_common_lyapunov(&gains.p, &a_min, &a_max, gains.certificate.tol);
        Ok(DesignResult { k_m, p: gains.p, k: c.k, v, g_norm: c.g_norm, lyapunov, ag: c.ag, bounds: c.bounds, nominal: nb })
    };

    if let Some(c) = feasible_at(cfg.v_max, cfg, &nb, &k_m, p, profile)? {
        return finish(cfg.v_max, c);
    }
    let mut hi = cfg.v_max;
    loop {
        let lo = (hi - cfg.scan_step).max(cfg.v_min);
        if let Some(c_lo) = feasible_at(lo, cfg, &nb, &k_m, p, profile)? {
            let (mut lo, mut best) = (lo, c_lo);
            while hi - lo > cfg.resolution {
                let mid = 0.5 * (lo + hi);
                match feasible_at(mid, cfg, &nb, &k_m, p, profile)? {
                    Some(c) => {
                        lo = mid;
                        best = c;
                    }
                    None => hi = mid,
                }
            }
            return finish(lo, best);
        }
        if lo <= cfg.v_min {
            break;
        }
        hi = lo;
    }
    let (a_m, b_m) = nominal_system(cfg.v_min, nb.c_f_hat, nb.c_r_hat, &k_m, p)?;
    let omega = bounds_for_box(&nb, cfg.v_min, &k_m, p, profile)?.omega;
    let best = worst_norm_over_omega(&a_m, &b_m, cfg.k_bar, &omega, cfg.omega_grid, cfg.norm_dt, f64::INFINITY)?;
    Err(CodesignError::Infeasible {
        reason: format!("no velocity in [{}, {}] meets ||G||_L1 <= {} with k <= {}", cfg.v_min, cfg.v_max, cfg.lambda_gp, cfg.k_bar),
        best_residual: best - cfg.lambda_gp,
    })
}

/// The state-feedback gain reported for the closed-loop studies.
pub fn reference_k_m() -> Vector4<f64> {
    Vector4::new(0.7223, 2.5855, -0.6669, 0.1873)
}
