//! Linear bicycle model in lane-error coordinates.
//!
//! State `x = [e_y, ė_y, e_ψ, ė_ψ]`: lateral offset from the lane centre,
//! its rate, heading error and its rate. The road enters through the desired
//! yaw rate `V / R(s)`.

use nalgebra::{Matrix4, SVector, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VehicleError {
    #[error("invalid vehicle input: {0}")]
    Domain(String),
    #[error("road radius {radius} at s = {s} is not positive")]
    Profile { s: f64, radius: f64 },
    #[error("state diverged at t = {t}")]
    Divergence { t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Mass (kg).
    pub m: f64,
    /// Yaw inertia (kg·m²).
    pub i_z: f64,
    /// Centre of gravity to front axle (m).
    pub l_f: f64,
    /// Centre of gravity to rear axle (m).
    pub l_r: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self { m: 1573.0, i_z: 2873.0, l_f: 1.1, l_r: 1.58 }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        for (name, v) in [("m", self.m), ("i_z", self.i_z), ("l_f", self.l_f), ("l_r", self.l_r)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(VehicleError::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `I_z l_r / l_f − m`.
    pub fn moment_margin(&self) -> f64 {
        self.i_z * self.l_r / self.l_f - self.m
    }
}

/// Road radius as a function of travelled distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoadProfile {
    Straight,
    Constant {
        radius: f64,
    },
    /// `R(s) = amplitude · sin(s / period) + offset`.
    Sinusoidal {
        amplitude: f64,
        period: f64,
        offset: f64,
    },
}

impl RoadProfile {
    /// The test track used for the closed-loop studies.
    pub fn winding() -> Self {
        RoadProfile::Sinusoidal { amplitude: 15.0, period: 120.0, offset: 30.0 }
    }

    /// `R(s)`; `None` on a straight road.
    pub fn radius(&self, s: f64) -> Option<f64> {
        match *self {
            RoadProfile::Straight => None,
            RoadProfile::Constant { radius } => Some(radius),
            RoadProfile::Sinusoidal { amplitude, period, offset } => Some(amplitude * (s / period).sin() + offset),
        }
    }

    pub fn radius_slope(&self, s: f64) -> f64 {
        match *self {
            RoadProfile::Sinusoidal { amplitude, period, .. } => amplitude / period * (s / period).cos(),
            _ => 0.0,
        }
    }

    /// `1 / R(s)`, zero on a straight road.
    pub fn curvature(&self, s: f64) -> Result<f64, VehicleError> {
        match self.radius(s) {
            None => Ok(0.0),
            Some(r) if r > 0.0 && r.is_finite() => Ok(1.0 / r),
            Some(r) => Err(VehicleError::Profile { s, radius: r }),
        }
    }

    /// `R̲`, the smallest radius over the whole road (`inf` when straight).
    pub fn lower_radius(&self) -> f64 {
        match *self {
            RoadProfile::Straight => f64::INFINITY,
            RoadProfile::Constant { radius } => radius,
            RoadProfile::Sinusoidal { amplitude, offset, .. } => offset - amplitude.abs(),
        }
    }

    /// `R̄_d`: the largest `|Ṙ / R²|` at speed `v`, with `Ṙ = R'(s) v`.
    /// A scan over one period locates the peak, then golden-section search
    /// refines it.
    pub fn rdot_bound(&self, v: f64) -> f64 {
        match *self {
            RoadProfile::Sinusoidal { period, .. } => {
                let f = |s: f64| {
                    let r = self.radius(s).unwrap_or(f64::INFINITY);
                    (self.radius_slope(s) * v / (r * r)).abs()
                };
                let n = 4096;
                let h = 2.0 * std::f64::consts::PI * period / n as f64;
                let (i_best, scanned) = (0..=n).map(|i| (i, f(h * i as f64))).fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
                let (mut a, mut b) = (h * (i_best as f64 - 1.0), h * (i_best as f64 + 1.0));
                let g = 0.5 * (5f64.sqrt() - 1.0);
                for _ in 0..80 {
                    let (c, d) = (b - g * (b - a), a + g * (b - a));
                    if f(c) > f(d) {
                        b = d;
                    } else {
                        a = c;
                    }
                }
                scanned.max(f(0.5 * (a + b)))
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorState {
    pub x1: f64,
    pub x1dot: f64,
    pub x2: f64,
    pub x2dot: f64,
}

impl ErrorState {
    pub fn new(x1: f64, x1dot: f64, x2: f64, x2dot: f64) -> Self {
        Self { x1, x1dot, x2, x2dot }
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x1, self.x1dot, self.x2, self.x2dot)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.as_vector().iter().all(|v| v.is_finite())
    }
}

/// `ẋ = A x + b u + g ṗ^{ψ,des}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateralMatrices {
    pub a: Matrix4<f64>,
    pub b: Vector4<f64>,
    pub g: Vector4<f64>,
    pub v: f64,
    pub c_f: f64,
    pub c_r: f64,
}

fn check_inputs(v: f64, c_f: f64, c_r: f64, params: &VehicleParams, allow_zero_stiffness: bool) -> Result<(), VehicleError> {
    params.validate()?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(VehicleError::Domain(format!("velocity must be positive, got {v}")));
    }
    let ok = |c: f64| c.is_finite() && if allow_zero_stiffness { c >= 0.0 } else { c > 0.0 };
    if !ok(c_f) || !ok(c_r) {
        return Err(VehicleError::Domain(format!("cornering stiffness must be positive, got ({c_f}, {c_r})")));
    }
    Ok(())
}

fn input_vector(c_f: f64, p: &VehicleParams) -> Vector4<f64> {
    Vector4::new(0.0, 2.0 * c_f / p.m, 0.0, 2.0 * c_f * p.l_f / p.i_z)
}

/// Body-frame dynamics over `[y, ẏ, ψ, ψ̇]`. Zero stiffness is accepted here
/// so the purely kinematic part can be inspected.
pub fn raw_matrices(v: f64, c_f: f64, c_r: f64, p: &VehicleParams) -> Result<(Matrix4<f64>, Vector4<f64>), VehicleError> {
    check_inputs(v, c_f, c_r, p, true)?;
    let (m, iz, lf, lr) = (p.m, p.i_z, p.l_f, p.l_r);
    let mom = c_f * lf - c_r * lr;
    let a = Matrix4::new(
        0.0,
        1.0,
        0.0,
        0.0,
        0.0,
        -2.0 * (c_f + c_r) / (m * v),
        0.0,
        -v - 2.0 * mom / (m * v),
        0.0,
        0.0,
        0.0,
        1.0,
        0.0,
        -2.0 * mom / (iz * v),
        0.0,
        -2.0 * (c_f * lf * lf + c_r * lr * lr) / (iz * v),
    );
    Ok((a, input_vector(c_f, p)))
}

pub fn error_matrices(v: f64, c_f: f64, c_r: f64, p: &VehicleParams) -> Result<LateralMatrices, VehicleError> {
    check_inputs(v, c_f, c_r, p, false)?;
    let (m, iz, lf, lr) = (p.m, p.i_z, p.l_f, p.l_r);
    let mom = c_f * lf - c_r * lr;
    let sq = c_f * lf * lf + c_r * lr * lr;
    let a = Matrix4::new(
        0.0,
        1.0,
        0.0,
        0.0,
        0.0,
        -2.0 * (c_f + c_r) / (m * v),
        2.0 * (c_f + c_r) / m,
        -2.0 * mom / (m * v),
        0.0,
        0.0,
        0.0,
        1.0,
        0.0,
        -2.0 * mom / (iz * v),
        2.0 * mom / iz,
        -2.0 * sq / (iz * v),
    );
    let g = Vector4::new(0.0, -2.0 * mom / (m * v) - v, 0.0, -2.0 * sq / (iz * v));
    Ok(LateralMatrices { a, b: input_vector(c_f, p), g, v, c_f, c_r })
}

pub fn desired_yaw_rate(profile: &RoadProfile, s: f64, v: f64) -> Result<f64, VehicleError> {
    Ok(v * profile.curvature(s)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub rear_axle_longer: bool,
    pub moment_margin: f64,
    pub moment_ok: bool,
    pub lower_radius: f64,
    pub radius_ok: bool,
}

impl AssumptionReport {
    pub fn all_ok(&self) -> bool {
        self.rear_axle_longer && self.moment_ok && self.radius_ok
    }
}

pub fn check_assumptions(p: &VehicleParams, profile: &RoadProfile) -> AssumptionReport {
    let moment_margin = p.moment_margin();
    let lower_radius = profile.lower_radius();
    AssumptionReport {
        rear_axle_longer: p.l_r >= p.l_f,
        moment_margin,
        moment_ok: moment_margin >= 0.0,
        lower_radius,
        radius_ok: lower_radius > 0.0,
    }
}

/// One classical fourth-order Runge–Kutta step.
pub fn rk4<const N: usize>(x: &SVector<f64, N>, dt: f64, f: impl Fn(&SVector<f64, N>) -> SVector<f64, N>) -> SVector<f64, N> {
    let k1 = f(x);
    let k2 = f(&(x + k1 * (dt / 2.0)));
    let k3 = f(&(x + k2 * (dt / 2.0)));
    let k4 = f(&(x + k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Advances the plant by `dt` with `u` and the desired yaw rate held constant.
pub fn integrate_step(x: &ErrorState, mats: &LateralMatrices, u: f64, yaw_rate: f64, dt: f64) -> Result<ErrorState, VehicleError> {
    if !(dt > 0.0) {
        return Err(VehicleError::Domain(format!("dt must be positive, got {dt}")));
    }
    let forcing = mats.b * u + mats.g * yaw_rate;
    let next = ErrorState::from_vector(&rk4(&x.as_vector(), dt, |s| mats.a * s + forcing));
    if !next.is_finite() {
        return Err(VehicleError::Divergence { t: f64::NAN });
    }
    Ok(next)
}
