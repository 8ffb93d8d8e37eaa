//! Posterior fusion of the stiffness prior with on-board readings, and the
//! online filter-gain re-check.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codesign::{
    bounds_for_box, check_ag_hurwitz, confidence_interval, nominal_system, AgCertificate, CodesignError, DesignResult, StiffnessBox,
    UncertaintyBounds,
};
use crate::frrf::PriorDistribution;
use crate::vehicle::{RoadProfile, VehicleParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("variance must be positive, got {0}")]
    InvalidVariance(f64),
    #[error("no gain within {radius} of k* = {k_star} keeps A_g Hurwitz")]
    Unrecoverable { k_star: f64, radius: f64 },
    #[error(transparent)]
    Design(#[from] CodesignError),
}

/// Synthetic stand-in for the on-board stiffness estimator output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnboardMeasurement {
    pub value: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDistribution {
    pub mean: f64,
    pub variance: f64,
    pub interval: (f64, f64),
}

impl PosteriorDistribution {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance, interval: PriorDistribution::new(mean, variance).interval() }
    }

    pub fn as_prior(&self) -> PriorDistribution {
        PriorDistribution::new(self.mean, self.variance)
    }
}

/// Sequential conjugate updates. An infinite measurement variance carries no
/// information and leaves the estimate unchanged.
pub fn posterior_fuse(prior: &PriorDistribution, measurements: &[OnboardMeasurement]) -> Result<PosteriorDistribution, FusionError> {
    if !(prior.variance > 0.0) {
        return Err(FusionError::InvalidVariance(prior.variance));
    }
    let mut precision = 1.0 / prior.variance;
    let mut weighted = prior.mean * precision;
    for m in measurements {
        if !(m.variance > 0.0) {
            return Err(FusionError::InvalidVariance(m.variance));
        }
        if m.variance.is_infinite() {
            continue;
        }
        precision += 1.0 / m.variance;
        weighted += m.value / m.variance;
    }
    Ok(PosteriorDistribution::new(weighted / precision, 1.0 / precision))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GainSearch {
    pub step: f64,
    pub radius: f64,
    pub grid_density: usize,
    pub tol: f64,
}

impl Default for GainSearch {
    fn default() -> Self {
        Self { step: 0.05, radius: 50.0, grid_density: 5, tol: 1e-9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainUpdate {
    pub k: f64,
    pub bounds: UncertaintyBounds,
    pub ag: AgCertificate,
}

/// Uncertainty bounds at the designed velocity with the nominal model kept
/// and the box taken from the posterior 95% bands.
pub fn posterior_bounds(
    post_f: &PosteriorDistribution,
    post_r: &PosteriorDistribution,
    design: &DesignResult,
    params: &VehicleParams,
    profile: &RoadProfile,
) -> Result<UncertaintyBounds, FusionError> {
    let nb = StiffnessBox {
        c_f_hat: design.nominal.c_f_hat,
        c_r_hat: design.nominal.c_r_hat,
        c_f: confidence_interval(&post_f.as_prior())?,
        c_r: confidence_interval(&post_r.as_prior())?,
    };
    Ok(bounds_for_box(&nb, design.v, &design.k_m, params, profile)?)
}

/// Nearest `k` to `k*` on a grid of spacing `step` that keeps `A_g` Hurwitz
/// over the posterior box. Ties go to the larger `k`.
pub fn update_filter_gain(
    k_star: f64,
    post_f: &PosteriorDistribution,
    post_r: &PosteriorDistribution,
    design: &DesignResult,
    params: &VehicleParams,
    profile: &RoadProfile,
    search: &GainSearch,
) -> Result<GainUpdate, FusionError> {
    let bounds = posterior_bounds(post_f, post_r, design, params, profile)?;
    let (a_m, b_m) = nominal_system(design.v, design.nominal.c_f_hat, design.nominal.c_r_hat, &design.k_m, params)?;
    let check = |k: f64| check_ag_hurwitz(&a_m, &b_m, k, &bounds.theta, &bounds.omega, search.grid_density, search.tol);
    let n = (search.radius / search.step).floor() as usize;
    for j in 0..=n {
        let d = j as f64 * search.step;
        for k in [k_star + d, k_star - d] {
            if k <= 0.0 {
                continue;
            }
            let ag = check(k);
            if ag.pass {
                return Ok(GainUpdate { k, bounds, ag });
            }
            if j == 0 {
                break;
            }
        }
    }
    Err(FusionError::Unrecoverable { k_star, radius: search.radius })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codesign::{reference_k_m, DesignResult, LyapunovCertificate};
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;

    fn m(value: f64, variance: f64) -> OnboardMeasurement {
        OnboardMeasurement { value, variance }
    }

    #[test]
    fn conjugate_examples() {
        let prior = PriorDistribution::new(50_000.0, 2000.0);
        let p = posterior_fuse(&prior, &[m(50_000.0, 2000.0)]).unwrap();
        assert_relative_eq!(p.mean, 50_000.0, epsilon = 1e-9);
        assert_relative_eq!(p.variance, 1000.0, epsilon = 1e-9);

        let p = posterior_fuse(&prior, &[m(48_000.0, 1000.0)]).unwrap();
        let mean = (50_000.0 / 2000.0 + 48_000.0 / 1000.0) / (1.0 / 2000.0 + 1.0 / 1000.0);
        assert_relative_eq!(p.mean, mean, epsilon = 1e-9);
        assert_relative_eq!(p.mean, 48_666.67, epsilon = 0.01);
        assert_relative_eq!(p.variance, 666.67, epsilon = 0.01);
    }

    #[test]
    fn uninformative_and_empty() {
        let prior = PriorDistribution::new(50_000.0, 2000.0);
        let p = posterior_fuse(&prior, &[m(1.0, f64::INFINITY)]).unwrap();
        assert_eq!((p.mean, p.variance), (prior.mean, prior.variance));
        let p = posterior_fuse(&prior, &[]).unwrap();
        assert_eq!((p.mean, p.variance), (prior.mean, prior.variance));
        assert_eq!(p.interval, prior.interval());
        assert!(posterior_fuse(&prior, &[m(1.0, 0.0)]).is_err());
    }

    #[test]
    fn variance_never_grows() {
        let prior = PriorDistribution::new(30_000.0, 500.0);
        let p = posterior_fuse(&prior, &[m(90_000.0, 1e7)]).unwrap();
        assert!(p.variance <= prior.variance);
    }

    fn design(c: f64, var: f64, v: f64, k: f64) -> DesignResult {
        let params = VehicleParams::default();
        let prior = PriorDistribution::new(c, var);
        let nominal = StiffnessBox::from_priors(&prior, &prior).unwrap();
        let k_m = reference_k_m();
        let bounds = bounds_for_box(&nominal, v, &k_m, &params, &RoadProfile::winding()).unwrap();
        let (a_m, b_m) = nominal_system(v, c, c, &k_m, &params).unwrap();
        let ag = check_ag_hurwitz(&a_m, &b_m, k, &bounds.theta, &bounds.omega, 5, 1e-9);
        let lyapunov = LyapunovCertificate { p_min_eig: 1.0, residual_min: -1.0, residual_max: -1.0, tol: 1e-6, pass: true };
        DesignResult { k_m, p: Matrix4::identity(), k, v, g_norm: 0.0, lyapunov, ag, bounds, nominal }
    }

    #[test]
    fn tighter_posterior_keeps_gain() {
        let params = VehicleParams::default();
        let d = design(23_240.0, 1937.0, 12.96, 10.0);
        assert!(d.ag.pass);
        let post = PosteriorDistribution::new(23_240.0, 1000.0);
        let up = update_filter_gain(10.0, &post, &post, &d, &params, &RoadProfile::winding(), &GainSearch::default()).unwrap();
        assert_eq!(up.k, 10.0);
        assert!(up.ag.pass);
    }

    #[test]
    fn widened_posterior_moves_to_nearest_passing_gain() {
        let params = VehicleParams::default();
        let road = RoadProfile::winding();
        let d = design(23_240.0, 1937.0, 12.96, 10.0);
        let (a_m, b_m) = nominal_system(d.v, 23_240.0, 23_240.0, &d.k_m, &params).unwrap();
        let search = GainSearch::default();
        // widen until a small k* fails
        let k_star = 0.2;
        let mut found = None;
        for var in [1e5, 1e6, 4e6, 1e7, 2e7, 3e7, 4e7] {
            let post = PosteriorDistribution::new(23_240.0, var);
            let b = posterior_bounds(&post, &post, &d, &params, &road).unwrap();
            if !check_ag_hurwitz(&a_m, &b_m, k_star, &b.theta, &b.omega, 5, 1e-9).pass {
                found = Some(post);
                break;
            }
        }
        let post = found.expect("some widening breaks k*");
        let up = update_filter_gain(k_star, &post, &post, &d, &params, &road, &search).unwrap();
        assert!(up.ag.pass);
        assert!(up.k > k_star);
        let check = |k: f64| check_ag_hurwitz(&a_m, &b_m, k, &up.bounds.theta, &up.bounds.omega, 5, 1e-9).pass;
        let steps = ((up.k - k_star) / search.step).round() as usize;
        for j in 0..steps {
            let dk = j as f64 * search.step;
            assert!(!check(k_star + dk));
            if k_star - dk > 0.0 {
                assert!(!check(k_star - dk));
            }
        }
    }

    #[test]
    fn exhausted_search_is_an_error() {
        let params = VehicleParams::default();
        let d = design(23_240.0, 1937.0, 12.96, 10.0);
        let post = PosteriorDistribution::new(23_240.0, 4e7);
        let tiny = GainSearch { radius: 0.0, ..Default::default() };
        let r = update_filter_gain(1e-3, &post, &post, &d, &params, &RoadProfile::winding(), &tiny);
        assert!(matches!(r, Err(FusionError::Unrecoverable { .. })));
    }

    #[test]
    fn fusion_order_does_not_matter() {
        let prior = PriorDistribution::new(40_000.0, 3000.0);
        let ms = [m(41_000.0, 500.0), m(39_500.0, 800.0), m(40_200.0, 1200.0)];
        let a = posterior_fuse(&prior, &ms).unwrap();
        let rev: Vec<_> = ms.iter().rev().copied().collect();
        let b = posterior_fuse(&prior, &rev).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-10);
        assert!((a.variance - b.variance).abs() < 1e-10);
    }
}
