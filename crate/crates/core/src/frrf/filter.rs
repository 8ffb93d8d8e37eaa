use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::model::{merge_duplicates, MeasurementBatch, SpatioTemporalModel};
use super::{AreaId, FrrfError};
use crate::linalg::{self, PINV_RTOL};

/// Innovation covariances worse conditioned than this are rejected.
pub const MAX_INNOVATION_COND: f64 = 1e12;
const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub k: u64,
    pub eta_hat: DVector<f64>,
    pub p_eta: DMatrix<f64>,
}

impl FilterState {
    pub fn new(k: u64, eta_hat: DVector<f64>, p_eta: DMatrix<f64>) -> Self {
        Self { k, eta_hat, p_eta }
    }
}

/// Output of the prediction stage together with the measurement data the
/// estimation and query stages reuse.
#[derive(Debug, Clone)]
pub struct PredictedState {
    pub k: u64,
    pub eta_pred: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    /// `M_k`, `n_d × n_k`.
    pub m: DMatrix<f64>,
    /// Estimate of the unknown input of the previous step, `d̂_{k-1}`.
    pub d_hat: DVector<f64>,
    /// Error covariance of `d̂_{k-1}` (`M R Mᵀ`).
    pub d_cov: DMatrix<f64>,
    /// `S_k G_{k-1}` had full column rank, so the input is rejected without bias.
    pub rank_ok: bool,
    areas: Vec<AreaId>,
    /// `z_k − μ_k` over the measured areas.
    y: DVector<f64>,
    /// `S_k`, rows of the basis for the measured areas.
    s_obs: DMatrix<f64>,
    /// Per-entry measurement noise variance.
    eps: DVector<f64>,
    /// Diagonal of `Σ` (measurement noise plus nugget).
    sigma: DVector<f64>,
    /// `G M Σ`, the cross covariance `−E[η̃_{k|k−1} vᵀ]`.
    gm_sigma: DMatrix<f64>,
    gm: DMatrix<f64>,
}

impl PredictedState {
    pub fn measured_areas(&self) -> &[AreaId] {
        &self.areas
    }

    pub fn n_measured(&self) -> usize {
        self.areas.len()
    }

    fn position(&self, area: AreaId) -> Option<usize> {
        self.areas.iter().position(|&a| a == area)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryEstimate {
    pub s_star: AreaId,
    pub q_hat: f64,
    pub p_q: f64,
    pub xi_hat: f64,
    pub measured: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: FilterState,
    pub predicted: PredictedState,
    pub gain: DMatrix<f64>,
    pub estimates: Vec<QueryEstimate>,
}

fn check_psd(p: &DMatrix<f64>, k: u64) -> Result<(), FrrfError> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(FrrfError::NotPositiveSemidefinite { k, min_eig: f64::NAN });
    }
    let (lo, _) = linalg::sym_eigen_range(p);
    if lo < -PSD_TOL * linalg::max_abs(p).max(1.0) {
        return Err(FrrfError::NotPositiveSemidefinite { k, min_eig: lo });
    }
    Ok(())
}

/// Recursive prediction with rejection of the unknown input.
pub fn predict(state: &FilterState, model: &SpatioTemporalModel, batch: &MeasurementBatch) -> Result<PredictedState, FrrfError> {
    let k = batch.k;
    if k != state.k + 1 {
        return Err(FrrfError::StepMismatch { state_k: state.k, batch_k: k });
    }
    if batch.has_duplicates() {
        return Err(FrrfError::DuplicateAreas(k));
    }
    let n_eta = model.n_eta();
    let n_d = model.n_input();
    if state.eta_hat.len() != n_eta || state.p_eta.shape() != (n_eta, n_eta) {
        return Err(FrrfError::Dimension(format!("state has {} components, model rank is {n_eta}", state.eta_hat.len())));
    }

    let areas = batch.areas();
    let n_k = areas.len();
    let mut y = batch.values();
    for (i, &a) in areas.iter().enumerate() {
        model.grid.check(a)?;
        y[i] -= model.mu(a, k)?;
    }
    let eps = batch.eps_variance(model);
    for (i, &a) in areas.iter().enumerate() {
        if !(eps[i] > 0.0) {
            return Err(FrrfError::InvalidVariance { area: a.0, variance: eps[i] });
        }
    }
    let sigma = DVector::from_iterator(n_k, areas.iter().zip(eps.iter()).map(|(a, e)| e + model.p_xi[a.index()]));
    let sigma_m = DMatrix::from_diagonal(&sigma);
    let basis = model.basis.matrix(k);
    let s_obs = DMatrix::from_fn(n_k, n_eta, |i, j| basis[(areas[i].index(), j)]);

    let h = &model.transition;
    let g = &model.input_map;
    let h_eta = h * &state.eta_hat;
    let hph = h * &state.p_eta * h.transpose();
    let base_cov = &hph + &model.p_zeta;

    let sg = &s_obs * g;
    let rank_ok = n_k > 0 && linalg::rank(&sg) == n_d;
    let (m, r) = if n_k == 0 {
        (DMatrix::zeros(n_d, 0), DMatrix::zeros(0, 0))
    } else {
        let mut r = &s_obs * &base_cov * s_obs.transpose() + &sigma_m;
        linalg::symmetrize(&mut r);
        let cond = linalg::condition_number(&r);
        if !(cond <= MAX_INNOVATION_COND) {
            return Err(FrrfError::IllConditionedInnovation { k, cond });
        }
        let m = if rank_ok {
            let r_inv = r.clone().try_inverse().ok_or(FrrfError::IllConditionedInnovation { k, cond })?;
            let gs_ri = sg.transpose() * &r_inv;
            linalg::pinv(&(&gs_ri * &sg)) * gs_ri
        } else {
            DMatrix::zeros(n_d, n_k)
        };
        (m, r)
    };

    let resid = &y - &s_obs * &h_eta;
    let d_hat = &m * resid;
    let mut d_cov = &m * &r * m.transpose();
    linalg::symmetrize(&mut d_cov);
    let eta_pred = &h_eta + g * &d_hat;

    let gm = g * &m;
    let a = DMatrix::<f64>::identity(n_eta, n_eta) - &gm * &s_obs;
    let gm_sigma = &gm * &sigma_m;
    let mut p_pred = &a * &base_cov * a.transpose() + &gm_sigma * gm.transpose();
    linalg::symmetrize(&mut p_pred);
    check_psd(&p_pred, k)?;

    Ok(PredictedState { k, eta_pred, p_pred, m, d_hat, d_cov, rank_ok, areas, y, s_obs, eps, sigma, gm_sigma, gm })
}

/// Estimation gain `K_k`, `n_η × n_k`.
pub fn gain(pred: &PredictedState) -> Result<DMatrix<f64>, FrrfError> {
    let n_k = pred.n_measured();
    let n_eta = pred.eta_pred.len();
    if n_k == 0 {
        return Ok(DMatrix::zeros(n_eta, 0));
    }
    let sigma_m = DMatrix::from_diagonal(&pred.sigma);
    let sps = &pred.s_obs * &pred.p_pred * pred.s_obs.transpose();
    let cross = &pred.s_obs * &pred.gm_sigma;
    let mut r_tilde = &sps + &sigma_m - &cross - cross.transpose();
    linalg::symmetrize(&mut r_tilde);

    // When the input is rejected, R̃ loses exactly rank(S G) directions; the
    // pseudoinverse cutoff is set relative to the terms it was built from so
    // cancellation residue is not amplified.
    let scale = linalg::max_abs(&sps) + linalg::max_abs(&sigma_m);
    if r_tilde.iter().any(|v| !v.is_finite()) {
        return Err(FrrfError::IllConditionedInnovation { k: pred.k, cond: f64::INFINITY });
    }
    let (lo, _) = linalg::sym_eigen_range(&r_tilde);
    if lo < -1e-8 * scale {
        return Err(FrrfError::IllConditionedInnovation { k: pred.k, cond: f64::INFINITY });
    }
    let r_pinv = linalg::pinv_scaled(&r_tilde, PINV_RTOL, Some(scale));
    Ok((&pred.p_pred * pred.s_obs.transpose() - &pred.gm_sigma) * r_pinv)
}

fn update_with_gain(pred: &PredictedState, kk: &DMatrix<f64>) -> Result<FilterState, FrrfError> {
    let n_eta = pred.eta_pred.len();
    if pred.n_measured() == 0 {
        return Ok(FilterState::new(pred.k, pred.eta_pred.clone(), pred.p_pred.clone()));
    }
    let innov = &pred.y - &pred.s_obs * &pred.eta_pred;
    let eta_hat = &pred.eta_pred + kk * innov;
    let b = DMatrix::<f64>::identity(n_eta, n_eta) - kk * &pred.s_obs;
    let sigma_m = DMatrix::from_diagonal(&pred.sigma);
    let cross = &b * &pred.gm_sigma * kk.transpose();
    let mut p = &b * &pred.p_pred * b.transpose() + kk * &sigma_m * kk.transpose() + &cross + cross.transpose();
    linalg::symmetrize(&mut p);
    check_psd(&p, pred.k)?;
    Ok(FilterState::new(pred.k, eta_hat, p))
}

/// Recursive estimation of the hidden state.
pub fn update(pred: &PredictedState) -> Result<FilterState, FrrfError> {
    let kk = gain(pred)?;
    update_with_gain(pred, &kk)
}

/// Per-area estimate of `q` after the update of step `k`.
///
/// Measured areas combine the reading with the predicted state; because
/// batches are merged beforehand there is exactly one reading per area, so
/// the unbiased combination weight is 1.
pub fn query(
    state: &FilterState,
    pred: &PredictedState,
    kk: &DMatrix<f64>,
    model: &SpatioTemporalModel,
    s_star: AreaId,
) -> Result<QueryEstimate, FrrfError> {
    model.grid.check(s_star)?;
    let k = state.k;
    let mu = model.mu(s_star, k)?;
    let row = model.basis_row(s_star, k);
    let p_xi = model.p_xi[s_star.index()];

    let Some(i) = pred.position(s_star) else {
        let q_hat = mu + (&row * &state.eta_hat)[0];
        let p_q = (&row * &state.p_eta * row.transpose())[0] + p_xi;
        return Ok(QueryEstimate { s_star, q_hat, p_q: p_q.max(0.0), xi_hat: 0.0, measured: false });
    };

    let xi_hat = pred.y[i] - (&row * &pred.eta_pred)[0];
    let q_hat = mu + (&row * &state.eta_hat)[0] + xi_hat;

    // q̃ = −a S η̃_{k|k−1} − a v − ε*, a = S* K
    let a = &row * kk;
    let sigma_m = DMatrix::from_diagonal(&pred.sigma);
    let mut e_star = DVector::zeros(pred.n_measured());
    e_star[i] = pred.eps[i];
    let a_s = &a * &pred.s_obs;
    let p_q = (&a_s * &pred.p_pred * a_s.transpose())[0] + (&a * &sigma_m * a.transpose())[0] + pred.eps[i]
        - 2.0 * (&a_s * &pred.gm_sigma * a.transpose())[0]
        - 2.0 * (&a_s * &pred.gm * &e_star)[0]
        + 2.0 * (&a * &e_star)[0];
    Ok(QueryEstimate { s_star, q_hat, p_q: p_q.max(0.0), xi_hat, measured: true })
}

/// One full filter cycle. Duplicate readings are merged first.
pub fn step(
    state: &FilterState,
    model: &SpatioTemporalModel,
    batch: &MeasurementBatch,
    query_areas: &[AreaId],
) -> Result<StepOutput, FrrfError> {
    let merged = merge_duplicates(batch, model)?;
    let predicted = predict(state, model, &merged)?;
    let gain = gain(&predicted)?;
    let new_state = update_with_gain(&predicted, &gain)?;
    let estimates = query_areas.iter().map(|&a| query(&new_state, &predicted, &gain, model, a)).collect::<Result<Vec<_>, _>>()?;
    Ok(StepOutput { state: new_state, predicted, gain, estimates })
}

/// Stateful wrapper around [`step`].
#[derive(Debug, Clone)]
pub struct FixedRankResilientFilter {
    model: SpatioTemporalModel,
    state: FilterState,
}

impl FixedRankResilientFilter {
    pub fn new(model: SpatioTemporalModel, initial: FilterState) -> Result<Self, FrrfError> {
        model.validate()?;
        let n = model.n_eta();
        if initial.eta_hat.len() != n || initial.p_eta.shape() != (n, n) {
            return Err(FrrfError::Dimension("initial state does not match basis rank".into()));
        }
        check_psd(&initial.p_eta, initial.k)?;
        Ok(Self { model, state: initial })
    }

    pub fn model(&self) -> &SpatioTemporalModel {
        &self.model
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn step(&mut self, batch: &MeasurementBatch, query_areas: &[AreaId]) -> Result<StepOutput, FrrfError> {
        let out = step(&self.state, &self.model, batch, query_areas)?;
        self.state = out.state.clone();
        Ok(out)
    }
}
