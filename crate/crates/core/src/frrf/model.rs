use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{AreaId, BasisProvider, FrrfError, GridSpec};
use crate::linalg;

/// Weather-driven large-scale mean `μ_{s,k}`, already mapped to stiffness units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherTable {
    /// Same per-area value for every step.
    Constant(Vec<f64>),
    /// `values[k - first_k][s - 1]`.
    Dense { first_k: u64, values: Vec<Vec<f64>> },
    /// Sparse `(area, k) -> μ` entries.
    Sparse(BTreeMap<(usize, u64), f64>),
}

impl WeatherTable {
    pub fn get(&self, area: AreaId, k: u64) -> Option<f64> {
        match self {
            WeatherTable::Constant(v) => v.get(area.index()).copied(),
            WeatherTable::Dense { first_k, values } => {
                k.checked_sub(*first_k).and_then(|i| values.get(i as usize)).and_then(|row| row.get(area.index())).copied()
            }
            WeatherTable::Sparse(map) => map.get(&(area.0, k)).copied(),
        }
    }
}

pub fn weather_prior(table: &WeatherTable, area: AreaId, k: u64) -> Result<f64, FrrfError> {
    table.get(area, k).ok_or(FrrfError::MissingForecast { area: area.0, k })
}

/// Gaussian prior of a cornering stiffness, read off a query estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorDistribution {
    pub mean: f64,
    pub variance: f64,
}

impl PriorDistribution {
    /// Two-sided 95% quantile of the standard normal.
    pub const Z95: f64 = 1.96;

    pub fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }

    /// `[mean - 1.96σ, mean + 1.96σ]`.
    pub fn interval(&self) -> (f64, f64) {
        let h = Self::Z95 * self.std_dev();
        (self.mean - h, self.mean + h)
    }
}

/// The spatio-temporal mixed-effects model the filter runs on.
#[derive(Debug, Clone)]
pub struct SpatioTemporalModel {
    pub grid: GridSpec,
    pub basis: Arc<dyn BasisProvider>,
    /// `H`, `n_η × n_η`.
    pub transition: DMatrix<f64>,
    /// `G`, `n_η × n_d`.
    pub input_map: DMatrix<f64>,
    /// Per-area measurement noise variance `P^ε_s`.
    pub p_eps: Vec<f64>,
    /// Per-area fine-scale (nugget) variance `P^ξ_s`.
    pub p_xi: Vec<f64>,
    /// Hidden-state process noise `P^ζ`.
    pub p_zeta: DMatrix<f64>,
    pub mu: WeatherTable,
}

impl SpatioTemporalModel {
    pub fn validate(&self) -> Result<(), FrrfError> {
        let n_d = self.grid.n_areas();
        let n_eta = self.basis.rank();
        let dim = |msg: String| Err(FrrfError::Dimension(msg));
        if self.basis.n_areas() != n_d {
            return dim(format!("basis has {} rows for {} areas", self.basis.n_areas(), n_d));
        }
        if self.transition.shape() != (n_eta, n_eta) {
            return dim(format!("H is {:?}, expected {n_eta}x{n_eta}", self.transition.shape()));
        }
        if self.input_map.nrows() != n_eta {
            return dim(format!("G has {} rows, expected {n_eta}", self.input_map.nrows()));
        }
        if self.p_zeta.shape() != (n_eta, n_eta) {
            return dim(format!("P_zeta is {:?}", self.p_zeta.shape()));
        }
        if self.p_eps.len() != n_d || self.p_xi.len() != n_d {
            return dim("per-area variance arrays must have one entry per area".into());
        }
        for (i, (&e, &x)) in self.p_eps.iter().zip(&self.p_xi).enumerate() {
            if !(e >= 0.0) || !(x >= 0.0) {
                return Err(FrrfError::InvalidVariance { area: i + 1, variance: e.min(x) });
            }
        }
        if linalg::max_abs(&(&self.p_zeta - self.p_zeta.transpose())) > 1e-9 * (1.0 + linalg::max_abs(&self.p_zeta)) {
            return dim("P_zeta is not symmetric".into());
        }
        let (lo, _) = linalg::sym_eigen_range(&self.p_zeta);
        if lo < -1e-9 * (1.0 + linalg::max_abs(&self.p_zeta)) {
            return Err(FrrfError::NotPositiveSemidefinite { k: 0, min_eig: lo });
        }
        Ok(())
    }

    pub fn n_eta(&self) -> usize {
        self.basis.rank()
    }

    pub fn n_input(&self) -> usize {
        self.input_map.ncols()
    }

    pub fn mu(&self, area: AreaId, k: u64) -> Result<f64, FrrfError> {
        weather_prior(&self.mu, area, k)
    }

    /// Basis row `S_{s,k}` as a row vector.
    pub fn basis_row(&self, area: AreaId, k: u64) -> DMatrix<f64> {
        self.basis.matrix(k).rows(area.index(), 1).into_owned()
    }
}

/// One reading sent in for an area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub area: AreaId,
    pub value: f64,
    /// Overrides the model's `P^ε_s` for this reading.
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasurementBatch {
    pub k: u64,
    pub entries: Vec<Measurement>,
}

impl MeasurementBatch {
    pub fn new(k: u64, entries: Vec<Measurement>) -> Self {
        Self { k, entries }
    }

    pub fn empty(k: u64) -> Self {
        Self { k, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Measured area set `O_k`, in batch order.
    pub fn areas(&self) -> Vec<AreaId> {
        self.entries.iter().map(|m| m.area).collect()
    }

    pub fn has_duplicates(&self) -> bool {
        let mut a = self.areas();
        a.sort();
        a.windows(2).any(|w| w[0] == w[1])
    }

    /// Selector `E_k ∈ {0,1}^{n_k × n_D}`.
    pub fn selector(&self, n_areas: usize) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.len(), n_areas);
        for (i, m) in self.entries.iter().enumerate() {
            e[(i, m.area.index())] = 1.0;
        }
        e
    }

    pub(crate) fn values(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.entries.iter().map(|m| m.value))
    }

    pub(crate) fn eps_variance(&self, model: &SpatioTemporalModel) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.entries.iter().map(|m| m.variance.unwrap_or(model.p_eps[m.area.index()])))
    }
}

/// Collapses repeated readings of the same area into their inverse-variance
/// weighted mean. The merged entry carries the combined variance explicitly.
/// Output entries are sorted by area.
pub fn merge_duplicates(batch: &MeasurementBatch, model: &SpatioTemporalModel) -> Result<MeasurementBatch, FrrfError> {
    let mut acc: BTreeMap<AreaId, (f64, f64)> = BTreeMap::new();
    for m in &batch.entries {
        model.grid.check(m.area)?;
        let var = m.variance.unwrap_or(model.p_eps[m.area.index()]);
        if !(var > 0.0) || !var.is_finite() {
            return Err(FrrfError::InvalidVariance { area: m.area.0, variance: var });
        }
        let e = acc.entry(m.area).or_insert((0.0, 0.0));
        e.0 += 1.0 / var;
        e.1 += m.value / var;
    }
    let entries = acc
        .into_iter()
        .map(|(area, (precision, weighted))| Measurement { area, value: weighted / precision, variance: Some(1.0 / precision) })
        .collect();
    Ok(MeasurementBatch { k: batch.k, entries })
}
