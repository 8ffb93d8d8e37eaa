//! Fixed Rank Resilient Filter (FRRF).
//!
//! A fixed-rank spatio-temporal Kalman-type filter for a gridded field
//!
//! ```text
//! q_{s,k} = μ_{s,k} + S_s η_k + ξ_{s,k}        z_{s,k} = q_{s,k} + ε_{s,k}
//! η_{k+1} = H η_k + G d_k + ζ_k
//! ```
//!
//! where `d_k` is an unknown input. Each step first estimates `d_{k-1}` from the
//! new measurements (rejecting it from the prediction), then corrects the
//! hidden state, and finally produces per-area estimates of `q` with their
//! variances.

mod basis;
mod filter;
mod model;
pub mod sim;

pub use basis::{build_w_wavelet_basis, BasisProvider, StaticBasis};
pub use filter::{gain, predict, query, step, update, FilterState, FixedRankResilientFilter, PredictedState, QueryEstimate, StepOutput};
pub use model::{merge_duplicates, weather_prior, Measurement, MeasurementBatch, PriorDistribution, SpatioTemporalModel, WeatherTable};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrrfError {
    #[error("basis rank {rank} is invalid for {n_areas} areas")]
    InvalidRank { rank: usize, n_areas: usize },
    #[error("grid {rows}x{cols} is empty")]
    EmptyGrid { rows: usize, cols: usize },
    #[error("area {0} is not on the grid")]
    InvalidArea(usize),
    #[error("measurement variance {variance} for area {area} must be positive")]
    InvalidVariance { area: usize, variance: f64 },
    #[error("no weather forecast for area {area} at step {k}")]
    MissingForecast { area: usize, k: u64 },
    #[error("innovation covariance ill-conditioned at step {k} (condition number {cond:e})")]
    IllConditionedInnovation { k: u64, cond: f64 },
    #[error("covariance lost positive semi-definiteness at step {k} (min eigenvalue {min_eig:e})")]
    NotPositiveSemidefinite { k: u64, min_eig: f64 },
    #[error("batch step {batch_k} does not follow filter step {state_k}")]
    StepMismatch { state_k: u64, batch_k: u64 },
    #[error("batch for step {0} still contains duplicate areas; merge it first")]
    DuplicateAreas(u64),
    #[error("model dimension mismatch: {0}")]
    Dimension(String),
}

/// One-based area index on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AreaId(pub usize);

impl AreaId {
    /// Zero-based row index into per-area arrays.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl std::fmt::Display for AreaId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Rectangular grid of areas. Area 1 is the bottom-left cell; numbering runs
/// along a row first (area 2 is the right neighbour of area 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    rows: usize,
    cols: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Result<Self, FrrfError> {
        if rows == 0 || cols == 0 {
            return Err(FrrfError::EmptyGrid { rows, cols });
        }
        Ok(Self { rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_areas(&self) -> usize {
        self.rows * self.cols
    }

    pub fn area_at(&self, row: usize, col: usize) -> Option<AreaId> {
        (row < self.rows && col < self.cols).then(|| AreaId(row * self.cols + col + 1))
    }

    pub fn coords(&self, area: AreaId) -> Result<(usize, usize), FrrfError> {
        self.check(area)?;
        let i = area.index();
        Ok((i / self.cols, i % self.cols))
    }

    pub fn check(&self, area: AreaId) -> Result<(), FrrfError> {
        if area.0 == 0 || area.0 > self.n_areas() {
            Err(FrrfError::InvalidArea(area.0))
        } else {
            Ok(())
        }
    }

    pub fn areas(&self) -> impl Iterator<Item = AreaId> {
        (1..=self.n_areas()).map(AreaId)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_mapping_is_a_bijection() {
        let g = GridSpec::new(5, 5).unwrap();
        let mut seen = vec![false; 25];
        for r in 0..5 {
            for c in 0..5 {
                let a = g.area_at(r, c).unwrap();
                assert_eq!(g.coords(a).unwrap(), (r, c));
                assert!(!seen[a.index()]);
                seen[a.index()] = true;
            }
        }
        assert!(seen.into_iter().all(|s| s));
        assert_eq!(g.area_at(0, 1), Some(AreaId(2)));
        assert!(g.coords(AreaId(26)).is_err());
        assert!(g.coords(AreaId(0)).is_err());
    }
}
