//! Multiresolution spatial basis on a rectangular grid.
//!
//! The basis is a tensor product of 1-D unbalanced Haar systems, so grids whose
//! sides are not powers of two still get an exactly orthonormal basis. Columns
//! are ordered coarse-to-fine and the first column is always the normalized
//! constant, which makes every truncation span constant fields.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use super::{FrrfError, GridSpec};

/// Source of the per-area basis rows `S_{s,k}`.
///
/// The filter only needs the `n_D × n_η` matrix at each step, so any
/// user-provided basis (kriging kernels, EOFs, ...) can be plugged in.
pub trait BasisProvider: fmt::Debug + Send + Sync {
    fn rank(&self) -> usize;
    fn n_areas(&self) -> usize;
    fn matrix(&self, k: u64) -> &DMatrix<f64>;
}

/// Time-invariant basis backed by a fixed matrix.
#[derive(Debug, Clone)]
pub struct StaticBasis {
    s: DMatrix<f64>,
}

impl StaticBasis {
    pub fn new(s: DMatrix<f64>) -> Self {
        Self { s }
    }

    pub fn w_wavelet(grid: &GridSpec, rank: usize) -> Result<Self, FrrfError> {
        build_w_wavelet_basis(grid, rank).map(Self::new)
    }
}

impl BasisProvider for StaticBasis {
    fn rank(&self) -> usize {
        self.s.ncols()
    }
    fn n_areas(&self) -> usize {
        self.s.nrows()
    }
    fn matrix(&self, _k: u64) -> &DMatrix<f64> {
        &self.s
    }
}

struct Wavelet1d {
    level: usize,
    values: DVector<f64>,
}

fn haar_1d(n: usize) -> Vec<Wavelet1d> {
    let mut out = vec![Wavelet1d { level: 0, values: DVector::from_element(n, 1.0 / (n as f64).sqrt()) }];
    fn split(n: usize, lo: usize, hi: usize, level: usize, out: &mut Vec<Wavelet1d>) {
        let len = hi - lo;
        if len < 2 {
            return;
        }
        let mid = lo + len.div_ceil(2);
        let (nl, nr) = ((mid - lo) as f64, (hi - mid) as f64);
        let mut v = DVector::zeros(n);
        for i in lo..mid {
            v[i] = 1.0 / nl;
        }
        for i in mid..hi {
            v[i] = -1.0 / nr;
        }
        let norm = v.norm();
        out.push(Wavelet1d { level, values: v / norm });
        split(n, lo, mid, level + 1, out);
        split(n, mid, hi, level + 1, out);
    }
    split(n, 0, n, 1, &mut out);
    // stable: within a level keep left-to-right order
    out.sort_by_key(|w| w.level);
    out
}

/// Builds the `n_D × rank` basis matrix; row `s-1` holds `S_s` for area `s`.
pub fn build_w_wavelet_basis(grid: &GridSpec, rank: usize) -> Result<DMatrix<f64>, FrrfError> {
    let n_d = grid.n_areas();
    if rank == 0 || rank > n_d {
        return Err(FrrfError::InvalidRank { rank, n_areas: n_d });
    }
    let along_rows = haar_1d(grid.rows());
    let along_cols = haar_1d(grid.cols());

    let mut pairs = Vec::with_capacity(n_d);
    for (i, a) in along_rows.iter().enumerate() {
        for (j, b) in along_cols.iter().enumerate() {
            pairs.push((a.level.max(b.level), a.level + b.level, i, j));
        }
    }
    pairs.sort();

    let mut s = DMatrix::zeros(n_d, rank);
    for (col, &(_, _, i, j)) in pairs.iter().take(rank).enumerate() {
        let (a, b) = (&along_rows[i].values, &along_cols[j].values);
        for r in 0..grid.rows() {
            for c in 0..grid.cols() {
                let area = grid.area_at(r, c).expect("in range");
                s[(area.index(), col)] = a[r] * b[c];
            }
        }
    }
    Ok(s)
}
