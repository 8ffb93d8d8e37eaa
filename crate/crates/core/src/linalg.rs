//! Small dense linear-algebra helpers shared by the filter and the design code.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff used for every pseudoinverse in the crate.
pub const PINV_RTOL: f64 = 1e-10;

/// Moore-Penrose pseudoinverse via SVD.
///
/// Singular values below `rtol * scale` are treated as zero. `scale` defaults
/// to the largest singular value when `None`; callers that know the magnitude
/// of the quantity a structurally-zero matrix was computed from should pass it
/// in, so that round-off residue is not inverted.
pub fn pinv_scaled(m: &DMatrix<f64>, rtol: f64, scale: Option<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rtol * scale.unwrap_or(smax).max(smax);
    if smax <= cutoff || smax == 0.0 {
        return DMatrix::zeros(c, r);
    }
    let u = svd.u.as_ref().expect("svd u");
    let v_t = svd.v_t.as_ref().expect("svd v_t");
    let mut out = DMatrix::zeros(c, r);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            let vi = v_t.row(i).transpose();
            let ui = u.column(i);
            out += (vi * ui.transpose()) / s;
        }
    }
    out
}

pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    pinv_scaled(m, PINV_RTOL, None)
}

/// Numerical rank with the same cutoff as [`pinv`].
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > PINV_RTOL * smax).count()
}

/// 2-norm condition number; `inf` for singular or empty input.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

pub fn sym_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let ev = m.clone().symmetric_eigenvalues();
    let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `Aᵀ P + P A = -Q` through the Kronecker-sum linear system.
///
/// Intended for the 4×4/5×5 systems of this crate; cost is O(n⁶).
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let big = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = big.lu().solve(&rhs)?;
    let mut p = DMatrix::from_column_slice(n, n, sol.as_slice());
    symmetrize(&mut p);
    Some(p)
}

/// Largest margin `t` and a `P` with `tr P = n` such that `P ⪰ t I` and
/// `Aᵀ P + P A ⪯ −t I` for every `A` in `mats`.
///
/// Log-det barrier method with Newton steps over the trace-normalized
/// symmetric matrices. A positive margin certifies a common Lyapunov matrix.
pub fn common_lyapunov_margin(mats: &[DMatrix<f64>]) -> Option<(DMatrix<f64>, f64)> {
    let n = mats.first()?.nrows();
    // trace-zero symmetric basis
    let mut basis = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let mut e = DMatrix::zeros(n, n);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            basis.push(e);
        }
    }
    for i in 0..n.saturating_sub(1) {
        let mut e = DMatrix::zeros(n, n);
        e[(i, i)] = 1.0;
        e[(n - 1, n - 1)] = -1.0;
        basis.push(e);
    }
    let m = basis.len() + 1;
    let eye = DMatrix::<f64>::identity(n, n);
    let p0 = &eye / n as f64;
    let lyap = |a: &DMatrix<f64>, p: &DMatrix<f64>| -(a.transpose() * p + p * a);

    // Each block is affine: L(z) = L0 + Σ z_i L_i, with z = (x, t).
    let mut blocks: Vec<(DMatrix<f64>, Vec<DMatrix<f64>>)> = Vec::new();
    for a in mats {
        let mut li: Vec<DMatrix<f64>> = basis.iter().map(|e| lyap(a, e)).collect();
        li.push(-&eye);
        blocks.push((lyap(a, &p0), li));
    }
    let mut li: Vec<DMatrix<f64>> = basis.clone();
    li.push(-&eye);
    blocks.push((p0.clone(), li));

    let eval = |z: &DVector<f64>, b: &(DMatrix<f64>, Vec<DMatrix<f64>>)| {
        let mut l = b.0.clone();
        for (zi, lm) in z.iter().zip(&b.1) {
            l += lm * *zi;
        }
        l
    };
    let mut z = DVector::zeros(m);
    let start = blocks.iter().map(|b| sym_eigen_range(&eval(&z, b)).0).fold(f64::INFINITY, f64::min);
    z[m - 1] = start - 1.0;

    let barrier = |z: &DVector<f64>, s: f64| -> Option<f64> {
        let mut phi = -s * z[m - 1];
        for b in &blocks {
            let ch = eval(z, b).cholesky()?;
            phi -= 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        Some(phi)
    };

    let mut s = 1.0;
    for _outer in 0..40 {
        for _inner in 0..100 {
            let mut g = DVector::zeros(m);
            let mut h = DMatrix::zeros(m, m);
            g[m - 1] = -s;
            for b in &blocks {
                let inv = eval(&z, b).try_inverse()?;
                let w: Vec<DMatrix<f64>> = b.1.iter().map(|lm| &inv * lm).collect();
                for i in 0..m {
                    g[i] -= w[i].trace();
                    for j in i..m {
                        let v = (&w[i] * &w[j]).trace();
                        h[(i, j)] += v;
                        if i != j {
                            h[(j, i)] += v;
                        }
                    }
                }
            }
            let dz = -(h.clone().lu().solve(&g)?);
            let decrement = -g.dot(&dz);
            if decrement / 2.0 < 1e-10 {
                break;
            }
            let phi0 = barrier(&z, s)?;
            let mut step = 1.0;
            loop {
                let cand = &z + &dz * step;
                if let Some(phi) = barrier(&cand, s) {
                    if phi <= phi0 - 0.25 * step * decrement {
                        z = cand;
                        break;
                    }
                }
                step *= 0.5;
                if step < 1e-12 {
                    break;
                }
            }
            if step < 1e-12 {
                break;
            }
        }
        let gap = (blocks.len() * n) as f64 / s;
        if gap < 1e-10 {
            break;
        }
        s *= 8.0;
    }
    let mut p = p0;
    for (zi, e) in z.iter().zip(&basis) {
        p += e * *zi;
    }
    symmetrize(&mut p);
    Some((p * n as f64, z[m - 1] * n as f64))
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}
