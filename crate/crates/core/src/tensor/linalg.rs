//! Singular value and symmetric eigenvalue decompositions.
//!
//! The SVD is a one-sided Jacobi iteration; the symmetric eigensolver is
//! `nalgebra`'s.

use nalgebra::{DMatrix, SymmetricEigen};

use super::Tensor;
use crate::error::{Error, Result};

/// Sweep cap for the Jacobi SVD.
pub const SVD_MAX_SWEEPS: usize = 100;

/// Iteration cap handed to the symmetric eigensolver.
pub const EIG_MAX_ITERATIONS: usize = 10_000;

/// Largest matrix accepted by [`sym_eig`].
pub const SYM_EIG_MAX_DIM: usize = 4096;

/// Default relative threshold for [`numerical_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Thin SVD `a = u · diag(s) · vᵀ` with `s` non-increasing.
/// For `a` of shape `m×n` and `k = min(m, n)`: `u` is `m×k`, `v` is `n×k`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        self.truncated(self.s.len())
    }

    /// `U_r · diag(S_r) · V_rᵀ`.
    pub fn truncated(&self, r: usize) -> Tensor {
        let (m, k) = (self.u.rows(), self.u.cols());
        let n = self.v.rows();
        let r = r.min(k);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for t in 0..r {
                let us = self.u.at(i, t) * self.s[t];
                if us == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += us * self.v.at(j, t);
                }
            }
        }
        Tensor::from_parts(vec![m, n], out)
    }
}

fn to_dmatrix(a: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.shape[0], a.shape[1], &a.data)
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns of a working copy are rotated pairwise until every pair is
/// orthogonal to within machine precision; the column norms are then the
/// singular values. Wide inputs are handled through their transpose.
/// Left singular vectors belonging to numerically zero singular values are
/// completed to an orthonormal set.
pub fn svd(a: &Tensor) -> Result<Svd> {
    a.expect_rank("svd", 2)?;
    let (m, n) = (a.shape[0], a.shape[1]);
    if m < n {
        let t = svd(&a.transpose()?)?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.data[i * n + j]).collect())
        .collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let rotate = |x: &mut [f64], y: &mut [f64], c: f64, s: f64| {
        for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
            let (p, q) = (*xi, *yi);
            *xi = c * p - s * q;
            *yi = s * p + c * q;
        }
    };

    let mut converged = false;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(j);
                rotate(&mut lo[i], &mut hi[0], c, s);
                let (lo, hi) = vcols.split_at_mut(j);
                rotate(&mut lo[i], &mut hi[0], c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "svd of {m}×{n} matrix did not converge within {SVD_MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let smax = norms[order[0]];
    let negligible = smax * f64::EPSILON * m as f64;

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vd = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        s.push(norms[src]);
        for r in 0..n {
            vd[r * n + dst] = vcols[src][r];
        }
        if norms[src] > negligible {
            ucols.push(cols[src].iter().map(|v| v / norms[src]).collect());
        } else {
            ucols.push(orthonormal_completion(&ucols, m));
        }
    }
    let mut ud = vec![0.0; m * n];
    for (t, col) in ucols.iter().enumerate() {
        for i in 0..m {
            ud[i * n + t] = col[i];
        }
    }
    Ok(Svd {
        u: Tensor::from_parts(vec![m, n], ud),
        s,
        v: Tensor::from_parts(vec![n, n], vd),
    })
}

/// A unit vector orthogonal to every vector in `basis` (all of length `m`,
/// with `basis.len() < m`), found by Gram–Schmidt on the standard basis.
fn orthonormal_completion(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..m {
        let mut v = vec![0.0; m];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let p: f64 = b.iter().zip(&v).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= p * bi);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            return v.into_iter().map(|x| x / norm).collect();
        }
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, v));
        }
    }
    let (norm, v) = best.expect("m ≥ 1");
    v.into_iter().map(|x| x / norm).collect()
}

/// Number of singular values strictly above `rel_tol · s_max`; 0 for the zero
/// matrix.
pub fn numerical_rank(a: &Tensor, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::invalid(format!(
            "numerical_rank: rel_tol must lie in (0, 1), got {rel_tol}"
        )));
    }
    let s = svd(a)?.s;
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&v| v > rel_tol * smax).count())
}

/// Eigenvalues of a symmetric matrix, sorted descending.
pub fn sym_eig(k: &Tensor) -> Result<Vec<f64>> {
    k.expect_rank("sym_eig", 2)?;
    let n = k.shape[0];
    if k.shape[1] != n {
        return Err(Error::shape("sym_eig", &k.shape, &[n, n]));
    }
    if n > SYM_EIG_MAX_DIM {
        return Err(Error::invalid(format!(
            "sym_eig: {n}×{n} exceeds the {SYM_EIG_MAX_DIM}×{SYM_EIG_MAX_DIM} cap"
        )));
    }
    let tol = 1e-10 * k.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (k.at(i, j) - k.at(j, i)).abs();
            if d > tol {
                return Err(Error::invalid(format!(
                    "sym_eig: matrix is not symmetric at ({i}, {j}), |difference| = {d:e}"
                )));
            }
        }
    }
    let eig = SymmetricEigen::try_new(to_dmatrix(k), f64::EPSILON, EIG_MAX_ITERATIONS)
        .ok_or_else(|| Error::Numerical(format!("sym_eig of {n}×{n} matrix did not converge")))?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}
