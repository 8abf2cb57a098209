//! Small linear-algebra kernels: compensated summation, tridiagonal direct
//! solves, CSR matrices with a stabilized bi-conjugate-gradient solver, and
//! symmetric 2x2 eigen-decompositions for diffusion square roots.
//!
//! The solver contract the PDE layer relies on: for n = 1 the tridiagonal
//! elimination is direct (machine-precision residuals on the M-matrices we
//! assemble); for n = 2 the iterative solver must reach a relative residual
//! of 1e-10 within 10^4 iterations or report failure.

use crate::error::{BhjbError, Result};

/// Compensated sum (Neumaier's variant of Kahan summation, which also
/// survives terms larger than the running sum); order-sensitive by design,
/// callers feed a fixed index order to keep reductions bitwise reproducible.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    kahan_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Tridiagonal matrix with `sub[0]` and `sup[n-1]` unused (kept zero).
#[derive(Debug, Clone)]
pub struct Tridiag {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiag {
    pub fn zeros(n: usize) -> Self {
        Tridiag { sub: vec![0.0; n], diag: vec![0.0; n], sup: vec![0.0; n] }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    /// Thomas elimination without pivoting; valid for the diagonally
    /// dominant matrices assembled by the implicit scheme.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut piv = self.diag[0];
        if piv == 0.0 {
            return Err(BhjbError::Numerical("tridiagonal solve: zero pivot at row 0".into()));
        }
        c[0] = self.sup[0] / piv;
        d[0] = rhs[0] / piv;
        for i in 1..n {
            piv = self.diag[i] - self.sub[i] * c[i - 1];
            if piv == 0.0 {
                return Err(BhjbError::Numerical(format!(
                    "tridiagonal solve: zero pivot at row {i}"
                )));
            }
            if i + 1 < n {
                c[i] = self.sup[i] / piv;
            }
            d[i] = (rhs[i] - self.sub[i] * d[i - 1]) / piv;
        }
        for i in (0..n.saturating_sub(1)).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Ok(d)
    }

    /// Solves A^T x = rhs by swapping the off-diagonals.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        let mut t = Tridiag::zeros(n);
        t.diag.copy_from_slice(&self.diag);
        for i in 0..n.saturating_sub(1) {
            t.sup[i] = self.sub[i + 1];
            t.sub[i + 1] = self.sup[i];
        }
        t.solve(rhs)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.sub[i] * x[i - 1];
            }
            if i + 1 < n {
                v += self.sup[i] * x[i + 1];
            }
            y[i] = v;
        }
        y
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut v = self.diag[i] * x[i];
            if i + 1 < n {
                v += self.sub[i + 1] * x[i + 1];
            }
            if i > 0 {
                v += self.sup[i - 1] * x[i - 1];
            }
            y[i] = v;
        }
        y
    }
}

/// Compressed-sparse-row square matrix.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csr {
    /// Builds from per-row (col, val) lists; rows need not be sorted.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            indptr.push(cols.len());
        }
        Csr { n, indptr, cols, vals }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[i] = acc;
        }
        y
    }

    pub fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.n];
        for &c in &self.cols {
            counts[c] += 1;
        }
        let mut indptr = vec![0usize; self.n + 1];
        for i in 0..self.n {
            indptr[i + 1] = indptr[i] + counts[i];
        }
        let mut cols = vec![0usize; self.cols.len()];
        let mut vals = vec![0.0; self.vals.len()];
        let mut next = indptr.clone();
        for i in 0..self.n {
            for k in self.indptr[i]..self.indptr[i + 1] {
                let c = self.cols[k];
                let slot = next[c];
                cols[slot] = i;
                vals[slot] = self.vals[k];
                next[c] += 1;
            }
        }
        Csr { n: self.n, indptr, cols, vals }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.indptr[i]..self.indptr[i + 1] {
                if self.cols[k] == i {
                    d[i] = self.vals[k];
                }
            }
        }
        d
    }
}

/// Jacobi-preconditioned BiCGStab.  Converged when the true relative
/// residual drops below `tol`; returns the iteration count.
pub fn bicgstab(a: &Csr, rhs: &[f64], tol: f64, max_iters: usize) -> Result<(Vec<f64>, usize)> {
    let n = a.n;
    let bnorm = norm2(rhs);
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv_diag).map(|(x, d)| x * d).collect() };

    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = rhs.to_vec();
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0f64, 1.0f64, 1.0f64);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];

    for iter in 1..=max_iters {
        let rho_new = dot(&r0, &r);
        if rho_new.abs() < 1e-300 {
            return Err(BhjbError::Numerical(format!(
                "bicgstab breakdown (rho) at iteration {iter}, residual {:.3e}",
                norm2(&r) / bnorm
            )));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let phat = precond(&p);
        v = a.matvec(&phat);
        alpha = rho / dot(&r0, &v);
        let s: Vec<f64> = (0..n).map(|i| r[i] - alpha * v[i]).collect();
        if norm2(&s) / bnorm < tol {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            return Ok((x, iter));
        }
        let shat = precond(&s);
        let t = a.matvec(&shat);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return Err(BhjbError::Numerical(format!(
                "bicgstab breakdown (t=0) at iteration {iter}, residual {:.3e}",
                norm2(&s) / bnorm
            )));
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm2(&r) / bnorm < tol {
            return Ok((x, iter));
        }
        if omega.abs() < 1e-300 {
            return Err(BhjbError::Numerical(format!(
                "bicgstab breakdown (omega) at iteration {iter}, residual {:.3e}",
                norm2(&r) / bnorm
            )));
        }
    }
    Err(BhjbError::Numerical(format!(
        "bicgstab did not converge in {max_iters} iterations, residual {:.3e}",
        norm2(&r) / bnorm
    )))
}

/// Eigenvalues of the symmetric matrix [[a, b], [b, c]], ascending.
pub fn sym_eig_2x2(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mean = 0.5 * (a + c);
    let disc = (0.5 * (a - c)).hypot(b);
    (mean - disc, mean + disc)
}

/// Symmetric PSD square root of [[a, b], [b, c]].  Eigenvalues below
/// -`clamp_tol` are an error; values in [-clamp_tol, 0] are clamped to 0.
pub fn sqrt_psd_2x2(a: f64, b: f64, c: f64, clamp_tol: f64) -> Result<[[f64; 2]; 2]> {
    let (l1, l2) = sym_eig_2x2(a, b, c);
    if l1 < -clamp_tol {
        return Err(BhjbError::Numerical(format!(
            "matrix not positive semi-definite: eigenvalue {l1:.3e}"
        )));
    }
    let (s1, s2) = (l1.max(0.0).sqrt(), l2.max(0.0).sqrt());
    // eigenvector for l2; falls back to axes when b == 0
    let (ux, uy) = if b.abs() > 0.0 {
        let vx = l2 - c;
        let n = (vx * vx + b * b).sqrt();
        (vx / n, b / n)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    // sqrt = s2 u u^T + s1 w w^T with w perpendicular to u
    let (wx, wy) = (-uy, ux);
    Ok([
        [s2 * ux * ux + s1 * wx * wx, s2 * ux * uy + s1 * wx * wy],
        [s2 * ux * uy + s1 * wx * wy, s2 * uy * uy + s1 * wy * wy],
    ])
}
