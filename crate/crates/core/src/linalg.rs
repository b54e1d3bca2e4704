//! Allocation-free dense kernels for the small systems that appear in every step.
//!
//! Matrices are row-major `&[f64]` slices. Sizes are at most a few dozen
//! (q ≤ 15 constraints, d ≤ 25 ambient coordinates for the presets), so plain
//! triple loops beat any blocked routine here.

use crate::error::{Error, Result};

/// Relative pivot threshold below which a factorization is declared singular.
const PIVOT_RTOL: f64 = 1e-14;

/// In-place Cholesky factorization `A = L Lᵀ`; the lower triangle of `a` is overwritten by `L`.
///
/// Returns `false` when `a` is not numerically positive definite. The upper
/// triangle is left untouched.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > PIVOT_RTOL * scale) || !diag.is_finite() {
            return false;
        }
        let ljj = diag.sqrt();
        a[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
    }
    true
}

/// Solves `L Lᵀ x = b` in place given the factor from [`cholesky_in_place`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// In-place LU factorization with partial pivoting, `P A = L U`.
pub fn lu_in_place(a: &mut [f64], n: usize, piv: &mut [usize]) -> Result<()> {
    let scale = a[..n * n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, p) in piv.iter_mut().enumerate().take(n) {
        *p = i;
    }
    for k in 0..n {
        let mut p = k;
        let mut best = a[k * n + k].abs();
        for i in (k + 1)..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if !(best > PIVOT_RTOL * scale) || !best.is_finite() {
            return Err(Error::SingularGram { pivot: best });
        }
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
            piv.swap(k, p);
        }
        let pivot = a[k * n + k];
        for i in (k + 1)..n {
            let factor = a[i * n + k] / pivot;
            a[i * n + k] = factor;
            if factor != 0.0 {
                for j in (k + 1)..n {
                    a[i * n + j] -= factor * a[k * n + j];
                }
            }
        }
    }
    Ok(())
}

/// Solves `A x = b` given the output of [`lu_in_place`]. `work` must hold `n` entries.
pub fn lu_solve(lu: &[f64], n: usize, piv: &[usize], b: &mut [f64], work: &mut [f64]) {
    for i in 0..n {
        work[i] = b[piv[i]];
    }
    for i in 0..n {
        let mut s = work[i];
        for k in 0..i {
            s -= lu[i * n + k] * work[k];
        }
        work[i] = s;
    }
    for i in (0..n).rev() {
        let mut s = work[i];
        for k in (i + 1)..n {
            s -= lu[i * n + k] * work[k];
        }
        work[i] = s / lu[i * n + i];
    }
    b[..n].copy_from_slice(&work[..n]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FactorKind {
    Empty,
    Cholesky,
    Lu,
}

/// Reusable factorization of a symmetric positive definite matrix: Cholesky first,
/// LU with partial pivoting when Cholesky breaks down.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    n: usize,
    data: Vec<f64>,
    piv: Vec<usize>,
    work: Vec<f64>,
    kind: FactorKind,
}

impl SpdFactor {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
            piv: vec![0; n],
            work: vec![0.0; n],
            kind: FactorKind::Empty,
        }
    }

    pub fn factor(&mut self, a: &[f64]) -> Result<()> {
        let n = self.n;
        self.data.copy_from_slice(&a[..n * n]);
        if cholesky_in_place(&mut self.data, n) {
            self.kind = FactorKind::Cholesky;
            return Ok(());
        }
        self.data.copy_from_slice(&a[..n * n]);
        match lu_in_place(&mut self.data, n, &mut self.piv) {
            Ok(()) => {
                self.kind = FactorKind::Lu;
                Ok(())
            }
            Err(e) => {
                self.kind = FactorKind::Empty;
                Err(e)
            }
        }
    }

    /// Overwrites `b` with `A⁻¹ b`.
    pub fn solve(&mut self, b: &mut [f64]) {
        match self.kind {
            FactorKind::Cholesky => cholesky_solve(&self.data, self.n, b),
            FactorKind::Lu => lu_solve(&self.data, self.n, &self.piv, b, &mut self.work),
            FactorKind::Empty => panic!("SpdFactor::solve called before a successful factor"),
        }
    }

    /// `ln det A` from the current factorization.
    pub fn ln_det(&self) -> f64 {
        let n = self.n;
        match self.kind {
            FactorKind::Cholesky => 2.0 * (0..n).map(|i| self.data[i * n + i].ln()).sum::<f64>(),
            FactorKind::Lu => (0..n).map(|i| self.data[i * n + i].abs().ln()).sum(),
            FactorKind::Empty => f64::NAN,
        }
    }
}

/// General square solver with reusable storage (LU with partial pivoting).
#[derive(Debug, Clone)]
pub struct LuSolver {
    n: usize,
    data: Vec<f64>,
    piv: Vec<usize>,
    work: Vec<f64>,
}

impl LuSolver {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
            piv: vec![0; n],
            work: vec![0.0; n],
        }
    }

    /// Mutable access to the matrix storage, to be filled before [`LuSolver::factor`].
    pub fn matrix_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn factor(&mut self) -> Result<()> {
        lu_in_place(&mut self.data, self.n, &mut self.piv)
    }

    pub fn solve(&mut self, b: &mut [f64]) {
        lu_solve(&self.data, self.n, &self.piv, b, &mut self.work);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `out = A v` for a row-major `rows × cols` matrix.
pub fn mat_vec(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        out[i] = dot(&a[i * cols..(i + 1) * cols], &v[..cols]);
    }
}

/// `out = Aᵀ v` for a row-major `rows × cols` matrix.
pub fn mat_t_vec(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    out[..cols].iter_mut().for_each(|o| *o = 0.0);
    for i in 0..rows {
        let vi = v[i];
        if vi != 0.0 {
            let row = &a[i * cols..(i + 1) * cols];
            for (o, r) in out.iter_mut().zip(row) {
                *o += r * vi;
            }
        }
    }
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn spd(n: usize) -> Vec<f64> {
        let b = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.5 + if i == j { 4.0 } else { 0.0 });
        let a = &b * b.transpose();
        (0..n * n).map(|k| a[(k / n, k % n)]).collect()
    }

    #[test]
    fn cholesky_matches_nalgebra() {
        for n in 1..8 {
            let a = spd(n);
            let rhs: Vec<f64> = (0..n).map(|i| i as f64 - 0.3).collect();
            let mut f = SpdFactor::new(n);
            f.factor(&a).unwrap();
            let mut x = rhs.clone();
            f.solve(&mut x);
            let am = DMatrix::from_row_slice(n, n, &a);
            let xr = am.clone().lu().solve(&nalgebra::DVector::from_vec(rhs)).unwrap();
            for i in 0..n {
                assert!((x[i] - xr[i]).abs() < 1e-10 * (1.0 + xr[i].abs()));
            }
            let ld = am.determinant().ln();
            assert!((f.ln_det() - ld).abs() < 1e-10 * (1.0 + ld.abs()));
        }
    }

    #[test]
    fn lu_handles_indefinite_and_pivoting() {
        let a = [0.0, 1.0, 1.0, 0.0];
        let mut f = SpdFactor::new(2);
        f.factor(&a).unwrap();
        let mut b = [2.0, 3.0];
        f.solve(&mut b);
        assert_eq!(b, [3.0, 2.0]);
    }

    #[test]
    fn singular_is_reported() {
        let a = [1.0, 2.0, 2.0, 4.0];
        let mut f = SpdFactor::new(2);
        assert!(matches!(f.factor(&a), Err(Error::SingularGram { .. })));
        let mut f = SpdFactor::new(1);
        assert!(f.factor(&[0.0]).is_err());
    }
}
