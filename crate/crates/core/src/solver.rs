//! Root-finders for the projection systems of the constrained and uniformly accurate steps.
//!
//! Every projected step has the form
//!
//! ```text
//! X = x̂ + D λ,    ζ(X) = c,
//! ```
//!
//! where `x̂` is the explicit part of the step, `c ∈ R^q` the target constraint
//! value and `D` the projection direction: `g(x)` at the base point (frozen), or
//! `g(X)` at the unknown new point (implicit). The system is solved by Newton's
//! method from `λ = 0`; if Newton fails, a damped version of the fixed-point map
//!
//! ```text
//! F(y) = x̂ + D G_{y−x}⁻¹ [ (c − ζ(x)) − Ḡ(y)ᵀ (x̂ − x) ],   Ḡ(y)ᵀ = ∫₀¹ gᵀ(x + τ(y − x)) dτ
//! ```
//!
//! is iterated instead (`G_{y−x} = Ḡ(y)ᵀ D` is the averaged Gram matrix).

use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, LuSolver};
use crate::manifold::ConstraintModel;

/// Number of Gauss–Legendre nodes used for the averaged Gram matrix.
pub const QUADRATURE_ORDER: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionMode {
    /// `D = g(x)` at the base point.
    Frozen,
    /// `D = g(X)` at the new point.
    Implicit,
}

/// One projection system `X = x̂ + D λ`, `ζ(X) = c`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionProblem<'a> {
    /// Base point `x` of the step.
    pub base: &'a [f64],
    /// Explicit part `x̂`.
    pub explicit: &'a [f64],
    /// `D = g(x)`, `d × q` row-major. Ignored in implicit mode except as a shape reference.
    pub direction: &'a [f64],
    /// Target constraint value `c`.
    pub target: &'a [f64],
    /// Absolute tolerance on `|ζ(X) − c|_∞`.
    pub tol: f64,
    pub max_iter: usize,
    pub mode: DirectionMode,
}

/// Owned result of [`solve_projection`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub state: Vec<f64>,
    pub lambda: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub used_fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    pub used_fallback: bool,
}

/// Solves one projection system with freshly allocated scratch space.
pub fn solve_projection<M: ConstraintModel + ?Sized>(model: &M, problem: &ProjectionProblem<'_>) -> Result<Projection> {
    let (d, q) = (model.dim(), model.codim());
    let mut p = Projector::new(d, q);
    let mut state = vec![0.0; d];
    let mut lambda = vec![0.0; q];
    let stats = p.solve(model, problem, &mut state, &mut lambda)?;
    Ok(Projection {
        state,
        lambda,
        iterations: stats.iterations,
        residual: stats.residual,
        used_fallback: stats.used_fallback,
    })
}

/// Reusable scratch space for projection solves.
#[derive(Debug, Clone)]
pub struct Projector {
    d: usize,
    q: usize,
    zeta: Vec<f64>,
    g: Vec<f64>,
    dg: Vec<f64>,
    e: Vec<f64>,
    r: Vec<f64>,
    rhs: Vec<f64>,
    dx: Vec<f64>,
    y: Vec<f64>,
    trial: Vec<f64>,
    gbar_t: Vec<f64>,
    dir: Vec<f64>,
    small: LuSolver,
    joint: LuSolver,
    joint_rhs: Vec<f64>,
}

impl Projector {
    pub fn new(d: usize, q: usize) -> Self {
        Self {
            d,
            q,
            zeta: vec![0.0; q],
            g: vec![0.0; d * q],
            dg: vec![0.0; d * q],
            e: vec![0.0; d],
            r: vec![0.0; q],
            rhs: vec![0.0; q],
            dx: vec![0.0; d],
            y: vec![0.0; d],
            trial: vec![0.0; d],
            gbar_t: vec![0.0; q * d],
            dir: vec![0.0; d * q],
            small: LuSolver::new(q),
            joint: LuSolver::new(d + q),
            joint_rhs: vec![0.0; d + q],
        }
    }

    /// Solves the system, writing `X` and `λ`. Newton first, damped fixed point on failure.
    pub fn solve<M: ConstraintModel + ?Sized>(
        &mut self,
        model: &M,
        problem: &ProjectionProblem<'_>,
        state: &mut [f64],
        lambda: &mut [f64],
    ) -> Result<SolveStats> {
        if problem.explicit.len() != self.d || problem.target.len() != self.q {
            return Err(Error::Dimension("projection problem does not match the model".into()));
        }
        let newton = match problem.mode {
            DirectionMode::Frozen => self.newton_frozen(model, problem, state, lambda),
            DirectionMode::Implicit => self.newton_implicit(model, problem, state, lambda),
        };
        let newton_iters = match newton {
            Ok(stats) => return Ok(stats),
            Err(iters) => iters,
        };
        match self.fixed_point(model, problem, state, lambda) {
            Ok(mut stats) => {
                stats.iterations += newton_iters;
                Ok(stats)
            }
            Err(Error::ProjectionFailure { iterations, residual, tolerance }) => Err(Error::ProjectionFailure {
                iterations: iterations + newton_iters,
                residual,
                tolerance,
            }),
            Err(e) => Err(e),
        }
    }

    fn residual_at<M: ConstraintModel + ?Sized>(&mut self, model: &M, x: &[f64], target: &[f64]) -> f64 {
        model.zeta(x, &mut self.zeta);
        let mut res: f64 = 0.0;
        for k in 0..self.q {
            self.r[k] = self.zeta[k] - target[k];
            res = if self.r[k].is_nan() { f64::NAN } else { res.max(self.r[k].abs()) };
        }
        res
    }

    /// Newton on `λ ↦ ζ(x̂ + Dλ) − c`. `Err` carries the iterations spent.
    fn newton_frozen<M: ConstraintModel + ?Sized>(
        &mut self,
        model: &M,
        p: &ProjectionProblem<'_>,
        state: &mut [f64],
        lambda: &mut [f64],
    ) -> std::result::Result<SolveStats, usize> {
        let (d, q) = (self.d, self.q);
        lambda[..q].iter_mut().for_each(|l| *l = 0.0);
        state[..d].copy_from_slice(p.explicit);
        let mut it = 0;
        loop {
            let res = self.residual_at(model, state, p.target);
            if res <= p.tol {
                return Ok(SolveStats {
                    iterations: it,
                    residual: res,
                    used_fallback: false,
                });
            }
            if it >= p.max_iter || !res.is_finite() {
                return Err(it);
            }
            model.grad(state, &mut self.g);
            if q == 1 {
                let j = linalg::dot(&self.g[..d], &p.direction[..d]);
                if !(j.abs() > 0.0) || !j.is_finite() {
                    return Err(it);
                }
                lambda[0] -= self.r[0] / j;
                for i in 0..d {
                    state[i] = p.explicit[i] + p.direction[i] * lambda[0];
                }
                it += 1;
                continue;
            }
            // J = g(X)ᵀ D
            let jac = self.small.matrix_mut();
            for a in 0..q {
                for b in 0..q {
                    let mut s = 0.0;
                    for i in 0..d {
                        s += self.g[i * q + a] * p.direction[i * q + b];
                    }
                    jac[a * q + b] = s;
                }
            }
            if self.small.factor().is_err() {
                return Err(it);
            }
            self.rhs.copy_from_slice(&self.r);
            self.small.solve(&mut self.rhs);
            for k in 0..q {
                lambda[k] -= self.rhs[k];
            }
            state[..d].copy_from_slice(p.explicit);
            for i in 0..d {
                state[i] += linalg::dot(&p.direction[i * q..(i + 1) * q], &lambda[..q]);
            }
            it += 1;
        }
    }

    /// Newton on the joint system `X − x̂ − g(X)λ = 0`, `ζ(X) − c = 0`.
    fn newton_implicit<M: ConstraintModel + ?Sized>(
        &mut self,
        model: &M,
        p: &ProjectionProblem<'_>,
        state: &mut [f64],
        lambda: &mut [f64],
    ) -> std::result::Result<SolveStats, usize> {
        let (d, q) = (self.d, self.q);
        let n = d + q;
        lambda[..q].iter_mut().for_each(|l| *l = 0.0);
        state[..d].copy_from_slice(p.explicit);
        let tol_x = 1e-13 * (1.0 + linalg::norm_inf(p.explicit));
        let mut it = 0;
        loop {
            let res = self.residual_at(model, state, p.target);
            model.grad(state, &mut self.g);
            let mut res_x: f64 = 0.0;
            for i in 0..d {
                self.dx[i] = state[i] - p.explicit[i] - linalg::dot(&self.g[i * q..(i + 1) * q], &lambda[..q]);
                res_x = res_x.max(self.dx[i].abs());
            }
            if res <= p.tol && res_x <= tol_x {
                return Ok(SolveStats {
                    iterations: it,
                    residual: res,
                    used_fallback: false,
                });
            }
            if it >= p.max_iter || !res.is_finite() || !res_x.is_finite() {
                return Err(it);
            }
            let jac = self.joint.matrix_mut();
            jac.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..d {
                self.e[k] = 1.0;
                model.grad_dir(state, &self.e, &mut self.dg);
                self.e[k] = 0.0;
                // column k of I − Σ_j λ_j Hess ζ_j
                for i in 0..d {
                    let h = linalg::dot(&self.dg[i * q..(i + 1) * q], &lambda[..q]);
                    jac[i * n + k] = if i == k { 1.0 - h } else { -h };
                }
            }
            for i in 0..d {
                for j in 0..q {
                    jac[i * n + d + j] = -self.g[i * q + j];
                    jac[(d + j) * n + i] = self.g[i * q + j];
                }
            }
            if self.joint.factor().is_err() {
                return Err(it);
            }
            self.joint_rhs[..d].copy_from_slice(&self.dx);
            self.joint_rhs[d..].copy_from_slice(&self.r);
            self.joint.solve(&mut self.joint_rhs);
            for i in 0..d {
                state[i] -= self.joint_rhs[i];
            }
            for j in 0..q {
                lambda[j] -= self.joint_rhs[d + j];
            }
            it += 1;
        }
    }

    /// `Ḡ(y)ᵀ = ∫₀¹ gᵀ(x + τ(y − x)) dτ` into `self.gbar_t` (q×d).
    fn averaged_grad_t<M: ConstraintModel + ?Sized>(&mut self, model: &M, x: &[f64], y: &[f64]) {
        let (d, q) = (self.d, self.q);
        self.gbar_t.iter_mut().for_each(|v| *v = 0.0);
        let (nodes, weights) = gauss_legendre_16();
        for (t, w) in nodes.iter().zip(weights) {
            for i in 0..d {
                self.trial[i] = x[i] + t * (y[i] - x[i]);
            }
            model.grad(&self.trial, &mut self.g);
            for i in 0..d {
                for j in 0..q {
                    self.gbar_t[j * d + i] += w * self.g[i * q + j];
                }
            }
        }
    }

    /// Evaluates the fixed-point map at `self.y`, writing `F(y)` into `out` and `λ(y)` into `lambda`.
    fn fixed_point_map<M: ConstraintModel + ?Sized>(
        &mut self,
        model: &M,
        p: &ProjectionProblem<'_>,
        zeta_base: &[f64],
        out: &mut [f64],
        lambda: &mut [f64],
    ) -> bool {
        let (d, q) = (self.d, self.q);
        let y = std::mem::take(&mut self.y);
        self.averaged_grad_t(model, p.base, &y);
        match p.mode {
            DirectionMode::Frozen => self.dir.copy_from_slice(p.direction),
            DirectionMode::Implicit => model.grad(&y, &mut self.dir),
        }
        self.y = y;
        let jac = self.small.matrix_mut();
        for a in 0..q {
            for b in 0..q {
                let mut s = 0.0;
                for i in 0..d {
                    s += self.gbar_t[a * d + i] * self.dir[i * q + b];
                }
                jac[a * q + b] = s;
            }
        }
        if self.small.factor().is_err() {
            return false;
        }
        for a in 0..q {
            let mut s = p.target[a] - zeta_base[a];
            for i in 0..d {
                s -= self.gbar_t[a * d + i] * (p.explicit[i] - p.base[i]);
            }
            lambda[a] = s;
        }
        self.small.solve(&mut lambda[..q]);
        for i in 0..d {
            out[i] = p.explicit[i] + linalg::dot(&self.dir[i * q..(i + 1) * q], &lambda[..q]);
        }
        out.iter().all(|v| v.is_finite())
    }

    fn fixed_point<M: ConstraintModel + ?Sized>(
        &mut self,
        model: &M,
        p: &ProjectionProblem<'_>,
        state: &mut [f64],
        lambda: &mut [f64],
    ) -> Result<SolveStats> {
        let d = self.d;
        let mut zeta_base = vec![0.0; self.q];
        model.zeta(p.base, &mut zeta_base);
        let mut mapped = vec![0.0; d];
        let mut lam_mapped = vec![0.0; self.q];
        self.y.copy_from_slice(p.explicit);
        let mut res = self.residual_at(model, p.explicit, p.target);
        let max_iter = 4 * p.max_iter.max(1);
        let mut alpha: f64 = 1.0;
        let mut it = 0;
        let failure = |it, res| Error::ProjectionFailure {
            iterations: it,
            residual: if res <= p.tol { f64::INFINITY } else { res },
            tolerance: p.tol,
        };
        while it < max_iter {
            it += 1;
            if !self.fixed_point_map(model, p, &zeta_base, &mut mapped, &mut lam_mapped) {
                return Err(failure(it, res));
            }
            loop {
                for i in 0..d {
                    state[i] = self.y[i] + alpha * (mapped[i] - self.y[i]);
                }
                let trial_res = self.residual_at(model, state, p.target);
                if trial_res < res || (trial_res.is_finite() && alpha < 1e-6) {
                    self.y.copy_from_slice(&state[..d]);
                    lambda[..self.q].copy_from_slice(&lam_mapped);
                    res = trial_res;
                    alpha = (2.0 * alpha).min(1.0);
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-6 {
                    return Err(failure(it, res));
                }
            }
            if res <= p.tol {
                if alpha < 1.0 || p.mode == DirectionMode::Implicit {
                    // λ must match the accepted point: re-evaluate the map there.
                    if !self.fixed_point_map(model, p, &zeta_base, &mut mapped, &mut lam_mapped) {
                        return Err(failure(it, res));
                    }
                    lambda[..self.q].copy_from_slice(&lam_mapped);
                }
                return Ok(SolveStats {
                    iterations: it,
                    residual: res,
                    used_fallback: true,
                });
            }
        }
        Err(failure(it, res))
    }
}

/// Gauss–Legendre nodes and weights on `[0, 1]`, computed by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - z);
        weights[i] = 1.0 / ((1.0 - z * z) * dp * dp);
    }
    (nodes, weights)
}

fn gauss_legendre_16() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(QUADRATURE_ORDER))
}

/// `G_y(x) = ∫₀¹ gᵀ(x + τy) dτ g(x)` (q×q, row-major), 16-point Gauss–Legendre in τ.
pub fn averaged_gram<M: ConstraintModel + ?Sized>(model: &M, x: &[f64], y: &[f64]) -> Vec<f64> {
    let (d, q) = (model.dim(), model.codim());
    let mut p = Projector::new(d, q);
    let end: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
    p.averaged_grad_t(model, x, &end);
    let mut g = vec![0.0; d * q];
    model.grad(x, &mut g);
    let mut out = vec![0.0; q * q];
    for a in 0..q {
        for b in 0..q {
            out[a * q + b] = (0..d).map(|i| p.gbar_t[a * d + i] * g[i * q + b]).sum();
        }
    }
    out
}

/// Smallest singular value of the averaged Gram matrix `G_y(x)`; near zero flags an
/// inadmissible displacement.
pub fn averaged_gram_min_singular_value<M: ConstraintModel + ?Sized>(model: &M, x: &[f64], y: &[f64]) -> f64 {
    let q = model.codim();
    let gy = DMatrix::from_row_slice(q, q, &averaged_gram(model, x, y));
    gy.singular_values().min()
}

/// The multiplier implied by a solved frozen-direction step through the averaged Gram matrix:
/// `λ = G_{X−x}⁻¹ [ (c − ζ(x)) − Ḡᵀ (x̂ − x) ]`. Agrees with the Newton multiplier at a solution.
pub fn lambda_from_averaged_gram<M: ConstraintModel + ?Sized>(
    model: &M,
    problem: &ProjectionProblem<'_>,
    state: &[f64],
) -> Result<Vec<f64>> {
    let (d, q) = (model.dim(), model.codim());
    let mut p = Projector::new(d, q);
    p.y.copy_from_slice(state);
    let mut zeta_base = vec![0.0; q];
    model.zeta(problem.base, &mut zeta_base);
    let mut out = vec![0.0; d];
    let mut lambda = vec![0.0; q];
    if !p.fixed_point_map(model, problem, &zeta_base, &mut out, &mut lambda) {
        return Err(Error::SingularGram { pivot: 0.0 });
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{gram, Manifold};

    fn frozen<'a>(x: &'a [f64], xh: &'a [f64], dir: &'a [f64], c: &'a [f64]) -> ProjectionProblem<'a> {
        ProjectionProblem {
            base: x,
            explicit: xh,
            direction: dir,
            target: c,
            tol: 1e-12,
            max_iter: 50,
            mode: DirectionMode::Frozen,
        }
    }

    #[test]
    fn quadrature_integrates_polynomials() {
        let (t, w) = gauss_legendre(16);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for k in 0..31 {
            let s: f64 = t.iter().zip(&w).map(|(t, w)| w * t.powi(k)).sum();
            assert!((s - 1.0 / (k as f64 + 1.0)).abs() < 1e-14, "degree {k}");
        }
    }

    #[test]
    fn affine_constraint_takes_one_newton_step() {
        let m = Manifold::hyperplane(3);
        let x = [0.2, 0.1, 0.3];
        let xh = [0.5, -1.0, 0.7];
        let dir = [0.0, 0.0, 1.0];
        for c in [0.0, 1.5, -3.0] {
            let sol = solve_projection(&m, &frozen(&x, &xh, &dir, &[c])).unwrap();
            assert_eq!(sol.iterations, 1);
            assert_eq!(sol.state, vec![0.5, -1.0, c]);
            assert!((sol.lambda[0] - (c - 0.7)).abs() < 1e-15);
        }
    }

    #[test]
    fn sphere_selects_root_nearest_zero() {
        let s = Manifold::unit_sphere();
        let x = [2.0, 0.0, 0.0];
        let dir = [4.0, 0.0, 0.0];
        let sol = solve_projection(&s, &frozen(&x, &x, &dir, &[0.0])).unwrap();
        assert!((sol.lambda[0] + 0.25).abs() < 1e-12);
        assert!((sol.state[0] - 1.0).abs() < 1e-12);
        assert!(!sol.used_fallback);
    }

    #[test]
    fn implicit_sphere_is_radial() {
        let s = Manifold::unit_sphere();
        let x = [2.0, 0.0, 0.0];
        let dir = [4.0, 0.0, 0.0];
        let mut p = frozen(&x, &x, &dir, &[0.0]);
        p.mode = DirectionMode::Implicit;
        let sol = solve_projection(&s, &p).unwrap();
        assert!((sol.state[0] - 1.0).abs() < 1e-12);
        assert!((sol.lambda[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_fallback_converges_alone() {
        let t = Manifold::torus();
        let x = [2.0, 0.0, 0.0];
        let xh = [2.05, 0.1, -0.08];
        let mut dir = [0.0; 3];
        t.grad(&x, &mut dir);
        let p = frozen(&x, &xh, &dir, &[0.0]);
        let mut proj = Projector::new(3, 1);
        let mut st = [0.0; 3];
        let mut lam = [0.0];
        let stats = proj.fixed_point(&t, &p, &mut st, &mut lam).unwrap();
        assert!(stats.used_fallback);
        let newton = solve_projection(&t, &p).unwrap();
        assert!((lam[0] - newton.lambda[0]).abs() < 1e-12);
        for i in 0..3 {
            assert!((st[i] - newton.state[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn failure_carries_residual_above_tolerance() {
        // the line x̂ + λ e₃ never meets the sphere when x̂ is far in the x₁ direction
        let s = Manifold::unit_sphere();
        let x = [1.0, 0.0, 0.0];
        let xh = [3.0, 0.0, 0.0];
        let dir = [0.0, 0.0, 1.0];
        match solve_projection(&s, &frozen(&x, &xh, &dir, &[0.0])) {
            Err(Error::ProjectionFailure { residual, tolerance, .. }) => assert!(residual >= tolerance),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn averaged_gram_diagnostics() {
        let h = Manifold::hyperplane(3);
        assert!((averaged_gram_min_singular_value(&h, &[1.0, 2.0, 3.0], &[-4.0, 0.5, 9.0]) - 1.0).abs() < 1e-14);
        let s = Manifold::unit_sphere();
        let x = [1.0, 0.0, 0.0];
        assert!((averaged_gram_min_singular_value(&s, &x, &[0.0; 3]) - 4.0).abs() < 1e-14);
        assert!(averaged_gram_min_singular_value(&s, &x, &[-2.0, 0.0, 0.0]).abs() < 1e-14);
        let t = Manifold::torus();
        let p = [2.3, 0.4, -0.6];
        let g0 = gram(&t, &p);
        let gy = averaged_gram(&t, &p, &[0.0; 3]);
        assert!((g0[0] - gy[0]).abs() <= 1e-14 * g0[0]);
    }

    #[test]
    fn averaged_gram_multiplier_matches_newton() {
        let t = Manifold::torus();
        let x = [2.01, 0.05, 0.02];
        let xh = [2.1, 0.2, -0.1];
        let mut dir = [0.0; 3];
        t.grad(&x, &mut dir);
        let c = [0.3];
        let p = frozen(&x, &xh, &dir, &c);
        let sol = solve_projection(&t, &p).unwrap();
        let lam = lambda_from_averaged_gram(&t, &p, &sol.state).unwrap();
        assert!((lam[0] - sol.lambda[0]).abs() <= 1e-10 * sol.lambda[0].abs().max(1e-3));
    }
}
