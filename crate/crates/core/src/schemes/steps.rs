use crate::error::{Error, Result};
use crate::linalg;
use crate::manifold::{ConstraintModel, Frame};
use crate::solver::{DirectionMode, ProjectionProblem, Projector};

use super::{ForceField, SchemeId, SchemeParams, StiffCoeffs};

/// Result of one step: new state, Lagrange multiplier, solver effort and constraint residual.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    /// Zero for schemes without a projection.
    pub lambda: Vec<f64>,
    pub iterations: usize,
    /// `|ζ(X) − c|_∞` for projected schemes, 0 otherwise.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Scratch space for repeated steps on one model. No allocation after construction.
#[derive(Debug, Clone)]
pub struct Stepper {
    d: usize,
    q: usize,
    frame: Frame,
    proj: Projector,
    xhat: Vec<f64>,
    force: Vec<f64>,
    fix: Vec<f64>,
    div: Vec<f64>,
    /// `G⁻¹ ζ`
    w: Vec<f64>,
    /// `g G⁻¹ ζ`
    u: Vec<f64>,
    /// `g′(u) w`
    curv: Vec<f64>,
    /// `g′(u)ᵀ u`
    curv_t: Vec<f64>,
    dg: Vec<f64>,
    t: Vec<f64>,
    qi: Vec<f64>,
    e: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    v: Vec<f64>,
    target: Vec<f64>,
    lambda: Vec<f64>,
    coeff_cache: Option<(u64, u64, StiffCoeffs)>,
}

impl Stepper {
    pub fn new(d: usize, q: usize) -> Self {
        Self {
            d,
            q,
            frame: Frame::new(d, q),
            proj: Projector::new(d, q),
            xhat: vec![0.0; d],
            force: vec![0.0; d],
            fix: vec![0.0; d],
            div: vec![0.0; q],
            w: vec![0.0; q],
            u: vec![0.0; d],
            curv: vec![0.0; d],
            curv_t: vec![0.0; q],
            dg: vec![0.0; d * q],
            t: vec![0.0; q],
            qi: vec![0.0; d],
            e: vec![0.0; d],
            s1: vec![0.0; q],
            s2: vec![0.0; q],
            v: vec![0.0; q],
            target: vec![0.0; q],
            lambda: vec![0.0; q],
            coeff_cache: None,
        }
    }

    /// Coefficients are pure functions of `(h, ε)`, which rarely change along a trajectory.
    fn coeffs(&mut self, params: &SchemeParams) -> StiffCoeffs {
        let key = (params.h.to_bits(), params.eps.to_bits());
        match self.coeff_cache {
            Some((h, e, c)) if (h, e) == key => c,
            _ => {
                let c = params.coeffs();
                self.coeff_cache = Some((key.0, key.1, c));
                c
            }
        }
    }

    pub fn for_model<M: ConstraintModel + ?Sized>(model: &M) -> Self {
        Self::new(model.dim(), model.codim())
    }

    /// Multiplier of the last projected step.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// Constraint target `c` of the last projected step.
    pub fn constraint_target(&self) -> &[f64] {
        &self.target
    }

    /// `ζ` at the base point of the last step.
    pub fn base_zeta(&self) -> &[f64] {
        &self.frame.zeta
    }

    /// Advances `x` by one step of `scheme`, writing the new state into `out`.
    ///
    /// On `q = 1` models the UA scheme takes the reduced scalar form, which agrees with
    /// the general form to rounding.
    #[allow(clippy::too_many_arguments)]
    pub fn step<M: ConstraintModel + ?Sized>(
        &mut self,
        scheme: SchemeId,
        model: &M,
        force: &ForceField,
        params: &SchemeParams,
        x: &[f64],
        xi: &[f64],
        out: &mut [f64],
    ) -> Result<StepStats> {
        if xi.len() != self.d || out.len() != self.d {
            return Err(Error::Dimension(format!(
                "noise/output length {}/{} for ambient dimension {}",
                xi.len(),
                out.len(),
                self.d
            )));
        }
        match scheme {
            SchemeId::EulerRd => self.euler_rd(model, force, params, x, xi, out),
            SchemeId::EulerConstrained => self.constrained_euler(model, force, params, x, xi, out, DirectionMode::Frozen),
            SchemeId::EulerConstrainedImplicit => {
                self.constrained_euler(model, force, params, x, xi, out, DirectionMode::Implicit)
            }
            SchemeId::Ua if self.q == 1 => self.ua_codim1(model, force, params, x, xi, out),
            SchemeId::Ua => self.ua(model, force, params, x, xi, out, DirectionMode::Frozen),
            SchemeId::UaImplicit => self.ua(model, force, params, x, xi, out, DirectionMode::Implicit),
            SchemeId::UaExpansion => self.expansion(model, force, params, x, xi, out),
        }
    }

    /// `∇ ln det G` into `fix`; with `sums`, also `S₁ = Σ g′(qᵢ)ᵀqᵢ` and `S₂ = Σ g′(eᵢ)ᵀqᵢ`,
    /// `qᵢ = g G⁻¹ gᵀ eᵢ`. Requires a current frame.
    fn fixman_and_sums<M: ConstraintModel + ?Sized>(&mut self, model: &M, x: &[f64], sums: bool) {
        let (d, q) = (self.d, self.q);
        self.fix.iter_mut().for_each(|v| *v = 0.0);
        self.s1.iter_mut().for_each(|v| *v = 0.0);
        self.s2.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            self.e[i] = 1.0;
            model.grad_dir(x, &self.e, &mut self.dg);
            self.e[i] = 0.0;
            self.frame.gram_solve_row(i, &mut self.t);
            for k in 0..d {
                self.fix[k] += 2.0 * linalg::dot(&self.dg[k * q..(k + 1) * q], &self.t);
            }
            if sums {
                linalg::mat_vec(&self.frame.g, d, q, &self.t, &mut self.qi);
                for k in 0..d {
                    linalg::axpy(self.qi[k], &self.dg[k * q..(k + 1) * q], &mut self.s2);
                }
                model.grad_dir(x, &self.qi, &mut self.dg);
                for k in 0..d {
                    linalg::axpy(self.qi[k], &self.dg[k * q..(k + 1) * q], &mut self.s1);
                }
            }
        }
    }

    /// `w = G⁻¹ζ`, `u = g w`, `curv = g′(u) w`, `curv_t = g′(u)ᵀ u`. Requires a current frame.
    fn penalty_curvature<M: ConstraintModel + ?Sized>(&mut self, model: &M, x: &[f64]) {
        let (d, q) = (self.d, self.q);
        self.w.copy_from_slice(&self.frame.zeta);
        self.frame.gram_solve(&mut self.w);
        linalg::mat_vec(&self.frame.g, d, q, &self.w, &mut self.u);
        model.grad_dir(x, &self.u, &mut self.dg);
        linalg::mat_vec(&self.dg, d, q, &self.w, &mut self.curv);
        linalg::mat_t_vec(&self.dg, d, q, &self.u, &mut self.curv_t);
    }

    /// `out = x + √h σ ξ + h f(x)`.
    fn euler_increment(&mut self, force: &ForceField, params: &SchemeParams, x: &[f64], xi: &[f64], out: &mut [f64]) {
        force.eval(x, &mut self.force);
        let a = params.h.sqrt() * params.sigma;
        for i in 0..self.d {
            out[i] = x[i] + a * xi[i] + params.h * self.force[i];
        }
    }

    fn project<M: ConstraintModel + ?Sized>(
        &mut self,
        model: &M,
        params: &SchemeParams,
        x: &[f64],
        mode: DirectionMode,
        out: &mut [f64],
    ) -> Result<StepStats> {
        let tol = params.tol * (1.0 + linalg::norm_inf(&self.frame.zeta));
        let problem = ProjectionProblem {
            base: x,
            explicit: &self.xhat,
            direction: &self.frame.g,
            target: &self.target,
            tol,
            max_iter: params.max_iter,
            mode,
        };
        let stats = self.proj.solve(model, &problem, out, &mut self.lambda)?;
        Ok(StepStats {
            iterations: stats.iterations,
            residual: stats.residual,
        })
    }

    fn euler_rd<M: ConstraintModel + ?Sized>(
        &mut self,
        model: &M,
        force: &ForceField,
        params: &SchemeParams,
        x: &[f64],
        xi: &[f64],
        out: &mut [f64],
    ) -> Result<StepStats> {
        self.frame.update(model, x)?;
        self.euler_increment(force, params, x, xi, out);
        if params.sigma != 0.0 {
            self.fixman_and_sums(model, x, false);
            linalg::axpy(0.25 * params.h * params.sigma * params.sigma, &self.fix, out);
        }
        self.w.copy_from_slice(&self.frame.zeta);
        self.frame.gram_solve(&mut self.w);
        linalg::mat_vec(&self.frame.g, self.d, self.q, &self.w, &mut self.u);
        linalg::axpy(-params.h / params.eps, &self.u, out);
        self.lambda.iter_mut().for_each(|l| *l = 0.0);
        Ok(StepStats::default())
    }

    #[allow(clippy::too_many_arguments)]
    fn constrained_euler<M: ConstraintModel + ?Sized>(
        &mut self,
        model: &M,
        force: &ForceField,
        params: &SchemeParams,
        x: &[f64],
        xi: &[f64],
        out: &mut [f64],
        mode: DirectionMode,
    ) -> Result<StepStats> {
        self.frame.update(model, x)?;
        let mut xhat = std::mem::take(&mut self.xhat);
        self.euler_increment(force, params, x, xi, &mut xhat);
        self.xhat = xhat;
        self.target.iter_mut().for_each(|c| *c = 0.0);
        self.project(model, params, x, mode, out)
    }

    /// Writes the UA constraint target from a current frame, force, Fixman gradient and sums.
    fn ua_target(&mut self, c: &StiffCoeffs, params: &SchemeParams, xi: &[f64], with_noise_terms: bool) {
        let (d, q) = (self.d, self.q);
        let s2 = params.sigma * params.sigma;
        for j in 0..q {
            let (mut gxi, mut gf, mut gfix) = (0.0, 0.0, 0.0);
            for i in 0..d {
                let gij = self.frame.g[i * q + j];
                gxi += gij * xi[i];
                gf += gij * self.force[i];
                gfix += gij * self.fix[i];
            }
            let mut cj = c.k_exp * self.frame.zeta[j] + params.sigma * c.k_noise * gxi + c.k_eps_om * gf;
            if with_noise_terms {
                cj += c.k_eps_om * (0.25 * s2 * gfix + 0.5 * s2 * self.div[j]) + s2 * c.k_mix * (self.s1[j] - self.s2[j]);
            }
            self.target[j] = cj;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn ua<M: ConstraintModel + ?Sized>(
        &mut self,
        model: &M,
        force: &ForceField,
        params: &SchemeParams,
        x: &[f64],
        xi: &[f64],
        out: &mut [f64],
        mode: DirectionMode,
    ) -> Result<StepStats> {
        let c = self.coeffs(params);
        self.frame.update(model, x)?;
        let mut xhat = std::mem::take(&mut self.xhat);
        self.euler_increment(force, params, x, xi, &mut xhat);
        self.penalty_curvature(model, x);
        let noisy = params.sigma != 0.0;
        let s2 = params.sigma * params.sigma;
        match mode {
            DirectionMode::Frozen => linalg::axpy(c.k_om_sq_half, &self.curv, &mut xhat),
            DirectionMode::Implicit => linalg::axpy(-c.k_om_sq_half, &self.curv, &mut xhat),
        }
        if noisy {
            self.fixman_and_sums(model, x, true);
            model.div_grad(x, &mut self.div);
            let k = match mode {
                DirectionMode::Frozen => s2 * c.k_fix,
                DirectionMode::Implicit => s2 * (0.5 * params.h.sqrt() * c.k_noise - c.k_fix),
            };
            linalg::axpy(k, &self.fix, &mut xhat);
        }
        self.xhat = xhat;
        self.ua_target(&c, params, xi, noisy);
        self.project(model, params, x, mode, out)
    }

    fn ua_codim1<M: ConstraintModel + ?Sized>(
        &mut self,
        model: &M,
        force: &ForceField,
        params: &SchemeParams,
        x: &[f64],
        xi: &[f64],
        out: &mut [f64],
    ) -> Result<StepStats> {
        if self.q != 1 {
            return Err(Error::Dimension(format!(
                "the reduced UA step needs a single constraint, model has {}",
                self.q
            )));
        }
        let d = self.d;
        let c = self.coeffs(params);
        self.frame.update(model, x)?;
        let zeta = self.frame.zeta[0];
        let gram = self.frame.gram[0];
        let ginv = 1.0 / gram;
        // dg holds g′(g)
        model.grad_dir(x, &self.frame.g, &mut self.dg);
        force.eval(x, &mut self.force);
        let s2 = params.sigma * params.sigma;
        let a = params.h.sqrt() * params.sigma;
        let kc = c.k_om_sq_half * zeta * zeta * ginv * ginv + 2.0 * s2 * c.k_fix * ginv;
        let (mut gxi, mut gf, mut ggg) = (0.0, 0.0, 0.0);
        for i in 0..d {
            let gi = self.frame.g[i];
            self.xhat[i] = x[i] + a * xi[i] + params.h * self.force[i] + kc * self.dg[i];
            gxi += gi * xi[i];
            gf += gi * self.force[i];
            ggg += gi * self.dg[i];
        }
        let mut drift = gf;
        if s2 != 0.0 {
            model.div_grad(x, &mut self.div);
            drift += 0.5 * s2 * (ginv * ggg + self.div[0]);
        }
        self.target[0] = c.k_exp * zeta + params.sigma * c.k_noise * gxi + c.k_eps_om * drift;
        self.project(model, params, x, DirectionMode::Frozen, out)
    }

    fn expansion<M: ConstraintModel + ?Sized>(
        &mut self,
        model: &M,
        force: &ForceField,
        params: &SchemeParams,
        x: &[f64],
        xi: &[f64],
        out: &mut [f64],
    ) -> Result<StepStats> {
        let (d, q) = (self.d, self.q);
        let c = self.coeffs(params);
        let h = params.h;
        let sh = h.sqrt();
        let s2 = params.sigma * params.sigma;
        self.frame.update(model, x)?;
        self.euler_increment(force, params, x, xi, out);
        self.penalty_curvature(model, x);
        linalg::axpy(c.k_om_sq_half, &self.curv, out);
        let noisy = s2 != 0.0;
        if noisy {
            self.fixman_and_sums(model, x, true);
            model.div_grad(x, &mut self.div);
            linalg::axpy(s2 * c.k_fix, &self.fix, out);
        }
        // Every term along range(g) is collected as g G⁻¹ v.
        let kn = c.k_eps_om - h;
        let k1 = 0.25 * (c.k_eps_om * (2.0 + c.k_om) - 2.0 * h);
        for j in 0..q {
            let (mut gxi, mut gf, mut gfix, mut gcurv) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..d {
                let gij = self.frame.g[i * q + j];
                gxi += gij * xi[i];
                gf += gij * self.force[i];
                gfix += gij * self.fix[i];
                gcurv += gij * self.curv[i];
            }
            let mut vj = -c.k_om * self.frame.zeta[j]
                + params.sigma * (c.k_noise - sh) * gxi
                + kn * gf
                - c.k_om_sq_half * (gcurv + self.curv_t[j]);
            if noisy {
                vj += 0.5 * s2 * kn * self.div[j]
                    + s2 * (c.k_eps_om * c.k_om / 8.0) * gfix
                    - s2 * kn * self.s2[j]
                    + s2 * k1 * self.s1[j];
            }
            self.v[j] = vj;
        }
        self.frame.gram_solve(&mut self.v);
        for i in 0..d {
            out[i] += linalg::dot(&self.frame.g[i * q..(i + 1) * q], &self.v);
        }
        self.lambda.iter_mut().for_each(|l| *l = 0.0);
        Ok(StepStats::default())
    }
}

fn run_one<M: ConstraintModel + ?Sized>(
    model: &M,
    params: &SchemeParams,
    x: &[f64],
    xi: &[f64],
    body: impl FnOnce(&mut Stepper, &mut [f64]) -> Result<StepStats>,
) -> Result<StepOutcome> {
    params.validate()?;
    Frame::check_dims(model, x)?;
    if xi.len() != model.dim() {
        return Err(Error::Dimension(format!("noise has {} components, model expects {}", xi.len(), model.dim())));
    }
    let mut stepper = Stepper::for_model(model);
    let mut state = vec![0.0; model.dim()];
    let stats = body(&mut stepper, &mut state)?;
    Ok(StepOutcome {
        state,
        lambda: stepper.lambda.clone(),
        iterations: stats.iterations,
        residual: stats.residual,
    })
}

/// One step of any scheme with freshly allocated scratch space.
pub fn step<M: ConstraintModel + ?Sized>(
    scheme: SchemeId,
    model: &M,
    force: &ForceField,
    params: &SchemeParams,
    x: &[f64],
    xi: &[f64],
) -> Result<StepOutcome> {
    run_one(model, params, x, xi, |s, out| s.step(scheme, model, force, params, x, xi, out))
}

/// `x + √h σ ξ + h f + h (σ²/4) ∇ln det G − (h/ε) g G⁻¹ ζ`.
pub fn euler_unconstrained_step<M: ConstraintModel + ?Sized>(
    model: &M,
    force: &ForceField,
    params: &SchemeParams,
    x: &[f64],
    xi: &[f64],
) -> Result<StepOutcome> {
    run_one(model, params, x, xi, |s, out| s.euler_rd(model, force, params, x, xi, out))
}

/// `X = x + √h σ ξ + h f(x) + g(x) λ`, `ζ(X) = 0`.
pub fn constrained_euler_explicit_step<M: ConstraintModel + ?Sized>(
    model: &M,
    force: &ForceField,
    params: &SchemeParams,
    x: &[f64],
    xi: &[f64],
) -> Result<StepOutcome> {
    run_one(model, params, x, xi, |s, out| {
        s.constrained_euler(model, force, params, x, xi, out, DirectionMode::Frozen)
    })
}

/// `X = x + √h σ ξ + h f(x) + g(X) λ`, `ζ(X) = 0`.
pub fn constrained_euler_implicit_step<M: ConstraintModel + ?Sized>(
    model: &M,
    force: &ForceField,
    params: &SchemeParams,
    x: &[f64],
    xi: &[f64],
) -> Result<StepOutcome> {
    run_one(model, params, x, xi, |s, out| {
        s.constrained_euler(model, force, params, x, xi, out, DirectionMode::Implicit)
    })
}

/// The uniformly accurate step in its general (any codimension) form.
pub fn ua_step<M: ConstraintModel + ?Sized>(
    model: &M,
    force: &ForceField,
    params: &SchemeParams,
    x: &[f64],
    xi: &[f64],
) -> Result<StepOutcome> {
    run_one(model, params, x, xi, |s, out| {
        s.ua(model, force, params, x, xi, out, DirectionMode::Frozen)
    })
}

/// The uniformly accurate step reduced to a single constraint.
pub fn ua_step_codim1<M: ConstraintModel + ?Sized>(
    model: &M,
    force: &ForceField,
    params: &SchemeParams,
    x: &[f64],
    xi: &[f64],
) -> Result<StepOutcome> {
    run_one(model, params, x, xi, |s, out| s.ua_codim1(model, force, params, x, xi, out))
}

/// The uniformly accurate step projected along `g(X)`; tends to the implicit constrained Euler step.
pub fn ua_step_implicit_direction<M: ConstraintModel + ?Sized>(
    model: &M,
    force: &ForceField,
    params: &SchemeParams,
    x: &[f64],
    xi: &[f64],
) -> Result<StepOutcome> {
    run_one(model, params, x, xi, |s, out| {
        s.ua(model, force, params, x, xi, out, DirectionMode::Implicit)
    })
}

/// `x + √h A + h B`, the explicit expansion matched by the UA step in the weak sense.
pub fn explicit_expansion_step<M: ConstraintModel + ?Sized>(
    model: &M,
    force: &ForceField,
    params: &SchemeParams,
    x: &[f64],
    xi: &[f64],
) -> Result<Vec<f64>> {
    run_one(model, params, x, xi, |s, out| s.expansion(model, force, params, x, xi, out)).map(|o| o.state)
}
