//! Constraint models `ζ: R^d → R^q` and the geometric quantities derived from them.
//!
//! Layout conventions used throughout the crate:
//! * `g(x)` is stored row-major as a `d × q` slice, `g[i * q + j] = ∂ζ_j/∂x_i`.
//! * `g′(x)(v)` (the directional derivative of `g` along `v`) has the same layout.
//! * q×q matrices are row-major.

use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor};

/// A smooth constraint map together with analytic first and second derivative actions.
///
/// Implementations must be pure functions of `x`; models are shared by reference
/// across concurrent trajectory workers.
pub trait ConstraintModel: Send + Sync {
    /// Ambient dimension `d`.
    fn dim(&self) -> usize;
    /// Number of scalar constraints `q`.
    fn codim(&self) -> usize;
    /// Writes `ζ(x)` (length `q`).
    fn zeta(&self, x: &[f64], out: &mut [f64]);
    /// Writes `g(x) = ∇ζ(x)` (`d × q`, row-major).
    fn grad(&self, x: &[f64], out: &mut [f64]);
    /// Writes `g′(x)(v)` (`d × q`, row-major). Column `j` is `Hess ζ_j(x) v`.
    fn grad_dir(&self, x: &[f64], v: &[f64], out: &mut [f64]);

    /// Writes `div(g)(x)`, i.e. `Σ_i g′(x)(e_i)_{ij}` (the Laplacian of each `ζ_j`).
    fn div_grad(&self, x: &[f64], out: &mut [f64]) {
        let (d, q) = (self.dim(), self.codim());
        let mut e = vec![0.0; d];
        let mut dg = vec![0.0; d * q];
        out[..q].iter_mut().for_each(|o| *o = 0.0);
        for i in 0..d {
            e[i] = 1.0;
            self.grad_dir(x, &e, &mut dg);
            e[i] = 0.0;
            for j in 0..q {
                out[j] += dg[i * q + j];
            }
        }
    }
}

/// The constraint models shipped with the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Manifold {
    /// `ζ(x) = x_normal` in `R^dim`.
    Hyperplane { dim: usize, normal: usize },
    /// `ζ(x) = |x|² − radius²` in `R^dim`.
    Sphere { dim: usize, radius: f64 },
    /// `ζ(x) = (|x|² + R² − r²)² − 4R²(x₁² + x₂²)` in `R³`.
    Torus { major: f64, minor: f64 },
    /// `O(m) ⊂ R^{m×m}`: the entries `(XᵀX − I)_{kl}`, `k ≤ l`, ordered row-major over pairs.
    /// `X` is flattened row-major, `x[a * m + b] = X_ab`.
    OrthogonalGroup { m: usize },
}

impl Manifold {
    pub const TORUS_MAJOR: f64 = 3.0;
    pub const TORUS_MINOR: f64 = 1.0;

    /// Torus with `R = 3`, `r = 1`.
    pub fn torus() -> Self {
        Manifold::Torus {
            major: Self::TORUS_MAJOR,
            minor: Self::TORUS_MINOR,
        }
    }

    pub fn unit_sphere() -> Self {
        Manifold::Sphere {
            dim: 3,
            radius: 1.0,
        }
    }

    /// `ζ(x) = x_{dim-1}`.
    pub fn hyperplane(dim: usize) -> Self {
        Manifold::Hyperplane {
            dim,
            normal: dim - 1,
        }
    }

    /// A canonical point on the manifold: `(R − r, 0, 0)` for the torus, `I` for `O(m)`.
    pub fn reference_point(&self) -> Vec<f64> {
        match *self {
            Manifold::Hyperplane { dim, .. } => vec![0.0; dim],
            Manifold::Sphere { dim, radius } => {
                let mut x = vec![0.0; dim];
                x[0] = radius;
                x
            }
            Manifold::Torus { major, minor } => vec![major - minor, 0.0, 0.0],
            Manifold::OrthogonalGroup { m } => identity_flat(m),
        }
    }

    /// Constraint index pairs `(k, l)` of the `O(m)` model in storage order.
    pub fn orthogonal_pairs(m: usize) -> Vec<(usize, usize)> {
        (0..m).flat_map(|k| (k..m).map(move |l| (k, l))).collect()
    }
}

pub fn identity_flat(m: usize) -> Vec<f64> {
    let mut x = vec![0.0; m * m];
    for a in 0..m {
        x[a * m + a] = 1.0;
    }
    x
}

impl ConstraintModel for Manifold {
    fn dim(&self) -> usize {
        match *self {
            Manifold::Hyperplane { dim, .. } | Manifold::Sphere { dim, .. } => dim,
            Manifold::Torus { .. } => 3,
            Manifold::OrthogonalGroup { m } => m * m,
        }
    }

    fn codim(&self) -> usize {
        match *self {
            Manifold::OrthogonalGroup { m } => m * (m + 1) / 2,
            _ => 1,
        }
    }

    fn zeta(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            Manifold::Hyperplane { normal, .. } => out[0] = x[normal],
            Manifold::Sphere { dim, radius } => {
                out[0] = linalg::dot(&x[..dim], &x[..dim]) - radius * radius;
            }
            Manifold::Torus { major, minor } => {
                let (r2, rr2) = (major * major, minor * minor);
                let s = x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + r2 - rr2;
                out[0] = s * s - 4.0 * r2 * (x[0] * x[0] + x[1] * x[1]);
            }
            Manifold::OrthogonalGroup { m } => {
                let mut p = 0;
                for k in 0..m {
                    for l in k..m {
                        let mut s = 0.0;
                        for a in 0..m {
                            s += x[a * m + k] * x[a * m + l];
                        }
                        out[p] = if k == l { s - 1.0 } else { s };
                        p += 1;
                    }
                }
            }
        }
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            Manifold::Hyperplane { dim, normal } => {
                out[..dim].iter_mut().for_each(|o| *o = 0.0);
                out[normal] = 1.0;
            }
            Manifold::Sphere { dim, .. } => {
                for i in 0..dim {
                    out[i] = 2.0 * x[i];
                }
            }
            Manifold::Torus { major, minor } => {
                let (r2, rr2) = (major * major, minor * minor);
                let s = x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + r2 - rr2;
                out[0] = (4.0 * s - 8.0 * r2) * x[0];
                out[1] = (4.0 * s - 8.0 * r2) * x[1];
                out[2] = 4.0 * s * x[2];
            }
            Manifold::OrthogonalGroup { m } => orthogonal_bilinear(m, x, out),
        }
    }

    fn grad_dir(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        match *self {
            Manifold::Hyperplane { dim, .. } => out[..dim].iter_mut().for_each(|o| *o = 0.0),
            Manifold::Sphere { dim, .. } => {
                for i in 0..dim {
                    out[i] = 2.0 * v[i];
                }
            }
            Manifold::Torus { major, minor } => {
                let (r2, rr2) = (major * major, minor * minor);
                let s = x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + r2 - rr2;
                let xv = 8.0 * (x[0] * v[0] + x[1] * v[1] + x[2] * v[2]);
                out[0] = xv * x[0] + (4.0 * s - 8.0 * r2) * v[0];
                out[1] = xv * x[1] + (4.0 * s - 8.0 * r2) * v[1];
                out[2] = xv * x[2] + 4.0 * s * v[2];
            }
            // ζ is quadratic, so g is linear in X and g′(x)(v) = g(v).
            Manifold::OrthogonalGroup { m } => orthogonal_bilinear(m, v, out),
        }
    }

    fn div_grad(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            Manifold::Hyperplane { .. } => out[0] = 0.0,
            Manifold::Sphere { dim, .. } => out[0] = 2.0 * dim as f64,
            Manifold::Torus { major, minor } => {
                let (r2, rr2) = (major * major, minor * minor);
                let n2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
                out[0] = 8.0 * n2 + 12.0 * (n2 + r2 - rr2) - 16.0 * r2;
            }
            Manifold::OrthogonalGroup { m } => {
                let mut p = 0;
                for k in 0..m {
                    for l in k..m {
                        out[p] = if k == l { 2.0 * m as f64 } else { 0.0 };
                        p += 1;
                    }
                }
            }
        }
    }
}

/// `∂ζ_{kl}/∂X_ab = δ_bk Y_al + δ_bl Y_ak` evaluated with `Y = y`.
fn orthogonal_bilinear(m: usize, y: &[f64], out: &mut [f64]) {
    let q = m * (m + 1) / 2;
    out[..m * m * q].iter_mut().for_each(|o| *o = 0.0);
    let mut p = 0;
    for k in 0..m {
        for l in k..m {
            for a in 0..m {
                // row (a, b = k) gets Y_al, row (a, b = l) gets Y_ak
                out[(a * m + k) * q + p] += y[a * m + l];
                out[(a * m + l) * q + p] += y[a * m + k];
            }
            p += 1;
        }
    }
}

/// `G(x) = g(x)ᵀ g(x)` (q×q, row-major).
pub fn gram<M: ConstraintModel + ?Sized>(model: &M, x: &[f64]) -> Vec<f64> {
    let (d, q) = (model.dim(), model.codim());
    let mut g = vec![0.0; d * q];
    model.grad(x, &mut g);
    let mut out = vec![0.0; q * q];
    gram_from_grad(&g, d, q, &mut out);
    out
}

pub(crate) fn gram_from_grad(g: &[f64], d: usize, q: usize, out: &mut [f64]) {
    for a in 0..q {
        for b in a..q {
            let mut s = 0.0;
            for i in 0..d {
                s += g[i * q + a] * g[i * q + b];
            }
            out[a * q + b] = s;
            out[b * q + a] = s;
        }
    }
}

/// Orthogonal projector onto the tangent space, `I_d − g G⁻¹ gᵀ` (d×d, row-major).
pub fn tangent_projection<M: ConstraintModel + ?Sized>(model: &M, x: &[f64]) -> Result<Vec<f64>> {
    let mut frame = Frame::new(model.dim(), model.codim());
    frame.update(model, x)?;
    let d = frame.d;
    let mut pi = frame.normal_projector();
    for v in pi.iter_mut() {
        *v = -*v;
    }
    for i in 0..d {
        pi[i * d + i] += 1.0;
    }
    Ok(pi)
}

/// `∇ ln det G(x)` through the trace identity `2 Σ_i g′(e_i) G⁻¹ gᵀ e_i`.
pub fn fixman_grad<M: ConstraintModel + ?Sized>(model: &M, x: &[f64]) -> Result<Vec<f64>> {
    let mut frame = Frame::new(model.dim(), model.codim());
    frame.update(model, x)?;
    let mut out = vec![0.0; frame.d];
    frame.fixman_grad(model, x, &mut out);
    Ok(out)
}

/// The three expressions of the Fixman drift at σ = 1.
#[derive(Debug, Clone)]
pub struct FixmanForms {
    /// `(1/4) ∇ ln det G`, with `∂_j ln det G = Tr(G⁻¹ ∂_j G)` and `∂_j G = g′(e_j)ᵀ g + gᵀ g′(e_j)`.
    pub log_det_form: Vec<f64>,
    /// `(1/2) Σ_i g′(e_i) G⁻¹ gᵀ e_i`.
    pub trace_form: Vec<f64>,
    /// `(1/2) Σ_i g′(g G⁻¹ gᵀ e_i) G⁻¹ gᵀ e_i`.
    pub projected_form: Vec<f64>,
}

pub fn fixman_forms<M: ConstraintModel + ?Sized>(model: &M, x: &[f64]) -> Result<FixmanForms> {
    let (d, q) = (model.dim(), model.codim());
    let mut frame = Frame::new(d, q);
    frame.update(model, x)?;

    let mut ginv = vec![0.0; q * q];
    for b in 0..q {
        let mut col = vec![0.0; q];
        col[b] = 1.0;
        frame.gram_solve(&mut col);
        for a in 0..q {
            ginv[a * q + b] = col[a];
        }
    }

    let mut log_det_form = vec![0.0; d];
    let mut trace_form = vec![0.0; d];
    let mut projected_form = vec![0.0; d];
    let mut e = vec![0.0; d];
    let mut dg = vec![0.0; d * q];
    let mut dgram = vec![0.0; q * q];
    let mut t = vec![0.0; q];
    let mut qi = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        model.grad_dir(x, &e, &mut dg);
        e[j] = 0.0;
        // ∂_j G = g′(e_j)ᵀ g + gᵀ g′(e_j)
        for a in 0..q {
            for b in 0..q {
                let mut s = 0.0;
                for i in 0..d {
                    s += dg[i * q + a] * frame.g[i * q + b] + frame.g[i * q + a] * dg[i * q + b];
                }
                dgram[a * q + b] = s;
            }
        }
        let tr: f64 = (0..q)
            .map(|a| (0..q).map(|b| ginv[a * q + b] * dgram[b * q + a]).sum::<f64>())
            .sum();
        log_det_form[j] = 0.25 * tr;

        frame.gram_solve_row(j, &mut t);
        linalg::mat_vec(&dg, d, q, &t, &mut tmp);
        linalg::axpy(0.5, &tmp, &mut trace_form);

        linalg::mat_vec(&frame.g, d, q, &t, &mut qi);
        model.grad_dir(x, &qi, &mut dg);
        linalg::mat_vec(&dg, d, q, &t, &mut tmp);
        linalg::axpy(0.5, &tmp, &mut projected_form);
    }
    Ok(FixmanForms {
        log_det_form,
        trace_form,
        projected_form,
    })
}

/// Maximum pairwise Euclidean distance between the three Fixman expressions at `x` (σ = 1).
pub fn fixman_identity_residual<M: ConstraintModel + ?Sized>(model: &M, x: &[f64]) -> Result<f64> {
    let f = fixman_forms(model, x)?;
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt()
    };
    Ok(dist(&f.log_det_form, &f.trace_form)
        .max(dist(&f.log_det_form, &f.projected_form))
        .max(dist(&f.trace_form, &f.projected_form)))
}

/// `ln det G(x)`; used by finite-difference audits of the Fixman gradient.
pub fn ln_det_gram<M: ConstraintModel + ?Sized>(model: &M, x: &[f64]) -> Result<f64> {
    let mut frame = Frame::new(model.dim(), model.codim());
    frame.update(model, x)?;
    Ok(frame.factor.ln_det())
}

/// Cached geometry at one point: `ζ`, `g`, `G` and a factorization of `G`.
///
/// All buffers are allocated once; [`Frame::update`] only overwrites them.
#[derive(Debug, Clone)]
pub struct Frame {
    pub d: usize,
    pub q: usize,
    pub zeta: Vec<f64>,
    pub g: Vec<f64>,
    pub gram: Vec<f64>,
    factor: SpdFactor,
    row: Vec<f64>,
    e: Vec<f64>,
    dg: Vec<f64>,
    tmp: Vec<f64>,
}

impl Frame {
    pub fn new(d: usize, q: usize) -> Self {
        Self {
            d,
            q,
            zeta: vec![0.0; q],
            g: vec![0.0; d * q],
            gram: vec![0.0; q * q],
            factor: SpdFactor::new(q),
            row: vec![0.0; q],
            e: vec![0.0; d],
            dg: vec![0.0; d * q],
            tmp: vec![0.0; d],
        }
    }

    pub fn check_dims<M: ConstraintModel + ?Sized>(model: &M, x: &[f64]) -> Result<()> {
        if x.len() != model.dim() {
            return Err(Error::Dimension(format!(
                "point has {} coordinates, model expects {}",
                x.len(),
                model.dim()
            )));
        }
        Ok(())
    }

    /// Evaluates `ζ`, `g`, `G` at `x` and factorizes `G`.
    pub fn update<M: ConstraintModel + ?Sized>(&mut self, model: &M, x: &[f64]) -> Result<()> {
        Self::check_dims(model, x)?;
        model.zeta(x, &mut self.zeta);
        model.grad(x, &mut self.g);
        gram_from_grad(&self.g, self.d, self.q, &mut self.gram);
        self.factor.factor(&self.gram)
    }

    /// Overwrites `b` with `G⁻¹ b`.
    pub fn gram_solve(&mut self, b: &mut [f64]) {
        self.factor.solve(b);
    }

    /// Writes `G⁻¹ gᵀ e_i` (row `i` of `g`, solved).
    pub fn gram_solve_row(&mut self, i: usize, out: &mut [f64]) {
        let q = self.q;
        out[..q].copy_from_slice(&self.g[i * q..(i + 1) * q]);
        self.factor.solve(&mut out[..q]);
    }

    /// `g G⁻¹ gᵀ` (d×d), the projector onto the normal space.
    pub fn normal_projector(&mut self) -> Vec<f64> {
        let (d, q) = (self.d, self.q);
        let mut out = vec![0.0; d * d];
        let mut t = vec![0.0; q];
        for j in 0..d {
            self.gram_solve_row(j, &mut t);
            for i in 0..d {
                out[i * d + j] = linalg::dot(&self.g[i * q..(i + 1) * q], &t);
            }
        }
        out
    }

    /// `∇ ln det G = 2 Σ_i g′(e_i) G⁻¹ gᵀ e_i`.
    pub fn fixman_grad<M: ConstraintModel + ?Sized>(&mut self, model: &M, x: &[f64], out: &mut [f64]) {
        let (d, q) = (self.d, self.q);
        out[..d].iter_mut().for_each(|o| *o = 0.0);
        for i in 0..d {
            self.e[i] = 1.0;
            model.grad_dir(x, &self.e, &mut self.dg);
            self.e[i] = 0.0;
            let mut row = std::mem::take(&mut self.row);
            self.gram_solve_row(i, &mut row);
            linalg::mat_vec(&self.dg, d, q, &row, &mut self.tmp);
            self.row = row;
            linalg::axpy(2.0, &self.tmp, out);
        }
    }

    pub fn ln_det_gram(&self) -> f64 {
        self.factor.ln_det()
    }
}
