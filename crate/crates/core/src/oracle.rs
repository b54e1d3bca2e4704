//! Deterministic verification engines: exact one-step expectations by enumerating the
//! three-point noise law, finite-difference derivative audits, and the check suite.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::manifold::{fixman_grad, fixman_identity_residual, ln_det_gram, ConstraintModel, Manifold};
use crate::mc::CompensatedSum;
use crate::schemes::{explicit_expansion_step, step, ua_step, ua_step_codim1, ForceField, SchemeId, SchemeParams};
use crate::stochastic::{xi_moment, XI_ATOMS};

/// Largest dimension for which the `3^d` outcomes are enumerated.
pub const MAX_ENUM_DIM: usize = 7;

/// The `3^d` outcomes of `ξ ∈ {0, √3, −√3}^d` with probabilities `Π p(ξᵢ)`, `p = (2/3, 1/6, 1/6)`.
///
/// Probabilities are kept as integer weights over the common denominator `6^d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeEnumeration {
    d: usize,
}

/// Weight of each atom in sixths.
const ATOM_SIXTHS: [u64; 3] = [4, 1, 1];

impl OutcomeEnumeration {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 || d > MAX_ENUM_DIM {
            return Err(Error::Dimension(format!(
                "outcome enumeration supports 1 ≤ d ≤ {MAX_ENUM_DIM}, got {d}"
            )));
        }
        Ok(Self { d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        3usize.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `6^d`
    pub fn denominator(&self) -> u64 {
        6u64.pow(self.d as u32)
    }

    /// Writes outcome `index` (base-3 digits, first coordinate fastest) and returns its weight in units of `6^{-d}`.
    pub fn outcome(&self, index: usize, xi: &mut [f64]) -> u64 {
        let mut k = index;
        let mut w = 1;
        for x in xi.iter_mut().take(self.d) {
            let a = k % 3;
            k /= 3;
            *x = XI_ATOMS[a].0;
            w *= ATOM_SIXTHS[a];
        }
        w
    }

    pub fn probability(&self, index: usize) -> f64 {
        let mut xi = vec![0.0; self.d];
        self.outcome(index, &mut xi) as f64 / self.denominator() as f64
    }

    /// `Σ_ξ p(ξ) F(ξ)`.
    ///
    /// Outcomes may be evaluated in any order (they run on the worker pool); the reduction
    /// is always over sorted outcome index. The sum is taken as `F₀ + Σ p (F − F₀)` around the
    /// all-zero outcome, so a constant `F` is returned exactly.
    pub fn expectation(&self, f: impl Fn(&[f64]) -> Result<f64> + Sync) -> Result<f64> {
        let values: Vec<(u64, f64)> = (0..self.len())
            .into_par_iter()
            .map(|index| {
                let mut xi = vec![0.0; self.d];
                let w = self.outcome(index, &mut xi);
                Ok((w, f(&xi)?))
            })
            .collect::<Result<_>>()?;
        Ok(self.reduce(&values))
    }

    /// Weighted mean of `(weight, value)` pairs listed in outcome-index order.
    pub fn reduce(&self, values: &[(u64, f64)]) -> f64 {
        let base = values[0].1;
        let mut acc = CompensatedSum::default();
        for &(w, v) in values {
            acc.add(w as f64 * (v - base));
        }
        base + acc.value() / self.denominator() as f64
    }
}

/// `E[φ(step(x, ξ))]` over the discrete noise law, exactly up to rounding.
pub fn exact_expectation<M: ConstraintModel + ?Sized>(
    model: &M,
    scheme: SchemeId,
    force: &ForceField,
    params: &SchemeParams,
    x: &[f64],
    phi: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<f64> {
    let e = OutcomeEnumeration::new(model.dim())?;
    e.expectation(|xi| Ok(phi(&step(scheme, model, force, params, x, xi)?.state)))
}

/// `E[φ(x + √h A + h B)]` for the explicit expansion the UA step is matched against.
pub fn exact_expansion_expectation<M: ConstraintModel + ?Sized>(
    model: &M,
    force: &ForceField,
    params: &SchemeParams,
    x: &[f64],
    phi: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<f64> {
    let e = OutcomeEnumeration::new(model.dim())?;
    e.expectation(|xi| Ok(phi(&explicit_expansion_step(model, force, params, x, xi)?)))
}

/// Local weak defect `D(h) = |E φ(UA step) − E φ(expansion step)|`.
pub fn local_defect<M: ConstraintModel + ?Sized>(
    model: &M,
    force: &ForceField,
    params: &SchemeParams,
    x: &[f64],
    phi: impl Fn(&[f64]) -> f64 + Copy + Sync,
) -> Result<f64> {
    let ua = exact_expectation(model, SchemeId::Ua, force, params, x, phi)?;
    let ex = exact_expansion_expectation(model, force, params, x, phi)?;
    Ok((ua - ex).abs())
}

/// `log₂(D(h) / D(h/2))` for each `h` in `hs`.
pub fn defect_ratios<M: ConstraintModel + ?Sized>(
    model: &M,
    force: &ForceField,
    base: &SchemeParams,
    x: &[f64],
    hs: &[f64],
    phi: impl Fn(&[f64]) -> f64 + Copy + Sync,
) -> Result<Vec<f64>> {
    hs.iter()
        .map(|&h| {
            let d1 = local_defect(model, force, &SchemeParams { h, ..*base }, x, phi)?;
            let d2 = local_defect(model, force, &SchemeParams { h: 0.5 * h, ..*base }, x, phi)?;
            Ok((d1 / d2).log2())
        })
        .collect()
}

/// Largest relative mismatch of each analytic derivative against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DerivativeReport {
    pub grad: f64,
    pub grad_dir: f64,
    pub div_grad: f64,
    pub fixman: f64,
    pub points: usize,
}

impl DerivativeReport {
    pub fn max(&self) -> f64 {
        self.grad.max(self.grad_dir).max(self.div_grad).max(self.fixman)
    }
}

/// `|a − b|_∞ / max(1, |b|_∞)`: relative where the reference is large, absolute near zero.
fn mismatch(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    diff / linalg::norm_inf(b).max(1.0)
}

/// Compares `g`, `g′(x)(v)`, `div g` and `∇ ln det G` with fourth-order central differences.
pub fn derivative_audit<M: ConstraintModel + ?Sized>(model: &M, points: &[Vec<f64>]) -> DerivativeReport {
    let (d, q) = (model.dim(), model.codim());
    let mut rep = DerivativeReport {
        points: points.len(),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1FF);
    for x in points {
        // power-of-two step: dyadic points and affine maps difference exactly
        let scale = 2f64.powi((1e-3 * (1.0 + linalg::norm_inf(x))).log2().round() as i32);
        let fd = |f: &dyn Fn(&[f64], &mut [f64]), len: usize, dir: &[f64]| -> Vec<f64> {
            let mut acc = vec![0.0; len];
            let mut buf = vec![0.0; len];
            let mut y = vec![0.0; d];
            for (k, c) in [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)] {
                for i in 0..d {
                    y[i] = x[i] + k * scale * dir[i];
                }
                f(&y, &mut buf);
                linalg::axpy(c, &buf, &mut acc);
            }
            acc.iter_mut().for_each(|a| *a /= 12.0 * scale);
            acc
        };

        // g against ζ, one coordinate direction at a time
        let mut g = vec![0.0; d * q];
        model.grad(x, &mut g);
        let mut g_fd = vec![0.0; d * q];
        let mut e = vec![0.0; d];
        for i in 0..d {
            e[i] = 1.0;
            let col = fd(&|y, out| model.zeta(y, out), q, &e);
            e[i] = 0.0;
            g_fd[i * q..(i + 1) * q].copy_from_slice(&col);
        }
        rep.grad = rep.grad.max(mismatch(&g, &g_fd));

        // g′(x)(v) against g along a random direction
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut dg = vec![0.0; d * q];
        model.grad_dir(x, &v, &mut dg);
        let dg_fd = fd(&|y, out| model.grad(y, out), d * q, &v);
        rep.grad_dir = rep.grad_dir.max(mismatch(&dg, &dg_fd));

        // div g as the trace of the differentiated gradient
        let mut div = vec![0.0; q];
        model.div_grad(x, &mut div);
        let mut div_fd = vec![0.0; q];
        for i in 0..d {
            e[i] = 1.0;
            let col = fd(&|y, out| model.grad(y, out), d * q, &e);
            e[i] = 0.0;
            for j in 0..q {
                div_fd[j] += col[i * q + j];
            }
        }
        rep.div_grad = rep.div_grad.max(mismatch(&div, &div_fd));

        // Fixman gradient against ln det G
        if let Ok(fix) = fixman_grad(model, x) {
            let mut fix_fd = vec![0.0; d];
            for i in 0..d {
                e[i] = 1.0;
                let col = fd(
                    &|y, out| out[0] = ln_det_gram(model, y).unwrap_or(f64::NAN),
                    1,
                    &e,
                );
                e[i] = 0.0;
                fix_fd[i] = col[0];
            }
            rep.fixman = rep.fixman.max(mismatch(&fix, &fix_fd));
        } else {
            rep.fixman = f64::INFINITY;
        }
    }
    rep
}

/// A point drawn on the manifold: uniform angles on the torus, Haar-like via Gram–Schmidt on `O(m)`.
pub fn random_point_on(model: &Manifold, rng: &mut impl Rng) -> Vec<f64> {
    match *model {
        Manifold::Hyperplane { dim, normal } => {
            let mut x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            x[normal] = 0.0;
            x
        }
        Manifold::Sphere { dim, radius } => {
            let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = linalg::norm(&x);
            x.iter().map(|v| radius * v / n).collect()
        }
        Manifold::Torus { major, minor } => {
            let th: f64 = rng.random_range(0.0..2.0 * PI);
            let ph: f64 = rng.random_range(0.0..2.0 * PI);
            torus_param(major, minor, th, ph)
        }
        Manifold::OrthogonalGroup { m } => {
            let a: Vec<f64> = (0..m * m).map(|_| rng.sample(StandardNormal)).collect();
            gram_schmidt_columns(m, a)
        }
    }
}

/// On-manifold torus point near `(R − r, 0, 0)`, where the confining force keeps the walker
/// and single steps at the preset timesteps stay well posed.
pub fn confined_torus_point(rng: &mut impl Rng) -> Vec<f64> {
    let th: f64 = rng.random_range(-0.3..0.3);
    let ph: f64 = PI + rng.random_range(-0.6..0.6);
    torus_param(Manifold::TORUS_MAJOR, Manifold::TORUS_MINOR, th, ph)
}

fn torus_param(major: f64, minor: f64, th: f64, ph: f64) -> Vec<f64> {
    let rho = major + minor * ph.cos();
    vec![rho * th.cos(), rho * th.sin(), minor * ph.sin()]
}

fn gram_schmidt_columns(m: usize, mut a: Vec<f64>) -> Vec<f64> {
    for k in 0..m {
        for j in 0..k {
            let p: f64 = (0..m).map(|i| a[i * m + k] * a[i * m + j]).sum();
            for i in 0..m {
                a[i * m + k] -= p * a[i * m + j];
            }
        }
        let n = (0..m).map(|i| a[i * m + k] * a[i * m + k]).sum::<f64>().sqrt();
        for i in 0..m {
            a[i * m + k] /= n;
        }
    }
    a
}

/// Outcome of one verification suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn report(name: &'static str, passed: bool, detail: String) -> CheckReport {
    CheckReport { name, passed, detail }
}

/// Relative residual of the Fixman identity at 100 random points on the torus and on `O(3)`.
pub fn check_fixman_identity(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for model in [Manifold::torus(), Manifold::OrthogonalGroup { m: 3 }] {
        for _ in 0..100 {
            let x = random_point_on(&model, &mut rng);
            let r = fixman_identity_residual(&model, &x)
                .map(|r| r / fixman_grad(&model, &x).map(|f| linalg::norm(&f)).unwrap_or(1.0).max(1.0))
                .unwrap_or(f64::INFINITY);
            worst = worst.max(r);
        }
    }
    report(
        "fixman-identity",
        worst <= 1e-9,
        format!("max relative residual {worst:.3e} (limit 1e-9)"),
    )
}

/// Exact moments of the three-point law: `(0, 1, 0, 3)` up to order four, and `9 ≠ 15` at order six.
pub fn check_noise_moments() -> CheckReport {
    let m: Vec<f64> = (1..=6).map(xi_moment).collect();
    let ok = m[0] == 0.0 && m[1] == 1.0 && m[2] == 0.0 && m[3] == 3.0 && m[5] == 9.0;
    let e = OutcomeEnumeration::new(MAX_ENUM_DIM).expect("valid dimension");
    let total: u64 = (0..e.len()).map(|i| e.outcome(i, &mut [0.0; MAX_ENUM_DIM])).sum();
    report(
        "noise-moments",
        ok && total == e.denominator(),
        format!("moments 1..6 = {m:?}; weights sum to 6^{MAX_ENUM_DIM}: {}", total == e.denominator()),
    )
}

/// Grid of the codimension-one reduction check: `h ∈ {2⁻⁵..2⁻¹⁰}`, `ε ∈ {10⁻⁸..1}`.
pub fn codim1_grid() -> (Vec<f64>, Vec<f64>) {
    let hs = (5..=10).map(|k| 2f64.powi(-k)).collect();
    let eps = (0..=8).map(|k| 10f64.powi(-k)).collect();
    (hs, eps)
}

/// General and reduced UA steps on the torus agree to `1e-12` relative.
pub fn check_codim1_reduction(seed: u64) -> CheckReport {
    let model = Manifold::torus();
    let force = ForceField::TorusConfinement {
        major: Manifold::TORUS_MAJOR,
        minor: Manifold::TORUS_MINOR,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hs, epss) = codim1_grid();
    let (mut worst, mut compared, mut mismatched) = (0.0f64, 0usize, 0usize);
    for &h in &hs {
        for &eps in &epss {
            let params = SchemeParams::new(h, eps, std::f64::consts::SQRT_2);
            // a point where both forms fail is redrawn, so every cell compares 20 steps
            let (mut done, mut attempts) = (0, 0);
            while done < 20 && attempts < 200 {
                attempts += 1;
                let x = confined_torus_point(&mut rng);
                let xi: Vec<f64> = (0..3).map(|_| XI_ATOMS[rng.random_range(0..3)].0).collect();
                match (ua_step(&model, &force, &params, &x, &xi), ua_step_codim1(&model, &force, &params, &x, &xi)) {
                    (Ok(a), Ok(b)) => {
                        done += 1;
                        compared += 1;
                        worst = worst.max(mismatch(&a.state, &b.state));
                    }
                    (Err(_), Err(_)) => {}
                    _ => mismatched += 1,
                }
            }
        }
    }
    report(
        "codim1-reduction",
        worst <= 1e-12 && mismatched == 0 && compared == hs.len() * epss.len() * 20,
        format!(
            "max relative difference {worst:.3e} over {compared} steps, {mismatched} one-sided failures (limit 1e-12)"
        ),
    )
}

/// Local weak defect ratios on the torus at `(2, 0, 0)` with `φ = |x|²`.
pub fn check_local_defect_order() -> CheckReport {
    let model = Manifold::torus();
    let force = ForceField::TorusConfinement {
        major: Manifold::TORUS_MAJOR,
        minor: Manifold::TORUS_MINOR,
    };
    let x = model.reference_point();
    let hs = [2f64.powi(-6), 2f64.powi(-7), 2f64.powi(-8)];
    let mut worst = f64::INFINITY;
    let mut lines = Vec::new();
    for eps in [1e-6, 1e-4, 1e-2, 1.0] {
        let base = SchemeParams::new(hs[0], eps, std::f64::consts::SQRT_2);
        match defect_ratios(&model, &force, &base, &x, &hs, |y| linalg::dot(y, y)) {
            Ok(r) => {
                worst = r.iter().copied().fold(worst, f64::min);
                lines.push(format!("eps={eps:e}: {r:.3?}"));
            }
            Err(e) => {
                worst = f64::NEG_INFINITY;
                lines.push(format!("eps={eps:e}: {e}"));
            }
        }
    }
    report(
        "local-defect-order",
        worst >= 1.3,
        format!("min log2 ratio {worst:.3} (limit 1.3); {}", lines.join("; ")),
    )
}

/// Analytic derivatives against central differences on the hyperplane, torus and `O(3)`.
pub fn check_derivatives(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hp = Manifold::hyperplane(4);
    let hp_pts: Vec<Vec<f64>> = (0..10)
        .map(|_| {
            // dyadic coordinates keep the affine differences exact
            let x = random_point_on(&hp, &mut rng);
            x.iter().map(|v| (v * 16.0).round() / 16.0).collect()
        })
        .collect();
    let torus = Manifold::torus();
    let t_pts: Vec<Vec<f64>> = (0..100).map(|_| random_point_on(&torus, &mut rng)).collect();
    let o3 = Manifold::OrthogonalGroup { m: 3 };
    let o_pts: Vec<Vec<f64>> = (0..100)
        .map(|_| {
            let mut x = crate::manifold::identity_flat(3);
            x.iter_mut().for_each(|v| *v += 0.1 * rng.sample::<f64, _>(StandardNormal));
            x
        })
        .collect();
    let h = derivative_audit(&hp, &hp_pts).max();
    let t = derivative_audit(&torus, &t_pts).max();
    let o = derivative_audit(&o3, &o_pts).max();
    report(
        "derivative-audit",
        h == 0.0 && t <= 1e-5 && o <= 1e-5,
        format!("max mismatch hyperplane {h:.3e}, torus {t:.3e}, O(3) {o:.3e} (limit 1e-5)"),
    )
}

/// Every deterministic suite, in a fixed order.
pub fn check_suite(seed: u64) -> Vec<CheckReport> {
    vec![
        check_fixman_identity(seed),
        check_noise_moments(),
        check_codim1_reduction(seed),
        check_local_defect_order(),
        check_derivatives(seed),
    ]
}
