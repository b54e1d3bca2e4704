use crate::error::{Error, Result};

/// Beyond this ratio `h/ε`, `e^{-h/ε}` is flushed to zero (it is subnormal or zero anyway).
const EXP_FLUSH: f64 = 745.0;

/// Step size, penalization and noise amplitude plus the projection solver controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeParams {
    pub h: f64,
    /// Penalization parameter ε. `f64::INFINITY` selects the unpenalized limit.
    pub eps: f64,
    pub sigma: f64,
    /// Relative tolerance of the projection solve: `|ζ(X) − c| ≤ tol · (1 + |ζ(x)|)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl SchemeParams {
    pub const DEFAULT_TOL: f64 = 1e-12;
    pub const DEFAULT_MAX_ITER: usize = 50;

    pub fn new(h: f64, eps: f64, sigma: f64) -> Self {
        Self {
            h,
            eps,
            sigma,
            tol: Self::DEFAULT_TOL,
            max_iter: Self::DEFAULT_MAX_ITER,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::config("h", format!("timestep must be positive, got {}", self.h)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", format!("penalization must be positive, got {}", self.eps)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", format!("noise amplitude must be non-negative, got {}", self.sigma)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("tol", "solver tolerance must be positive"));
        }
        Ok(())
    }

    pub fn coeffs(&self) -> StiffCoeffs {
        stiff_coeffs(self.h, self.eps)
    }
}

/// Every `ε`-dependent factor of the uniformly accurate step, evaluated without cancellation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StiffCoeffs {
    /// `e^{−h/ε}`
    pub k_exp: f64,
    /// `1 − e^{−h/ε}`
    pub k_om: f64,
    /// `ε (1 − e^{−h/ε})`
    pub k_eps_om: f64,
    /// `√(ε/2 · (1 − e^{−2h/ε}))`
    pub k_noise: f64,
    /// `(1 − e^{−h/ε})² / 2`
    pub k_om_sq_half: f64,
    /// `ε/8 · (1 − e^{−2h/ε})`
    pub k_fix: f64,
    /// `ε (1 − e^{−h/ε}) − √(εh/2 · (1 − e^{−2h/ε}))`
    pub k_mix: f64,
}

/// `1 − e^{−u}` for `u ≥ 0`.
#[inline]
pub fn one_minus_exp_neg(u: f64) -> f64 {
    if u > EXP_FLUSH {
        1.0
    } else {
        -(-u).exp_m1()
    }
}

/// `(1 − e^{−u}) / u`, equal to 1 at `u = 0`.
#[inline]
pub fn phi1(u: f64) -> f64 {
    if u == 0.0 {
        1.0
    } else if u < 1e-8 {
        1.0 - 0.5 * u
    } else {
        one_minus_exp_neg(u) / u
    }
}

/// Coefficients for step `h` and penalization `eps` (`eps = ∞` gives the unpenalized limits).
pub fn stiff_coeffs(h: f64, eps: f64) -> StiffCoeffs {
    let u = h / eps;
    let k_exp = if u > EXP_FLUSH { 0.0 } else { (-u).exp() };
    let k_om = one_minus_exp_neg(u);
    let om2 = one_minus_exp_neg(2.0 * u);
    // For small u the ε-scaled forms are rewritten with phi1 so that ε = ∞ is finite;
    // for large u the direct ε-forms avoid overflow of h/u.
    let (k_eps_om, noise_sq, fix) = if u < 1.0 {
        let p1 = phi1(u);
        let p2 = phi1(2.0 * u);
        (h * p1, h * p2, 0.25 * h * p2)
    } else {
        (eps * k_om, 0.5 * eps * om2, 0.125 * eps * om2)
    };
    let k_noise = noise_sq.sqrt();
    let k_mix = k_eps_om - (h * noise_sq).sqrt();
    StiffCoeffs {
        k_exp,
        k_om,
        k_eps_om,
        k_noise,
        k_om_sq_half: 0.5 * k_om * k_om,
        k_fix: fix,
        k_mix,
    }
}

impl StiffCoeffs {
    pub fn fields(&self) -> [f64; 7] {
        [
            self.k_exp,
            self.k_om,
            self.k_eps_om,
            self.k_noise,
            self.k_om_sq_half,
            self.k_fix,
            self.k_mix,
        ]
    }
}
