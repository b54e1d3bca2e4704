//! One-step maps of the integrators and their coefficients.

mod coeffs;
mod force;
mod steps;

pub use coeffs::{one_minus_exp_neg, phi1, stiff_coeffs, SchemeParams, StiffCoeffs};
pub use force::ForceField;
pub use steps::{
    constrained_euler_explicit_step, constrained_euler_implicit_step, euler_unconstrained_step,
    explicit_expansion_step, step, ua_step, ua_step_codim1, ua_step_implicit_direction, StepOutcome, StepStats,
    Stepper,
};

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeId {
    /// Explicit Euler on the penalized dynamics in `R^d`.
    EulerRd,
    /// Euler step projected along `g(x)`.
    EulerConstrained,
    /// Euler step projected along `g(X)`.
    EulerConstrainedImplicit,
    /// Uniformly accurate projection step.
    Ua,
    /// Uniformly accurate step with implicit projection direction.
    UaImplicit,
    /// The explicit `x + √h A + h B` expansion the UA step is built on.
    UaExpansion,
}

impl SchemeId {
    pub const ALL: [SchemeId; 6] = [
        SchemeId::EulerRd,
        SchemeId::EulerConstrained,
        SchemeId::EulerConstrainedImplicit,
        SchemeId::Ua,
        SchemeId::UaImplicit,
        SchemeId::UaExpansion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeId::EulerRd => "euler-rd",
            SchemeId::EulerConstrained => "euler-constrained",
            SchemeId::EulerConstrainedImplicit => "euler-constrained-implicit",
            SchemeId::Ua => "ua",
            SchemeId::UaImplicit => "ua-implicit",
            SchemeId::UaExpansion => "ua-expansion",
        }
    }

    /// Whether the step solves a projection system.
    pub fn is_projected(self) -> bool {
        !matches!(self, SchemeId::EulerRd | SchemeId::UaExpansion)
    }

    /// Projected schemes may not lose trajectories to the divergence guard.
    pub fn respects_manifold(self) -> bool {
        self.is_projected()
    }

    /// Constrained Euler variants land exactly on `ζ = 0`.
    pub fn is_constrained(self) -> bool {
        matches!(self, SchemeId::EulerConstrained | SchemeId::EulerConstrainedImplicit)
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemeId::ALL
            .iter()
            .copied()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = SchemeId::ALL.iter().map(|s| s.as_str()).collect();
                format!("unknown scheme `{s}` (expected one of {})", names.join(", "))
            })
    }
}
