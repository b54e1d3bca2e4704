//! Uniformly accurate integrators for penalized overdamped Langevin dynamics near
//! embedded manifolds, with the baseline Euler schemes and a verification harness.

pub mod error;
pub mod linalg;
pub mod manifold;
pub mod mc;
pub mod oracle;
pub mod schemes;
pub mod solver;
pub mod stochastic;

pub use error::{Error, Result};
pub use manifold::{ConstraintModel, Manifold};
pub use schemes::{ForceField, SchemeId, SchemeParams, StepOutcome};
pub use stochastic::{NoiseKind, NoiseStream};
