/// Smooth drift `f(x)` of the penalized dynamics.
#[derive(Debug, Clone, PartialEq)]
pub enum ForceField {
    Zero,
    /// `f(x) = −k (x − center)`.
    Harmonic { stiffness: f64, center: Vec<f64> },
    /// `f(x) = −25 (x₁ − R + r, x₂, x₃)`: pulls the torus walker towards `(R − r, 0, 0)`.
    TorusConfinement { major: f64, minor: f64 },
    /// `f = −∇V` with `V(x) = 50 Tr((x − I)ᵀ(x − I))`, i.e. `f(x) = −100 (x − I)` on `R^{m×m}`.
    OrthogonalWell { m: usize },
}

impl ForceField {
    pub const TORUS_STIFFNESS: f64 = 25.0;
    pub const ORTHOGONAL_STIFFNESS: f64 = 100.0;

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            ForceField::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            ForceField::Harmonic { stiffness, center } => {
                for ((o, xi), ci) in out.iter_mut().zip(x).zip(center) {
                    *o = -stiffness * (xi - ci);
                }
            }
            ForceField::TorusConfinement { major, minor } => {
                let k = Self::TORUS_STIFFNESS;
                out[0] = -k * (x[0] - major + minor);
                out[1] = -k * x[1];
                out[2] = -k * x[2];
            }
            ForceField::OrthogonalWell { m } => {
                let k = Self::ORTHOGONAL_STIFFNESS;
                for a in 0..*m {
                    for b in 0..*m {
                        let id = if a == b { 1.0 } else { 0.0 };
                        out[a * m + b] = -k * (x[a * m + b] - id);
                    }
                }
            }
        }
    }

    pub fn to_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.eval(x, &mut out);
        out
    }
}
