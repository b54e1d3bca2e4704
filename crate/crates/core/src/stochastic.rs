//! Counter-addressed noise streams.
//!
//! Every increment is a pure function of `(seed, trajectory, step, d)`. The
//! trajectory index selects a ChaCha8 stream and the step index a fixed word
//! window inside it, so a trajectory's noise never depends on which worker ran
//! it or in what order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Atoms of the discrete increment law: `0` with probability 2/3, `±√3` with probability 1/6 each.
pub const XI_ATOMS: [(f64, f64); 3] = [
    (0.0, 2.0 / 3.0),
    (SQRT_3, 1.0 / 6.0),
    (-SQRT_3, 1.0 / 6.0),
];

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Words reserved per step for Gaussian draws (the ziggurat consumes a variable number).
const GAUSSIAN_WINDOW: u128 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseKind {
    /// Bounded three-point increments matching Gaussian moments up to order four.
    #[default]
    Discrete,
    /// Standard normal increments.
    Gaussian,
}

impl std::str::FromStr for NoiseKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "discrete" | "xi" => Ok(NoiseKind::Discrete),
            "gaussian" | "normal" => Ok(NoiseKind::Gaussian),
            other => Err(format!("unknown noise kind `{other}` (expected discrete|gaussian)")),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::Discrete => "discrete",
            NoiseKind::Gaussian => "gaussian",
        })
    }
}

/// Maps a uniform 64-bit word onto the three-point law.
///
/// `⌊6u / 2⁶⁴⌋` selects one of six equally likely cells; the deviation from exact
/// sixths is below 2⁻⁶¹ per cell.
#[inline]
fn xi_from_word(word: u64) -> f64 {
    match ((word as u128 * 6) >> 64) as u8 {
        0..=3 => 0.0,
        4 => SQRT_3,
        _ => -SQRT_3,
    }
}

/// Noise for one trajectory. Sequential calls with consecutive step indices reuse the
/// generator state; any other access pattern seeks.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    trajectory: u64,
    dim: usize,
    kind: NoiseKind,
    rng: ChaCha8Rng,
    next_step: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, trajectory: u64, dim: usize, kind: NoiseKind) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trajectory);
        Self {
            seed,
            trajectory,
            dim,
            kind,
            rng,
            next_step: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trajectory(&self) -> u64 {
        self.trajectory
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    fn window(&self, step: u64) -> u128 {
        match self.kind {
            // one u64 (two 32-bit words) per component
            NoiseKind::Discrete => step as u128 * 2 * self.dim as u128,
            NoiseKind::Gaussian => step as u128 * GAUSSIAN_WINDOW,
        }
    }

    /// Writes the increment of step `step` into `out` (length `d`).
    pub fn fill(&mut self, step: u64, out: &mut [f64]) {
        let seek = match self.kind {
            NoiseKind::Discrete => step != self.next_step,
            NoiseKind::Gaussian => true,
        };
        if seek {
            self.rng.set_word_pos(self.window(step));
        }
        match self.kind {
            NoiseKind::Discrete => {
                for o in out[..self.dim].iter_mut() {
                    *o = xi_from_word(self.rng.next_u64());
                }
            }
            NoiseKind::Gaussian => {
                for o in out[..self.dim].iter_mut() {
                    *o = self.rng.sample(StandardNormal);
                }
            }
        }
        self.next_step = step + 1;
    }

    /// The increment of step `step` as a fresh vector.
    pub fn sample(&mut self, step: u64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.fill(step, &mut v);
        v
    }
}

/// Three-point increment for `(seed, trajectory, step)` in dimension `d`.
pub fn sample_xi(seed: u64, trajectory: u64, step: u64, d: usize) -> Vec<f64> {
    NoiseStream::new(seed, trajectory, d, NoiseKind::Discrete).sample(step)
}

/// Standard normal increment for `(seed, trajectory, step)` in dimension `d`.
pub fn sample_gaussian(seed: u64, trajectory: u64, step: u64, d: usize) -> Vec<f64> {
    NoiseStream::new(seed, trajectory, d, NoiseKind::Gaussian).sample(step)
}

/// `E[ξ^k]` of one component, by exact enumeration of the three atoms.
///
/// The weights are taken over the common denominator 6 and `(±√3)^k` is split into
/// an integer power of 3 and at most one factor `√3`, so the result is exact.
pub fn xi_moment(k: u32) -> f64 {
    // (atom sign, weight in sixths) for 0, +√3, −√3
    let atoms: [(i64, i64); 3] = [(0, 4), (1, 1), (-1, 1)];
    let mut num: i64 = 0;
    for (sign, w) in atoms {
        let base = if sign == 0 {
            if k == 0 { 1 } else { 0 }
        } else {
            sign.pow(k) * 3i64.pow(k / 2)
        };
        num += w * base;
    }
    let value = num as f64 / 6.0;
    if k % 2 == 1 {
        value * SQRT_3
    } else {
        value
    }
}
