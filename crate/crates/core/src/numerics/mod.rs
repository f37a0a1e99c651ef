//! Dense linear algebra, reverse-mode differentiation, sampling and the
//! finite-difference gradient oracle.

pub mod fdcheck;
pub mod functions;
pub mod graph;
pub mod haar;
pub mod matrix;
pub mod nn;
pub mod optim;
pub mod params;
pub mod stats;

pub use fdcheck::finite_diff_check;
pub use functions::{gelu_approx, sinusoidal_pe, softmax_cross_entropy};
pub use graph::{GradContext, Gradients, Var};
pub use haar::{sample_haar_orthogonal, IsometricTransform};
pub use matrix::DenseMatrix;
pub use optim::{AdamW, OptimizerConfig, Schedule};
pub use params::Params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SemiRng = ChaCha8Rng;

/// Deterministic generator for a `(seed, stream)` pair.
pub fn rng_for(seed: u64, stream: u64) -> SemiRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
