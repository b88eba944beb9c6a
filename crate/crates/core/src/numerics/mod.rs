//! Dense linear algebra and reverse-mode differentiation.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, ridders, GradCheckReport, DEFAULT_STEP};
pub use matrix::{dot, log_sum_exp, norm, sigmoid, sigmoid_scalar, softmax, tanh, Cholesky, Matrix};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{Adjoint, BackwardCtx, Tape, Var, REL_ERROR_FLOOR};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every seeded draw in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a label.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
