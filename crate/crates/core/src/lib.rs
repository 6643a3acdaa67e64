//! Dense-tensor math with reverse-mode differentiation, plus the checkpoint
//! format shared by every model in this workspace.
//!
//! All runtime math is f64; checkpoints store f32. Ops are pure functions of
//! their inputs, so identical seeds and inputs give bit-identical outputs.

pub mod checkpoint;
pub mod error;
pub mod fdcheck;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tape::{GradTape, ValueId, GELU_TANH_COEFF, LAYER_NORM_EPS};
pub use tensor::Tensor;

use rand_chacha::ChaCha8Rng;

/// The workspace-wide seeded RNG. One instance per run; never re-seed
/// mid-run or resumed runs will diverge.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
