//! Dense arrays, differentiation tape and transformer building blocks.

mod array;
mod gradcheck;
mod nn;
mod params;
mod pe;
mod tape;

pub use array::{DenseArray, Dtype};
pub use gradcheck::{grad_check, GradCheckReport};
pub use nn::{
    block_stack, mha_forward, mlp_forward, new_blocks, transformer_block, AttentionConfig,
    AttnMask, BlockParams, LayerNormParams, LinearParams, MhaParams, MlpParams,
};
pub use params::{ParamEntry, ParamId, ParamStore};
pub(crate) use params::{read_payload, write_payload};
pub use pe::sinusoidal_pe_2d;
pub use tape::{Gradients, Tape, Var};

/// Seeded generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
