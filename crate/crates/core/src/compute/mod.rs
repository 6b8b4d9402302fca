//! Differentiable compute core: matrices, a recording tape, dense networks,
//! finite-difference verification and Adam.

mod adam;
mod gradcheck;
mod matrix;
mod mlp;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_multi};
pub use matrix::Matrix;
pub(crate) use mlp::batch_norm_graph;
pub use mlp::{
    apply_batch_norm_updates, mlp_forward, Activation, BatchNormUpdate, ForwardCtx, Mlp, MlpConfig, Mode,
    BATCH_NORM_EPS, BATCH_NORM_MOMENTUM,
};
pub use params::{derive_seed, rng_from_seed, Gradients, Param, ParamId, ParamStore, Rng, StoredParam};
pub use tape::{Tape, Var};

/// `0.5 · ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
