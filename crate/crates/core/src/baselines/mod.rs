//! Comparison models: a conditional Gaussian mixture density and
//! deterministic classification/regression heads.

mod gmm;
mod head;

pub use gmm::{GmmConfig, GmmModel, MixtureParams, LOG_STD_MAX, LOG_STD_MIN};
pub use head::{DeterministicHead, HeadConfig, HeadTask, LOGIT_CLAMP};
