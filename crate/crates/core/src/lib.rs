pub mod baselines;
pub mod compute;
pub mod data;
pub mod density;
pub mod error;
pub mod eval;
pub mod flows;
pub mod infer;
pub mod model;
pub mod personalize;
pub mod train;

pub use density::DensityModel;
pub use error::{Error, Result};
