pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod perturb;
pub mod robustness;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
