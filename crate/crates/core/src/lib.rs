pub mod autodiff;
pub mod baselines;
pub mod dicop;
pub mod dpl;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod image;
pub mod probe;
pub mod synthbench;

pub use error::{Error, Result};
