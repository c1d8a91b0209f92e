pub mod config;
pub mod copula;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod normal;
pub mod quadrature;
pub mod random;
pub mod sampler;
pub mod spline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
