pub mod clt;
pub mod error;
pub mod fft;
pub mod harness;
pub mod kernels;
pub mod noise;
pub mod quadrature;
pub mod solver;
pub mod specfun;

pub use error::{Error, Result};
