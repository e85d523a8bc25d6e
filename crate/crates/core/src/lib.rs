//! Accelerated linearized Laplace approximation (ELLA) for small neural
//! networks, with dense exact-LLA oracles for verification.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fileio;
pub mod likelihood;
pub mod linalg;
pub mod metrics;
pub mod nystrom;
pub mod oracle;
pub mod posterior;
pub mod train;

pub use error::{EllaError, Result};
