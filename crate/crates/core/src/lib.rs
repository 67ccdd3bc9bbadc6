//! Linearized softmax attention for in-context linear regression under
//! distribution shift.

pub mod attention;
pub mod bayes;
pub mod config;
pub mod data;
pub mod error;
pub mod figures;
pub mod gaussian;
pub mod harness;
pub mod linalg;
pub mod oracles;
pub mod params_io;
pub mod pretrain;
pub mod theory;

pub use error::{Error, Result};
