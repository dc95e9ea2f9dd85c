pub mod deepsets;
pub mod error;
pub mod cli;
pub mod harness;
pub mod nn;
pub mod ope;
pub mod policy;
pub mod rng;
pub mod sim_dynamic;
pub mod sim_nondynamic;
pub mod spatial;

pub use error::{Error, Result};
