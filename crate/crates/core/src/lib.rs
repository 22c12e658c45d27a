pub mod autodiff;
pub mod corruption;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod losses;
pub mod ledger;
pub mod mining;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
