pub mod augment;
pub mod corrupt;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model_pair;
pub mod nn;
pub mod objectives;
pub mod plr;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
