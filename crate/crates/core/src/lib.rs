//! Cross-resolution teacher-student training for convolutional embedding
//! networks, with verification/identification metrics and a cost model.

pub mod cost;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
