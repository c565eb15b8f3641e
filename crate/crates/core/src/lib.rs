pub mod autograd;
pub mod config;
pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod formats;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
