pub mod autograd;
pub mod error;
pub mod params;

pub use error::{Error, Result};
pub mod grammar;
pub mod world;
pub mod corpus;
pub mod checkpoint;
pub mod dual_encoder;
pub mod losses;
pub mod nn;
pub mod decoding;
pub mod narrator;
pub mod rephraser;
pub mod training;
pub mod evaluation;
pub mod experiments;
