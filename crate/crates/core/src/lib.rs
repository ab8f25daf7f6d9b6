//! Concept activation vector laboratory.

pub mod cav;
pub mod consistency;
pub mod elements;
pub mod entanglement;
pub mod error;
pub mod lab;
pub mod nn;
pub mod rng;
pub mod spatial;
pub mod stats;
pub mod sys;
pub mod tcav;
pub mod tensor;

pub use error::{Error, Result};
