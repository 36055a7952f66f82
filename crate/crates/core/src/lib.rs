//! Guided diffusion sampling of feasible solutions for 0-1 integer programs.

pub mod cisp;
pub mod data;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod generate;
pub mod guidance;
pub mod ip;
pub mod nn;
pub mod oracle;
pub mod pipeline;

pub use error::{Error, Result};
