//! Machine unlearning through low-rank adapters placed in the dominant
//! singular subspace of each layer's forgetting gradient.

pub mod adapter;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod unlearn;

pub use error::{Error, Result};
