//! Learned binary routing trees for retrieval.

pub mod baselines;
pub mod error;
pub mod index;
pub mod inspect;
pub mod io;
pub mod model;
pub mod objective;
pub mod params;
pub mod propagation;
pub mod split;
pub mod synth;
pub mod train;
pub mod tree;

pub use error::{Error, Result};
