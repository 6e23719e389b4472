pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod nn;
pub mod seed;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub mod backbone;
pub mod data;
pub mod eval;
pub mod evm;
pub mod model;
pub mod motion;
