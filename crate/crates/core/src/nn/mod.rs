//! Small dense-network kernel with hand-written gradients.

pub mod activation;
pub mod adam;
pub mod batchnorm;
pub mod dense;
pub mod gradcheck;
pub mod loss;
pub mod lstm;
mod matrix;
mod module;
pub mod pool;
pub mod weights;

pub use adam::Adam;
pub use batchnorm::{BatchNorm, BnCache, BnStats, Mode};
pub use dense::Dense;
pub use lstm::{Lstm, LstmCache};
pub use matrix::Matrix;

pub use module::{join_name, Module};
