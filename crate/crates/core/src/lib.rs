pub mod cca;
pub mod cellpca;
pub mod cellrcov;
pub mod data;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod mcd;
pub mod metrics;
pub mod rng;
pub mod simlab;

pub use data::DataMatrix;
pub use error::{Error, Result};
