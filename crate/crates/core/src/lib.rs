pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod linmodel;
pub mod multiplicity;
pub mod pipeline;
pub mod priorfit;
pub mod pvalues;
pub mod quadrature;
pub mod sim;
pub mod special;
pub mod trend;

pub use error::{Error, Result};
pub use nalgebra;
