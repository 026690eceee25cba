//! GridTST: multivariate forecasting with patch tokens laid out on a
//! time × variate grid and alternating cross-time / cross-variate attention.

pub mod error;
pub mod data;
pub mod attention;
pub mod cli;
pub mod embed;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
