//! Selective state space (S6) inter-frame modeling for video frame
//! interpolation, on a minimal in-repo tensor/autodiff engine.

pub mod blocks;
pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod scan2d;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use ssm::{selective_scan, SsmParams};
pub use tensor::{Element, Gradients, Tensor};
pub use cli::run_cli;
