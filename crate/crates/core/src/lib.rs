pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod router;
pub mod routing;
pub mod tasks;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
