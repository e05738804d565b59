pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
