pub mod error;
pub mod fcp;
pub mod gfst;
pub mod pipeline;
pub mod pkl;
pub mod tensor;
pub mod training;
pub mod cbbi;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod registry;
pub mod synthgen;

pub use error::{Error, Result};
