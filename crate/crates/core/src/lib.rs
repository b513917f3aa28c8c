pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod extraction;
pub mod gates;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod tasks;
pub mod tensor;
pub mod training;
pub mod twostream;

pub use error::{Error, Result};
