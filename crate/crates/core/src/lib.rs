pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod proxy;
pub mod report;
pub mod supervision;
pub mod synth;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
