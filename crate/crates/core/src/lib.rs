pub mod autograd;
pub mod data;
pub mod error;
pub mod gates;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod spec;
pub mod surgery;
pub mod tensor;

pub use error::{Error, Result};
