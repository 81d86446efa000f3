pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod runner;
pub mod supervision;
pub mod tensor;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use model::MsFormer;
pub use tensor::{Scalar, Tensor};
