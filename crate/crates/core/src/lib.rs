pub mod analysis;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod input;
pub mod model;
pub mod optim;
pub mod params;
pub mod store;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
