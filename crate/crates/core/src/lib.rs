pub mod error;
pub mod highway_env;
pub mod marl_trainer;
pub mod noisy_net;
pub mod reward;

pub use error::{Error, Result};
