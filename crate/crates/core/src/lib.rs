pub mod autograd;
pub mod backbone;
pub mod bev_encoder;
pub mod error;
pub mod evaluator;
pub mod heads;
pub mod map_core;
pub mod map_decoder;
pub mod matching_losses;
pub mod model;
pub mod nn;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
