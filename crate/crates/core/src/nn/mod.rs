//! Parameter storage and the layer helpers the model is assembled from.

pub mod layers;
pub mod params;

pub use params::{Bound, Initializer, ParamStore, Trainable};
