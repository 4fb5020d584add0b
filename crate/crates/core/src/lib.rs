pub mod acquisition;
pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod experiment;
pub mod model;
pub mod rng;
mod scalar;

pub use scalar::{xlogx, Scalar};

pub type Model = model::ModelState<f64>;
pub type Snapshot = model::ParameterSnapshot<f64>;
pub type Samples = acquisition::PredictionSamples<f64>;
