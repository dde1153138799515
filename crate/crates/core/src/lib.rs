pub mod attribute;
pub mod autograd;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod plot;
pub mod reference;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod visual;

pub use error::{Error, Result};
