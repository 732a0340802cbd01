pub mod error;
pub mod eval;
pub mod events;
pub mod features;
pub mod generation;
pub mod index;
pub mod model;
pub mod optim;
pub mod training;
pub mod params;
pub mod serving;
pub mod signals;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
