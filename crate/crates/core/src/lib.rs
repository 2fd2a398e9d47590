pub mod adversarial;
pub mod backbones;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evalsuite;
pub mod imagecore;
pub mod seeding;
pub mod staging;
pub mod synth;
pub mod wavelet;

pub use error::{Error, Result};
