//! Continuous-wave time-of-flight depth simulation with multipath
//! interference, plus tooling to generate datasets, quantify depth error,
//! and train a convolutional corrector.

pub mod analysis;
pub mod autograd;
pub mod dataset;
pub mod geom;
pub mod io;
pub mod scenegen;
pub mod sensor;
pub mod stats;
pub mod network;
pub mod transport;
