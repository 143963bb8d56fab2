//! Golf-swing event sequencing: annotations and splits, preprocessing, a
//! convolutional-recurrent frame labeller, training, sliding-window
//! inference, tolerance-based evaluation and a synthetic swing generator.

pub mod corpus;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
