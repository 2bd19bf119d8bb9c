pub mod cli;
pub mod cnn;
pub mod eda;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod pgm;
pub mod preprocess;
pub mod synth;
pub mod tsne;

pub use error::{Error, Result};
