pub mod error;
pub mod numerics;
pub mod compression;
pub mod data;
pub mod rnn;
pub mod gmm;
pub mod model;
pub mod training;
pub mod tasks;
pub mod metrics;

pub use error::{Error, Result};
