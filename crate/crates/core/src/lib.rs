pub mod autograd;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod classes;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod head;
pub mod hungarian;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod postprocess;
pub mod profile;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use head::SegmentPrediction;
pub use model::Model;
pub use tensor::Tensor;
