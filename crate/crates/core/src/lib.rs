//! Tensors, reverse-mode autodiff, scene data, the frequency prior, and the
//! scene-graph model with its evaluation metrics.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prediction_file;
pub mod prior;
pub mod relation;
pub mod scene;
pub mod scene_file;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelInput, PriorIndexing, SceneGraphModel};
pub use params::{Gradients, ParamStore};
pub use prior::FrequencyPrior;
pub use tensor::Tensor;
