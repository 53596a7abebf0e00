//! Joint feature/matching transformer for semi-supervised video object
//! segmentation, with its own f64 autodiff engine.

pub mod config;
pub mod decoder;
pub mod embed;
pub mod error;
pub mod inference;
pub mod io;
pub mod joint_block;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use config::{BlockLocations, ModelConfig, PropagationMode};
pub use error::{Error, Result};
pub use model::Model;
pub use params::ModelParams;
pub use tensor::{Graph, Tensor, Var};
