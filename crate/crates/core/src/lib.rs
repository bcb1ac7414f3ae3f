//! Multi-modal 3D detection decoder that fuses camera and LiDAR features at
//! adaptively generated points of interest, plus the synthetic-scene harness
//! used to train and evaluate it on a desk-sized budget.

pub mod assign;
pub mod autodiff;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod poi;
pub mod query;
pub mod sampling;
pub mod scene;
pub mod tensor;

pub use decoder::{Detection, Model, ModelConfig};
pub use error::{Error, Result};
pub use geometry::{BevGrid, Box3D, CameraModel};
pub use scene::{FeatureAtlas, Scene, SceneConfig};
pub use tensor::Tensor;
