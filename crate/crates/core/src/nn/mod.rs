//! A minimal convolutional classifier with hand-written gradients.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod optim;

pub use layers::NormMode;
pub use model::{Architecture, EncoderGrads, ForwardCache, OutputMode, ParamGroup, Seeds, SplitModel};
pub use optim::{Optimizer, OptimizerKind};
