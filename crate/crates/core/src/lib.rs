//! Tree-of-attribute prompt learning for dual-encoder vision-language models.

pub mod autodiff;
pub mod datasets;
pub mod encoder;
pub mod generation;
pub mod inference;
pub mod objectives;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod toa;
pub mod training;
pub mod vcp;

pub use scalar::Scalar;
pub use tensor::Matrix;
pub use toa::AttributeTree;

pub type MatrixF32 = Matrix<f32>;
pub type MatrixF64 = Matrix<f64>;
pub type ClipModelF32 = encoder::ClipModel<f32>;
pub type ClipModelF64 = encoder::ClipModel<f64>;
pub type PromptStateF32 = encoder::PromptState<f32>;
pub type PromptStateF64 = encoder::PromptState<f64>;
pub type CheckpointF32 = encoder::checkpoint::Checkpoint<f32>;
pub type CheckpointF64 = encoder::checkpoint::Checkpoint<f64>;
