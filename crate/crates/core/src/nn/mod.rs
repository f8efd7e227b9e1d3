//! Small CPU training engine: tensors, layers with fake-quantized weights,
//! SGD and a resumable training loop.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use model::Model;
pub use tensor::Tensor4;
pub use train::{TrainConfig, TrainHook, TrainReport, Trainer};
