//! A small deterministic CNN engine: tensors, the layer set needed by the
//! detectors, softmax cross-entropy, momentum SGD, gradient checking and
//! checkpoints.

mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod network;
mod scalar;
mod sgd;
mod spec;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use layers::{Layer, Mode, Param};
pub use loss::{loss_softmax_xent, softmax};
pub use network::Network;
pub use scalar::{gemm, Mat, Scalar};
pub use sgd::{sgd_update, Sgd, TrainConfig};
pub use spec::{LayerSpec, NetworkSpec};
pub use tensor::Tensor;
