//! Self-contained neural-network stack: tensors, a reverse-mode tape with the
//! op set the enhancement networks need, RMSprop, finite-difference gradient
//! checking, and the checkpoint container.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointData};
pub use conv::ConvDims;
pub use gradcheck::{grad_check, grad_check_tampered, GradCheckReport};
pub use graph::{Graph, NodeId, VBN_EPS};
pub use optim::Rmsprop;
pub use params::ParamStore;
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
