//! Dense f64 tensors, a reverse-mode tape, transformer layers and optimizers.

mod gradcheck;
pub(crate) mod graph;
mod optim;
mod params;
mod softmax;
mod tensor;
mod transformer;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{optimizer_step, LrSchedule, OptimizerKind, OptimizerState};
pub use params::{Param, ParamStore};
pub use softmax::{softmax, softmax_jacobian};
pub use tensor::{dot, euclidean_distance, l2_norm, Tensor};
pub use transformer::{
    init_transformer_layer, transformer_layer, transformer_layer_blocks, transformer_layer_forward, TransformerConfig,
};
