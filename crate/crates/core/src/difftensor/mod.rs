//! Dense tensors, reverse-mode differentiation, gradient checking, the
//! optimizer, and checkpoint serialization.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{
    check_module, check_module_with, finite_difference_check, finite_difference_check_with,
    GradCheckOptions, GradReport,
};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};
pub use tape::{sigmoid_value, smooth_l1_value, Conv2dSpec, Gradients, ParamBinder, Tape, Var};
pub use tensor::{pairwise_sum, ParamId, ParamStore, Parameter, Tensor};
