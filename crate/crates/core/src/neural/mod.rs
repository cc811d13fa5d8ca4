//! Small double-precision differentiable toolkit: dense tensors, a
//! reverse-mode tape, Adam, and finite-difference gradient checks.

mod adam;
mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use gradcheck::{finite_diff_check, finite_diff_check_subset, GradCheckReport};
pub use layers::{LayerNormAffine, Linear, Mlp, MultiHeadAttention};
pub use params::{ParamId, ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tape::{Gradients, OpKind, SparseMatrix, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{dot, sigmoid, Tensor};
