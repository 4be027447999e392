//! Dense tensors, tape autodiff, Adam, seeded sampling and checkpoints.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{check_gradients, finite_diff_grad, op_checks, relative_error, GradCheck};
pub use graph::{Gradients, Graph, Var, ROPE_BASE};
pub use params::{
    accumulate, load_params, params_from_bytes, params_to_bytes, save_params, write_tensor, Binding, ParamEntry,
    ParamId, ParamStore, Reader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use rng::SeededRng;
pub use scalar::Real;
pub use tensor::Tensor;
