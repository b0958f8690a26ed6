//! Dense kernels, a small MLP with manual backprop, and AdamW.

mod adamw;
mod mlp;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use mlp::{mlp_backward, mlp_forward, Activation, Mlp, MlpSpec, Trace};
pub use tensor::{all_finite, gemm_at_b_acc, gemm_a_bt, gemm_ab, zeros_like, Mat, ParamTensor};
