//! Dense-array substrate shared by every other module.
//!
//! Storage is contiguous and row-major, with no strides or views. All
//! reductions run in a fixed order so that identical inputs produce
//! bit-identical outputs, whichever code path (full sequence or streaming)
//! asked for them.

mod gemm;
mod gradcheck;
mod ops;
mod tensor;

pub use gemm::{matmul, matmul_nt, matmul_tn, with_intra_op_threads};
pub(crate) use gemm::{gemm, MatRef};
pub use gradcheck::{compare_gradients, finite_difference_gradient, relative_error, GradCheckReport};
pub use ops::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, masked_softmax,
    softmax_backward_row, softmax_block_update, softmax_row_in_place, LayerNormCache, LinearGrads,
};
pub use tensor::{DType, Scalar, Tensor};
