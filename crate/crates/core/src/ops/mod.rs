//! Numeric kernels: matrix multiplication, convolution, normalization,
//! pooling, pointwise nonlinearities, the classifier head, and the SGD
//! update rule.
//!
//! Every differentiable operation comes as a `*_forward` / `*_backward`
//! pair (or a combined call returning both values and a cache); backward
//! passes are hand-derived adjoints and are validated against central
//! finite differences in `crate::gradcheck`.

pub mod conv;
pub mod head;
pub mod matmul;
pub mod norm;
pub mod pointwise;
pub mod pool;
pub mod sgd;

pub use conv::{
    conv1x1, conv1x1_backward, conv2d, conv2d_backward, conv2d_backward_filter,
    conv2d_backward_input, conv_out_dim,
};
pub use head::{linear_backward, linear_forward, softmax_cross_entropy};
pub use matmul::{matmul, matmul_at_b, matmul_a_bt, transpose};
pub use norm::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNormCache, BatchNormState,
};
pub use pointwise::{dropout_backward, dropout_forward, relu, relu_backward};
pub use pool::{
    avg_pool2x2, avg_pool2x2_backward, global_avg_pool, global_avg_pool_backward,
};
pub use sgd::{sgd_step, OptimizerState};
