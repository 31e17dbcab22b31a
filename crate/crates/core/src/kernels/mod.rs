//! Raw numeric kernels: dense matrix products, im2col convolution and
//! batch-norm statistics. The tape wires these into differentiable nodes.

pub mod batchnorm;
pub mod conv;
pub mod matmul;

pub use batchnorm::{bn_backward_eval, bn_backward_train, bn_batch_stats, bn_forward_eval, bn_forward_train, BnStats};
pub use conv::{conv2d_bwd_bias, conv2d_bwd_input, conv2d_bwd_weight, conv2d_fwd, conv_out_extent, ConvGeom};
pub use matmul::{matmul, matmul_a_bt, matmul_at_b};
