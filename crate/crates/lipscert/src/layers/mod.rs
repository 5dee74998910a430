//! Forward semantics and analytic gradients for the model's layers:
//! normalization (CenterNorm, plus LayerNorm as the unbounded baseline),
//! activations, weighted residual shortcuts with DropPath, and the
//! convolution blocks.

pub mod activation;
pub mod conv;
pub mod norm;
pub mod residual;

pub use activation::{activation, activation_lipschitz, ActKind};
pub use conv::{conv_block, ConvBlockParams};
pub use norm::{
    center_norm, center_norm_operator, layer_norm, layer_norm_jacobian, NormParams,
};
pub use residual::{wrs_forward, WrsParams};
