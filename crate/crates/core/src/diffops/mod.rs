//! Minimal differentiable operator set: forward evaluation plus a dynamic
//! reverse-mode tape covering exactly the operations the networks, the
//! trainer and the receptive-field optimizer need.
//!
//! Production paths run in f32; the same code instantiates at f64 for
//! finite-difference and adjointness checks.

mod kernel;
pub mod ops;
mod tape;

pub use kernel::{Kernel, Padding};
pub use ops::{
    concat_channels, conv2d, conv2d_grad_bias, conv2d_grad_weights, conv2d_linear,
    conv2d_transpose, dot_all, l2_norm, luma, luma_adjoint, mse_loss, pixel_shuffle,
    pixel_unshuffle, relu, relu_backward, repeat_channels, slice_channels, sum_all,
    LUMA_WEIGHTS,
};
pub use tape::{Tape, Var};
