//! A deliberately small trainable network: dense and 3×3 convolution layers,
//! ReLU and a per-pixel softmax head, with hand-written reverse-mode
//! gradients and an Adam optimizer.
//!
//! Every layer maps an `H×W×C` grid to an `H×W×C'` grid, so the same network
//! handles images and, laid out as `1×P` grids, point clouds.

mod adam;
mod gradcheck;
mod model;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{
    finite_difference, finite_difference_grad, max_relative_error, DEFAULT_STEP, RELATIVE_ERROR_FLOOR,
};
pub use model::{backward, forward, ForwardCache, LayerParams, LayerSpec, ModelParams, NetSpec, ParamGrads};
