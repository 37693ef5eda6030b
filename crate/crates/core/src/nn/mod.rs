//! Minimal deterministic feed-forward engine.
//!
//! Dense and strided 1-D convolutional layers with optional max-pooling,
//! standard activations, analytic gradients, and momentum SGD. Forward passes
//! record every layer-boundary activation and pre-activation so the moment
//! engine can read signals at any prospective fusion boundary.
//!
//! # Index conventions
//!
//! The convolution math is usually written with 1-based indices: with
//! `u = flip(pad(x))`, output position `j` (1-based) of a stride-`s`
//! convolution is the inner product of the filter with
//! `u[L-i+1 .. L-i+k]` at window start `i = 1 + (j-1)*s`.
//! In code everything is 0-based: the window for 0-based output index `j`
//! starts at `L - 1 - j*s` into `u`, and `x[l]` lives at padded index
//! `floor(k/2) + l`, hence at `u[L + k - 2 - floor(k/2) - l]`.

mod activation;
mod layer;
pub mod model_json;
mod network;
mod train;

pub use activation::ActivationKind;
pub use layer::{
    conv1d_multi, conv_output_len, vectorize_channels, zero_pad, Conv1dLayer, ConvBias, DenseLayer,
    Layer, PoolKind, PoolSpec, Shape, Value,
};
pub use model_json::{FusedProvenance, Model};
pub use network::{InitScheme, LayerSpec, Network, NetworkSpec, PoolSpecSpec, ShapeSpec, Trace};
pub use train::{
    batch_loss, evaluate, gradients, train, Dataset, EpochStats, EvalStats, Gradients, LayerGrad,
    LossKind, LrStep, Split, Target, TrainConfig,
};
