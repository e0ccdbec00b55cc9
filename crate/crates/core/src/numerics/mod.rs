//! Dense-array mathematics with forward and backward passes for every layer
//! the perception and reward networks use.

mod network;
mod ops;
mod tensor;

pub use network::{Conv2d, Dense, Layer, LayerGrads, Network, NetworkGrads, Tape, Trace};
pub use ops::{
    affine, affine_backward, conv2d_backward, conv2d_forward, dense_forward, l1_normalize,
    l1_normalize_backward, l2_normalize, l2_normalize_backward, maxpool2d, maxpool2d_backward,
    sgd_step, softmax, Activation, NORM_EPS,
};
pub use tensor::Tensor;
