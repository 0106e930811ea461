//! Dense tensor kernels shared by the spiking and convolutional models.

mod conv;
mod ops;
mod tensor;

pub mod init;

pub use conv::{
    conv2d, conv2d_backward, conv3d, conv3d_backward, conv3d_depthwise, conv3d_depthwise_backward,
    ConvGeom,
};
pub use ops::{
    dot, linear, linear_backward, linear_slice, maxpool2d, maxpool2d_backward,
    maxpool2d_with_indices, relu_backward_inplace, relu_inplace, softmax, softmax_slice,
};
pub use tensor::Tensor;
