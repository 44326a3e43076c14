//! Reference forward/backward kernels for every layer type.
//!
//! All kernels are pure functions over [`Tensor`]s. Activations are NHWC.

mod batchnorm;
mod conv;
mod elementwise;
mod head;
mod pool;

pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormParams};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_forward_direct, ConvGrads};
pub use elementwise::{
    add_scaled, add_scaled_backward, concat_channels, concat_channels_backward, relu,
    relu_backward,
};
pub use head::{
    dropout, dropout_backward, fully_connected, fully_connected_backward, global_avgpool,
    global_avgpool_backward, softmax, softmax_backward, softmax_cross_entropy, DropoutMask,
    FcGrads,
};
pub use pool::{pool2d, pool2d_backward};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpError {
    #[error("channel mismatch: input has {got} channels, expected {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("valid padding needs a {kernel_h}x{kernel_w} window but the grid is {h}x{w}")]
    GridTooSmall {
        h: usize,
        w: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    #[error("dimension must be positive: {0}")]
    NonPositive(&'static str),
    #[error("grid mismatch: {0:?} vs {1:?}")]
    GridMismatch(Vec<usize>, Vec<usize>),
    #[error("keep probability {0} is outside (0, 1]")]
    BadKeepProb(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub padding: Padding,
    pub out_channels: usize,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize), stride: usize, padding: Padding, out_channels: usize) -> Self {
        Self {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride,
            stride_w: stride,
            padding,
            out_channels,
            activation: Activation::None,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn window(&self) -> Window {
        Window {
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride_h: self.stride_h,
            stride_w: self.stride_w,
            padding: self.padding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub padding: Padding,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            padding,
        }
    }

    pub fn window(&self) -> Window {
        Window {
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride_h: self.stride_h,
            stride_w: self.stride_w,
            padding: self.padding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Sliding-window geometry shared by convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub padding: Padding,
}

/// Output extent and leading pad along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisGeometry {
    pub out: usize,
    pub pad_before: usize,
}

/// Output size and leading padding for one axis.
///
/// Same: `ceil(size / stride)`, total pad `max((out-1)*stride + kernel - size, 0)`
/// split as `floor(P/2)` before and the remainder after. Valid:
/// `floor((size - kernel) / stride) + 1`, no padding.
pub fn axis_geometry(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<AxisGeometry> {
    if size == 0 || kernel == 0 || stride == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(size);
            Some(AxisGeometry {
                out,
                pad_before: total / 2,
            })
        }
        Padding::Valid => {
            if size < kernel {
                return None;
            }
            Some(AxisGeometry {
                out: (size - kernel) / stride + 1,
                pad_before: 0,
            })
        }
    }
}

/// Resolved geometry of a window applied to an `h x w` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub window: Window,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Window {
    pub fn resolve(&self, in_h: usize, in_w: usize) -> Result<Geometry, OpError> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(OpError::NonPositive("kernel"));
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(OpError::NonPositive("stride"));
        }
        if in_h == 0 || in_w == 0 {
            return Err(OpError::NonPositive("input grid"));
        }
        let too_small = || OpError::GridTooSmall {
            h: in_h,
            w: in_w,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
        };
        let gh = axis_geometry(in_h, self.kernel_h, self.stride_h, self.padding).ok_or_else(too_small)?;
        let gw = axis_geometry(in_w, self.kernel_w, self.stride_w, self.padding).ok_or_else(too_small)?;
        Ok(Geometry {
            window: *self,
            in_h,
            in_w,
            out_h: gh.out,
            out_w: gw.out,
            pad_top: gh.pad_before,
            pad_left: gw.pad_before,
        })
    }
}

impl Geometry {
    /// Input row for output row `oh` and kernel tap `kh`, or `None` inside padding.
    #[inline]
    pub fn input_row(&self, oh: usize, kh: usize) -> Option<usize> {
        (oh * self.window.stride_h + kh)
            .checked_sub(self.pad_top)
            .filter(|&r| r < self.in_h)
    }

    #[inline]
    pub fn input_col(&self, ow: usize, kw: usize) -> Option<usize> {
        (ow * self.window.stride_w + kw)
            .checked_sub(self.pad_left)
            .filter(|&c| c < self.in_w)
    }
}
