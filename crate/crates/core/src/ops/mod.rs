//! Differentiable numerical primitives.
//!
//! Batched kernels operate on a channel-major layout `[channels][batch][voxels]`,
//! which lets a convolution over a whole mini-batch run as one matrix product per
//! column chunk and lets batch normalization reduce over contiguous memory. A single
//! sample `[c, d, h, w]` is the same layout with a batch of one.

mod batchnorm;
mod conv;
mod dense;
mod direct;
mod dropout;
mod loss;
mod pool;
mod prelu;

pub use batchnorm::{batchnorm, batchnorm_backward, BatchNormCache, BatchNormParams};
pub use batchnorm::{DEFAULT_EPSILON as BN_EPSILON, DEFAULT_MOMENTUM as BN_MOMENTUM};
pub use conv::{conv3d_backward, conv3d_forward, ConvGrads, ConvKernel};
pub use dense::{dense, dense_backward, DenseGrads};
pub use dropout::dropout;
pub use loss::softmax_crossentropy;
pub use pool::{maxpool3d, maxpool3d_backward};
pub use prelu::{prelu, prelu_backward};

pub(crate) use batchnorm::{bn_backward_raw, bn_forward_raw};
pub(crate) use conv::{conv_backward_raw, conv_forward_raw};
pub(crate) use dense::{dense_backward_raw, dense_forward_raw};
pub(crate) use dropout::dropout_mask;
pub(crate) use loss::one_hot as one_hot_labels;
pub(crate) use pool::{maxpool_backward_raw, maxpool_forward_raw};
pub(crate) use prelu::{prelu_backward_raw, prelu_forward_raw};

/// Whether stochastic and batch-statistics layers behave as in training or inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Spatial extent of a volume or feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub const fn cube(e: usize) -> Self {
        Self { d: e, h: e, w: e }
    }

    pub const fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn halved(&self) -> Self {
        Self {
            d: self.d / 2,
            h: self.h / 2,
            w: self.w / 2,
        }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        (z, y, x)
    }
}

/// Interprets a tensor as `[channels, (batch,) d, h, w]`.
pub(crate) fn split_volume_shape(shape: &[usize]) -> Option<(usize, usize, Dims3)> {
    match *shape {
        [c, d, h, w] => Some((c, 1, Dims3::new(d, h, w))),
        [c, b, d, h, w] => Some((c, b, Dims3::new(d, h, w))),
        _ => None,
    }
}
