use crate::error::{Error, Result};
use crate::ops::{split_volume_shape, Dims3};
use crate::tensor::{Scalar, Tensor};

/// 2x2x2 max pooling with stride 2; trailing odd slices are dropped.
///
/// Returns the pooled tensor and, per output element, the flat input index of the
/// winning voxel (ties go to the lowest index).
pub fn maxpool3d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, batch, dims) = split_volume_shape(input.shape())
        .ok_or_else(|| Error::shape("maxpool input rank", &[0, 2, 2, 2], input.shape()))?;
    if dims.d < 2 || dims.h < 2 || dims.w < 2 {
        return Err(Error::InvalidArgument(format!(
            "maxpool needs spatial extents >= 2, got {:?}",
            dims.as_array()
        )));
    }
    let (out, arg) = maxpool_forward_raw(input.data(), c * batch, dims);
    let half = dims.halved();
    let mut shape = input.shape().to_vec();
    let n = shape.len();
    shape[n - 3..].copy_from_slice(&half.as_array());
    Ok((Tensor::from_vec(&shape, out)?, arg))
}

/// Routes each upstream element back to its argmax position.
pub fn maxpool3d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != upstream.len() {
        return Err(Error::shape(
            "maxpool upstream",
            &[argmax.len()],
            upstream.shape(),
        ));
    }
    let len: usize = input_shape.iter().product();
    Tensor::from_vec(
        input_shape,
        maxpool_backward_raw(len, argmax, upstream.data()),
    )
}

/// `planes` independent `dims` volumes laid out back to back.
pub(crate) fn maxpool_forward_raw<T: Scalar>(
    input: &[T],
    planes: usize,
    dims: Dims3,
) -> (Vec<T>, Vec<usize>) {
    let half = dims.halved();
    let (s, hs) = (dims.len(), half.len());
    let mut out = Vec::with_capacity(planes * hs);
    let mut arg = Vec::with_capacity(planes * hs);
    for p in 0..planes {
        let base = p * s;
        for z in 0..half.d {
            for y in 0..half.h {
                for x in 0..half.w {
                    let mut best = base + dims.index(2 * z, 2 * y, 2 * x);
                    let mut best_v = input[best];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + dims.index(2 * z + dz, 2 * y + dy, 2 * x + dx);
                                if input[i] > best_v {
                                    best_v = input[i];
                                    best = i;
                                }
                            }
                        }
                    }
                    out.push(best_v);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward_raw<T: Scalar>(
    input_len: usize,
    argmax: &[usize],
    upstream: &[T],
) -> Vec<T> {
    let mut grad = vec![T::ZERO; input_len];
    for (&i, &g) in argmax.iter().zip(upstream) {
        grad[i] += g;
    }
    grad
}
