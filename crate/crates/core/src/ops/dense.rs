use crate::error::{Error, Result};
use crate::tensor::{gemm, MatLayout, Scalar, Tensor};

/// Gradients of an affine layer.
#[derive(Clone, Debug)]
pub struct DenseGrads<T = f32> {
    pub grad_input: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

fn dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [m, n] = *weights.shape() else {
        return Err(Error::shape("dense weights rank", &[0, 0], weights.shape()));
    };
    match *input.shape() {
        [k] if k == n => Ok((1, n, m)),
        [b, k] if k == n => Ok((b, n, m)),
        _ => Err(Error::shape("dense input vs weights", &[n], input.shape())),
    }
}

/// `y = W x + b` for `x` of shape `[n]` or a batch `[batch, n]`.
pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, n, m) = dims(input, weights)?;
    if bias.shape() != [m] {
        return Err(Error::shape("dense bias", &[m], bias.shape()));
    }
    let out = dense_forward_raw(input.data(), batch, n, weights.data(), bias.data(), m);
    let shape = if input.shape().len() == 1 {
        vec![m]
    } else {
        vec![batch, m]
    };
    Tensor::from_vec(&shape, out)
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (batch, n, m) = dims(input, weights)?;
    if upstream.len() != batch * m {
        return Err(Error::shape(
            "dense upstream",
            &[batch, m],
            upstream.shape(),
        ));
    }
    let mut gw = vec![T::ZERO; m * n];
    let mut gb = vec![T::ZERO; m];
    let gi = dense_backward_raw(
        input.data(),
        batch,
        n,
        weights.data(),
        m,
        upstream.data(),
        Some((&mut gw, &mut gb)),
        true,
    )
    .expect("input gradient requested");
    Ok(DenseGrads {
        grad_input: Tensor::from_vec(input.shape(), gi)?,
        grad_weights: Tensor::from_vec(&[m, n], gw)?,
        grad_bias: Tensor::from_vec(&[m], gb)?,
    })
}

/// Sample-major `[batch][n] -> [batch][m]`.
pub(crate) fn dense_forward_raw<T: Scalar>(
    x: &[T],
    batch: usize,
    n: usize,
    w: &[T],
    b: &[T],
    m: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * m);
    for _ in 0..batch {
        out.extend_from_slice(b);
    }
    gemm(
        T::ONE,
        x,
        MatLayout::row_major(0, batch, n),
        w,
        MatLayout::transposed(0, m, n),
        T::ONE,
        &mut out,
        MatLayout::row_major(0, batch, m),
    );
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward_raw<T: Scalar>(
    x: &[T],
    batch: usize,
    n: usize,
    w: &[T],
    m: usize,
    upstream: &[T],
    param_grads: Option<(&mut [T], &mut [T])>,
    need_input: bool,
) -> Option<Vec<T>> {
    if let Some((gw, gb)) = param_grads {
        gemm(
            T::ONE,
            upstream,
            MatLayout::transposed(0, batch, m),
            x,
            MatLayout::row_major(0, batch, n),
            T::ONE,
            gw,
            MatLayout::row_major(0, m, n),
        );
        for row in upstream.chunks_exact(m) {
            gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
        }
    }
    need_input.then(|| {
        let mut gi = vec![T::ZERO; batch * n];
        gemm(
            T::ONE,
            upstream,
            MatLayout::row_major(0, batch, m),
            w,
            MatLayout::row_major(0, m, n),
            T::ZERO,
            &mut gi,
            MatLayout::row_major(0, batch, n),
        );
        gi
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testutil::{central_diff, probe, random_tensor, rel_err};

    #[test]
    fn identity_weights_copy_input() {
        let mut w = Tensor::<f64>::zeros(&[4, 4]);
        for i in 0..4 {
            w[i * 5] = 1.0;
        }
        let x = random_tensor(&[4], 1);
        assert_eq!(dense(&x, &w, &Tensor::zeros(&[4])).unwrap(), x);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let w = Tensor::<f32>::zeros(&[64, 128]);
        assert!(dense(&Tensor::zeros(&[2, 127]), &w, &Tensor::zeros(&[64])).is_err());
        let y = dense(&Tensor::zeros(&[2, 128]), &w, &Tensor::zeros(&[64])).unwrap();
        assert_eq!(y.shape(), &[2, 64]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut x = random_tensor(&[3, 5], 1);
        let mut w = random_tensor(&[4, 5], 2);
        let mut b = random_tensor(&[4], 3);
        let up = random_tensor(&[3, 4], 4);
        let g = dense_backward(&x, &w, &up).unwrap();
        for i in 0..x.len() {
            let (ww, bb) = (w.clone(), b.clone());
            let num = central_diff(&mut x, i, 1e-6, |xx| {
                probe(&dense(xx, &ww, &bb).unwrap(), &up)
            });
            assert!(rel_err(num, g.grad_input[i]) < 1e-6);
        }
        for i in 0..w.len() {
            let (xx, bb) = (x.clone(), b.clone());
            let num = central_diff(&mut w, i, 1e-6, |ww| {
                probe(&dense(&xx, ww, &bb).unwrap(), &up)
            });
            assert!(rel_err(num, g.grad_weights[i]) < 1e-6);
        }
        for i in 0..b.len() {
            let (xx, ww) = (x.clone(), w.clone());
            let num = central_diff(&mut b, i, 1e-6, |bb| {
                probe(&dense(&xx, &ww, bb).unwrap(), &up)
            });
            assert!(rel_err(num, g.grad_bias[i]) < 1e-6);
        }
    }
}
