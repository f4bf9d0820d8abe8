use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Resolves how slopes broadcast over `input`: either one slope per element, or a
/// sample-major batch `[batch, ...]` sharing slopes of shape `input.shape()[1..]`.
fn batch_of(input: &[usize], slopes: &[usize]) -> Result<usize> {
    if input == slopes {
        Ok(1)
    } else if input.len() == slopes.len() + 1 && input[1..] == *slopes {
        Ok(input[0])
    } else {
        Err(Error::shape("prelu slopes vs input", input, slopes))
    }
}

/// Parametric ReLU: `x` for positive inputs, `slope * x` otherwise.
pub fn prelu<T: Scalar>(input: &Tensor<T>, slopes: &Tensor<T>) -> Result<Tensor<T>> {
    let batch = batch_of(input.shape(), slopes.shape())?;
    let out = prelu_forward_raw(input.data(), slopes.data(), 1, batch, slopes.len());
    Tensor::from_vec(input.shape(), out)
}

/// Returns `(grad_input, grad_slopes)`.
pub fn prelu_backward<T: Scalar>(
    input: &Tensor<T>,
    slopes: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let batch = batch_of(input.shape(), slopes.shape())?;
    if upstream.shape() != input.shape() {
        return Err(Error::shape(
            "prelu upstream",
            input.shape(),
            upstream.shape(),
        ));
    }
    let mut gs = vec![T::ZERO; slopes.len()];
    let gi = prelu_backward_raw(
        input.data(),
        slopes.data(),
        upstream.data(),
        1,
        batch,
        slopes.len(),
        Some(&mut gs),
    );
    Ok((
        Tensor::from_vec(input.shape(), gi)?,
        Tensor::from_vec(slopes.shape(), gs)?,
    ))
}

/// Element `(o, b, i)` of an `[outer][batch][inner]` buffer uses slope `o * inner + i`.
pub(crate) fn prelu_forward_raw<T: Scalar>(
    x: &[T],
    slopes: &[T],
    outer: usize,
    batch: usize,
    inner: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for o in 0..outer {
        let s = &slopes[o * inner..][..inner];
        for b in 0..batch {
            let row = &x[(o * batch + b) * inner..][..inner];
            out.extend(
                row.iter()
                    .zip(s)
                    .map(|(&v, &a)| if v > T::ZERO { v } else { a * v }),
            );
        }
    }
    out
}

pub(crate) fn prelu_backward_raw<T: Scalar>(
    x: &[T],
    slopes: &[T],
    upstream: &[T],
    outer: usize,
    batch: usize,
    inner: usize,
    mut grad_slopes: Option<&mut [T]>,
) -> Vec<T> {
    let mut gi = Vec::with_capacity(x.len());
    for o in 0..outer {
        let s = &slopes[o * inner..][..inner];
        for b in 0..batch {
            let off = (o * batch + b) * inner;
            let row = &x[off..][..inner];
            let up = &upstream[off..][..inner];
            gi.extend(
                row.iter()
                    .zip(up)
                    .zip(s)
                    .map(|((&v, &g), &a)| if v > T::ZERO { g } else { a * g }),
            );
            if let Some(gs) = grad_slopes.as_deref_mut() {
                let gs = &mut gs[o * inner..][..inner];
                for ((acc, &v), &g) in gs.iter_mut().zip(row).zip(up) {
                    if v <= T::ZERO {
                        *acc += v * g;
                    }
                }
            }
        }
    }
    gi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testutil::{central_diff, probe, random_tensor, rel_err};

    #[test]
    fn positive_input_is_identity() {
        let x = random_tensor(&[3, 4], 1).map(|v| v.abs() + 0.1);
        let s = random_tensor(&[3, 4], 2);
        assert_eq!(prelu(&x, &s).unwrap(), x);
    }

    #[test]
    fn zero_slope_is_relu() {
        let x = random_tensor(&[10], 3);
        let y = prelu(&x, &Tensor::zeros(&[10])).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(*b, a.max(0.0));
        }
    }

    #[test]
    fn rejects_mismatched_slopes() {
        assert!(prelu(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        // batch of 3 samples sharing slopes
        let mut x = random_tensor(&[3, 2, 5], 4);
        let mut s = random_tensor(&[2, 5], 5);
        let w = random_tensor(&[3, 2, 5], 6);
        let (gi, gs) = prelu_backward(&x, &s, &w).unwrap();
        for i in 0..x.len() {
            let ss = s.clone();
            let num = central_diff(&mut x, i, 1e-6, |xx| probe(&prelu(xx, &ss).unwrap(), &w));
            assert!(rel_err(num, gi[i]) < 1e-6);
        }
        for i in 0..s.len() {
            let xx = x.clone();
            let num = central_diff(&mut s, i, 1e-6, |ss| probe(&prelu(&xx, ss).unwrap(), &w));
            assert!(rel_err(num, gs[i]) < 1e-6);
        }
    }
}
