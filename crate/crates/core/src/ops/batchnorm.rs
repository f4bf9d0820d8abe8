use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Per-channel affine parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::ONE),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Values saved by the forward pass for [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BatchNormCache<T = f32> {
    pub(crate) xhat: Vec<T>,
    pub(crate) inv_std: Vec<T>,
    pub(crate) batch_stats: bool,
    shape: Vec<usize>,
}

/// Normalizes `input` of shape `[channels, ...]` per channel.
///
/// In [`Mode::Train`] batch statistics are used and the running statistics are
/// updated by exponential moving average; [`Mode::Infer`] uses the running statistics.
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = params.channels();
    if input.shape().first() != Some(&c) {
        return Err(Error::shape("batchnorm channels", &[c], input.shape()));
    }
    if mode == Mode::Train && input.shape().len() < 2 {
        return Err(Error::EmptyDataset(
            "batch normalization in training mode needs a batch".into(),
        ));
    }
    let n = input.len() / c;
    let BatchNormParams {
        gamma,
        beta,
        running_mean,
        running_var,
        momentum,
        epsilon,
    } = params;
    let (y, xhat, inv_std) = bn_forward_raw(
        input.data(),
        c,
        n,
        gamma.data(),
        beta.data(),
        running_mean.data_mut(),
        running_var.data_mut(),
        mode == Mode::Train,
        true,
        *momentum,
        *epsilon,
    );
    let cache = BatchNormCache {
        xhat,
        inv_std,
        batch_stats: mode == Mode::Train,
        shape: input.shape().to_vec(),
    };
    Ok((Tensor::from_vec(input.shape(), y)?, cache))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    params: &BatchNormParams<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if upstream.shape() != cache.shape.as_slice() {
        return Err(Error::shape(
            "batchnorm upstream",
            &cache.shape,
            upstream.shape(),
        ));
    }
    let c = params.channels();
    let n = upstream.len() / c;
    let mut gg = vec![T::ZERO; c];
    let mut gb = vec![T::ZERO; c];
    let dx = bn_backward_raw(
        &cache.xhat,
        &cache.inv_std,
        params.gamma.data(),
        upstream.data(),
        c,
        n,
        cache.batch_stats,
        Some((&mut gg, &mut gb)),
    );
    Ok((
        Tensor::from_vec(&cache.shape, dx)?,
        Tensor::from_vec(&[c], gg)?,
        Tensor::from_vec(&[c], gb)?,
    ))
}

/// Channel `ch` occupies `x[ch * n..(ch + 1) * n]`. Returns `(y, xhat, inv_std)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward_raw<T: Scalar>(
    x: &[T],
    c: usize,
    n: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    batch_stats: bool,
    update_running: bool,
    momentum: f64,
    epsilon: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(c);
    let eps = T::from_f64(epsilon);
    for ch in 0..c {
        let xs = &x[ch * n..][..n];
        let (mean, var) = if batch_stats {
            // accumulate in f64 so 32-bit batches of ~10^5 values keep their precision
            let mean = xs.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            if update_running {
                running_mean[ch] =
                    T::from_f64(momentum * running_mean[ch].to_f64() + (1.0 - momentum) * mean);
                running_var[ch] =
                    T::from_f64(momentum * running_var[ch].to_f64() + (1.0 - momentum) * var);
            }
            (T::from_f64(mean), T::from_f64(var))
        } else {
            (running_mean[ch], running_var[ch])
        };
        let is = T::ONE / (var + eps).sqrt();
        inv_std.push(is);
        let (g, b) = (gamma[ch], beta[ch]);
        for &v in xs {
            let h = (v - mean) * is;
            xhat.push(h);
            y.push(g * h + b);
        }
    }
    (y, xhat, inv_std)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward_raw<T: Scalar>(
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    upstream: &[T],
    c: usize,
    n: usize,
    batch_stats: bool,
    mut param_grads: Option<(&mut [T], &mut [T])>,
) -> Vec<T> {
    let mut dx = Vec::with_capacity(upstream.len());
    let nf = T::from_f64(n as f64);
    for ch in 0..c {
        let xh = &xhat[ch * n..][..n];
        let dy = &upstream[ch * n..][..n];
        let mut sum_dy = T::ZERO;
        let mut sum_dy_xh = T::ZERO;
        for (&g, &h) in dy.iter().zip(xh) {
            sum_dy += g;
            sum_dy_xh += g * h;
        }
        if let Some((gg, gb)) = param_grads.as_mut() {
            gg[ch] += sum_dy_xh;
            gb[ch] += sum_dy;
        }
        let scale = gamma[ch] * inv_std[ch];
        if batch_stats {
            let k = scale / nf;
            dx.extend(
                dy.iter()
                    .zip(xh)
                    .map(|(&g, &h)| k * (nf * g - sum_dy - h * sum_dy_xh)),
            );
        } else {
            dx.extend(dy.iter().map(|&g| scale * g));
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testutil::{central_diff, probe, random_tensor, rel_err};

    #[test]
    fn train_mode_output_has_beta_mean_and_gamma_std() {
        let x = random_tensor(&[3, 4, 50], 1).map(|v| 5.0 * v + 2.0);
        let mut p = BatchNormParams::<f64>::new(3);
        p.gamma = Tensor::from_vec(&[3], vec![2.0, -0.5, 1.0]).unwrap();
        p.beta = Tensor::from_vec(&[3], vec![0.3, 1.0, -2.0]).unwrap();
        p.epsilon = 1e-8;
        let (y, _) = batchnorm(&x, &mut p, Mode::Train).unwrap();
        for ch in 0..3 {
            let ys = &y.data()[ch * 200..][..200];
            let mean = ys.iter().sum::<f64>() / 200.0;
            let std = (ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 200.0).sqrt();
            assert!((mean - p.beta[ch]).abs() < 1e-3);
            assert!((std - p.gamma[ch].abs()).abs() < 1e-3);
        }
        // running stats moved towards the batch statistics
        assert!(p.running_mean.data().iter().all(|&m| m != 0.0));
    }

    #[test]
    fn infer_mode_with_unit_stats_is_identity() {
        let x = random_tensor(&[2, 10], 2);
        let mut p = BatchNormParams::<f64>::new(2);
        p.epsilon = 0.0;
        let (y, _) = batchnorm(&x, &mut p, Mode::Infer).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn train_mode_needs_a_batch() {
        let mut p = BatchNormParams::<f32>::new(3);
        assert!(batchnorm(&Tensor::zeros(&[3]), &mut p, Mode::Train).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        // 2 channels, 4-sample batch of 3 voxels each
        let mut x = random_tensor(&[2, 4, 3], 3);
        let mut p = BatchNormParams::<f64>::new(2);
        p.gamma = random_tensor(&[2], 4);
        p.beta = random_tensor(&[2], 5);
        let w = random_tensor(&[2, 4, 3], 6);
        let (_, cache) = batchnorm(&x, &mut p.clone(), Mode::Train).unwrap();
        let (gx, gg, gb) = batchnorm_backward(&cache, &p, &w).unwrap();
        let f = |xx: &Tensor<f64>, pp: &BatchNormParams<f64>| {
            probe(&batchnorm(xx, &mut pp.clone(), Mode::Train).unwrap().0, &w)
        };
        for i in 0..x.len() {
            let pp = p.clone();
            let num = central_diff(&mut x, i, 1e-5, |xx| f(xx, &pp));
            assert!(rel_err(num, gx[i]) < 1e-6, "{i}: {num} vs {}", gx[i]);
        }
        for ch in 0..2 {
            let mut g = p.gamma.clone();
            let num = central_diff(&mut g, ch, 1e-5, |gm| {
                let mut pp = p.clone();
                pp.gamma = gm.clone();
                f(&x, &pp)
            });
            assert!(rel_err(num, gg[ch]) < 1e-6);
            let mut b = p.beta.clone();
            let num = central_diff(&mut b, ch, 1e-5, |bt| {
                let mut pp = p.clone();
                pp.beta = bt.clone();
                f(&x, &pp)
            });
            assert!(rel_err(num, gb[ch]) < 1e-6);
        }
    }
}
