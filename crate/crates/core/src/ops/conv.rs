use crate::error::{Error, Result};
use crate::ops::direct::{adjoint_weights, correlate, transpose_weights, weight_gradient, Padded};
use crate::ops::{split_volume_shape, Dims3};
use crate::tensor::{gemm, MatLayout, Scalar, Tensor};

/// Spatial kernel extent; every convolution in the network is 3x3x3.
pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL * KERNEL;

/// Weights `[out, in, 3, 3, 3]` and bias `[out]` of a same-padded 3D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weights.shape();
        if ws.len() != 5 || ws[2..] != [KERNEL; 3] {
            return Err(Error::shape(
                "conv kernel",
                &[ws.first().copied().unwrap_or(0), 0, 3, 3, 3],
                ws,
            ));
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::shape("conv bias", &[ws[0]], bias.shape()));
        }
        Ok(Self { weights, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub grad_input: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

fn check_input<T: Scalar>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
) -> Result<(usize, usize, Dims3)> {
    let (ci, batch, dims) = split_volume_shape(input.shape()).ok_or_else(|| {
        Error::shape(
            "conv input rank",
            &[kernel.in_channels(), 0, 0, 0],
            input.shape(),
        )
    })?;
    if ci != kernel.in_channels() {
        return Err(Error::shape(
            "conv input channels vs kernel",
            kernel.weights.shape(),
            input.shape(),
        ));
    }
    Ok((ci, batch, dims))
}

/// Zero-padded "same" cross-correlation.
///
/// Accepts a single sample `[c_in, d, h, w]` or a channel-major batch
/// `[c_in, batch, d, h, w]`; the output keeps the input's layout with `c_out` channels.
pub fn conv3d_forward<T: Scalar>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    let (ci, batch, dims) = check_input(input, kernel)?;
    let co = kernel.out_channels();
    let out = conv_forward_raw(
        input.data(),
        ci,
        batch,
        dims,
        kernel.weights.data(),
        kernel.bias.data(),
        co,
    );
    let mut shape = input.shape().to_vec();
    shape[0] = co;
    Tensor::from_vec(&shape, out)
}

/// Exact gradients of [`conv3d_forward`].
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (ci, batch, dims) = check_input(input, kernel)?;
    let co = kernel.out_channels();
    let mut expected = input.shape().to_vec();
    expected[0] = co;
    if upstream.shape() != expected.as_slice() {
        return Err(Error::shape(
            "conv upstream gradient",
            &expected,
            upstream.shape(),
        ));
    }
    let mut gw = vec![T::ZERO; kernel.weights.len()];
    let mut gb = vec![T::ZERO; co];
    let gi = conv_backward_raw(
        input.data(),
        ci,
        batch,
        dims,
        kernel.weights.data(),
        co,
        upstream.data(),
        &mut gw,
        &mut gb,
        true,
    )
    .expect("input gradient requested");
    Ok(ConvGrads {
        grad_input: Tensor::from_vec(input.shape(), gi)?,
        grad_weights: Tensor::from_vec(kernel.weights.shape(), gw)?,
        grad_bias: Tensor::from_vec(&[co], gb)?,
    })
}

/// Convolution algorithm. Small volumes waste most of a padded run on border
/// positions, so they are lowered to matrix products instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Route {
    Direct,
    Lowered,
}

/// Largest volume (in voxels) handled by [`Route::Lowered`].
const LOWERED_MAX_VOXELS: usize = 216;
/// Samples per lowered block.
const LOWERED_BLOCK: usize = 16;

impl Route {
    fn for_dims(dims: Dims3) -> Self {
        if dims.len() <= LOWERED_MAX_VOXELS {
            Route::Lowered
        } else {
            Route::Direct
        }
    }
}

pub(crate) fn conv_forward_raw<T: Scalar>(
    input: &[T],
    ci: usize,
    batch: usize,
    dims: Dims3,
    weights: &[T],
    bias: &[T],
    co: usize,
) -> Vec<T> {
    forward_route(
        Route::for_dims(dims),
        input,
        ci,
        batch,
        dims,
        weights,
        bias,
        co,
    )
}

/// Accumulates weight and bias gradients into `gw`/`gb` and returns the input
/// gradient when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_raw<T: Scalar>(
    input: &[T],
    ci: usize,
    batch: usize,
    dims: Dims3,
    weights: &[T],
    co: usize,
    upstream: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_input: bool,
) -> Option<Vec<T>> {
    let route = Route::for_dims(dims);
    backward_route(
        route, input, ci, batch, dims, weights, co, upstream, gw, gb, need_input,
    )
}

#[allow(clippy::too_many_arguments)]
fn forward_route<T: Scalar>(
    route: Route,
    input: &[T],
    ci: usize,
    batch: usize,
    dims: Dims3,
    weights: &[T],
    bias: &[T],
    co: usize,
) -> Vec<T> {
    let s = dims.len();
    let mut out = vec![T::ZERO; co * batch * s];
    match route {
        Route::Direct => {
            let geo = Padded::new(dims);
            let wt = transpose_weights(weights, co, ci);
            let mut pad = vec![T::ZERO; geo.buffer_len(ci)];
            let mut run = vec![T::ZERO; co * geo.run_padded];
            for b in 0..batch {
                geo.pad(&input[b * s..], ci, batch * s, &mut pad);
                correlate(&geo, &pad, ci, &wt, co, &mut run);
                geo.unpad(&run, co, Some(bias), &mut out[b * s..], batch * s);
            }
        }
        Route::Lowered => {
            let nb = neighbours(dims);
            let k = ci * TAPS;
            let mut cols = Vec::new();
            for b0 in (0..batch).step_by(LOWERED_BLOCK) {
                let n = LOWERED_BLOCK.min(batch - b0);
                im2col(input, ci, batch, s, &nb, b0, n, &mut cols);
                let m = n * s;
                let lc = MatLayout {
                    offset: b0 * s,
                    rows: co,
                    cols: m,
                    row_stride: batch * s,
                    col_stride: 1,
                };
                gemm(
                    T::ONE,
                    weights,
                    MatLayout::row_major(0, co, k),
                    &cols,
                    MatLayout::transposed(0, m, k),
                    T::ZERO,
                    &mut out,
                    lc,
                );
            }
            for (o, &bo) in bias.iter().enumerate() {
                for v in &mut out[o * batch * s..(o + 1) * batch * s] {
                    *v += bo;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn backward_route<T: Scalar>(
    route: Route,
    input: &[T],
    ci: usize,
    batch: usize,
    dims: Dims3,
    weights: &[T],
    co: usize,
    upstream: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_input: bool,
) -> Option<Vec<T>> {
    let s = dims.len();
    let mut grad_in = if need_input {
        vec![T::ZERO; ci * batch * s]
    } else {
        Vec::new()
    };
    match route {
        Route::Direct => {
            let geo = Padded::new(dims);
            let adj = if need_input {
                adjoint_weights(weights, co, ci)
            } else {
                Vec::new()
            };
            let mut xpad = vec![T::ZERO; geo.buffer_len(ci)];
            let mut gpad = vec![T::ZERO; geo.buffer_len(co)];
            let mut run = if need_input {
                vec![T::ZERO; ci * geo.run_padded]
            } else {
                Vec::new()
            };
            for b in 0..batch {
                geo.pad(&input[b * s..], ci, batch * s, &mut xpad);
                geo.pad(&upstream[b * s..], co, batch * s, &mut gpad);
                weight_gradient(&geo, &gpad, co, &xpad, ci, gw);
                if need_input {
                    correlate(&geo, &gpad, co, &adj, ci, &mut run);
                    geo.unpad(&run, ci, None, &mut grad_in[b * s..], batch * s);
                }
            }
        }
        Route::Lowered => {
            let nb = neighbours(dims);
            let k = ci * TAPS;
            let mut cols = Vec::new();
            let mut gcols = Vec::new();
            for b0 in (0..batch).step_by(LOWERED_BLOCK) {
                let n = LOWERED_BLOCK.min(batch - b0);
                let m = n * s;
                im2col(input, ci, batch, s, &nb, b0, n, &mut cols);
                let lg = MatLayout {
                    offset: b0 * s,
                    rows: co,
                    cols: m,
                    row_stride: batch * s,
                    col_stride: 1,
                };
                gemm(
                    T::ONE,
                    upstream,
                    lg,
                    &cols,
                    MatLayout::row_major(0, m, k),
                    T::ONE,
                    gw,
                    MatLayout::row_major(0, co, k),
                );
                if need_input {
                    gcols.clear();
                    gcols.resize(m * k, T::ZERO);
                    let lgt = MatLayout {
                        offset: b0 * s,
                        rows: m,
                        cols: co,
                        row_stride: 1,
                        col_stride: batch * s,
                    };
                    gemm(
                        T::ONE,
                        upstream,
                        lgt,
                        weights,
                        MatLayout::row_major(0, co, k),
                        T::ZERO,
                        &mut gcols,
                        MatLayout::row_major(0, m, k),
                    );
                    col2im(&gcols, ci, batch, s, &nb, b0, n, &mut grad_in);
                }
            }
        }
    }
    for (c, g) in gb.iter_mut().enumerate() {
        *g += upstream[c * batch * s..(c + 1) * batch * s]
            .iter()
            .fold(T::ZERO, |a, &v| a + v);
    }
    need_input.then_some(grad_in)
}

/// `nb[p * 27 + t]`: flat index of tap `t` around voxel `p`, or `usize::MAX`
/// outside the volume.
fn neighbours(dims: Dims3) -> Vec<usize> {
    let mut nb = Vec::with_capacity(dims.len() * TAPS);
    for p in 0..dims.len() {
        let (z, y, x) = dims.coords(p);
        for t in 0..TAPS {
            let (iz, iy, ix) = (
                (z + t / 9) as isize - 1,
                (y + (t / 3) % 3) as isize - 1,
                (x + t % 3) as isize - 1,
            );
            let ok = iz >= 0
                && iy >= 0
                && ix >= 0
                && (iz as usize) < dims.d
                && (iy as usize) < dims.h
                && (ix as usize) < dims.w;
            nb.push(if ok {
                dims.index(iz as usize, iy as usize, ix as usize)
            } else {
                usize::MAX
            });
        }
    }
    nb
}

/// Rows `(b - b0) * s + p`, columns `c * 27 + t` for samples `b0..b0 + n`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    input: &[T],
    ci: usize,
    batch: usize,
    s: usize,
    nb: &[usize],
    b0: usize,
    n: usize,
    cols: &mut Vec<T>,
) {
    let k = ci * TAPS;
    cols.clear();
    cols.resize(n * s * k, T::ZERO);
    for (r, row) in cols.chunks_exact_mut(k).enumerate() {
        let (b, p) = (b0 + r / s, r % s);
        for c in 0..ci {
            let src = &input[(c * batch + b) * s..][..s];
            for (t, v) in row[c * TAPS..(c + 1) * TAPS].iter_mut().enumerate() {
                let q = nb[p * TAPS + t];
                if q != usize::MAX {
                    *v = src[q];
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `grad`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    ci: usize,
    batch: usize,
    s: usize,
    nb: &[usize],
    b0: usize,
    n: usize,
    grad: &mut [T],
) {
    let k = ci * TAPS;
    for (r, row) in cols.chunks_exact(k).take(n * s).enumerate() {
        let (b, p) = (b0 + r / s, r % s);
        for c in 0..ci {
            let dst = &mut grad[(c * batch + b) * s..][..s];
            for (t, &v) in row[c * TAPS..(c + 1) * TAPS].iter().enumerate() {
                let q = nb[p * TAPS + t];
                if q != usize::MAX {
                    dst[q] += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testutil::{central_diff, probe, random_tensor, rel_err};

    /// Direct nested-loop reference: one output voxel at a time.
    fn naive_conv(input: &Tensor<f64>, k: &ConvKernel<f64>) -> Tensor<f64> {
        let [ci, d, h, w] = input.shape().try_into().unwrap();
        let co = k.out_channels();
        let mut out = Tensor::zeros(&[co, d, h, w]);
        for o in 0..co {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = k.bias[o];
                        for c in 0..ci {
                            for kd in 0..3 {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let (iz, iy, ix) = (z + kd, y + kh, x + kw);
                                        if iz < 1 || iy < 1 || ix < 1 || iz > d || iy > h || ix > w
                                        {
                                            continue;
                                        }
                                        let iv =
                                            input[((c * d + iz - 1) * h + iy - 1) * w + ix - 1];
                                        acc += iv
                                            * k.weights
                                                [(((o * ci + c) * 3 + kd) * 3 + kh) * 3 + kw];
                                    }
                                }
                            }
                        }
                        out[((o * d + z) * h + y) * w + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn kernel(co: usize, ci: usize, seed: u64) -> ConvKernel<f64> {
        ConvKernel::new(
            random_tensor(&[co, ci, 3, 3, 3], seed),
            random_tensor(&[co], seed + 1),
        )
        .unwrap()
    }

    #[test]
    fn zero_input_yields_bias() {
        let k = kernel(3, 2, 7);
        let out = conv3d_forward(&Tensor::zeros(&[2, 4, 3, 5]), &k).unwrap();
        assert_eq!(out.shape(), &[3, 4, 3, 5]);
        for c in 0..3 {
            assert!(out.data()[c * 60..(c + 1) * 60]
                .iter()
                .all(|&v| v == k.bias[c]));
        }
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3, 3]);
        w[13] = 1.0;
        let k = ConvKernel::new(w, Tensor::zeros(&[1])).unwrap();
        let x = random_tensor(&[1, 5, 4, 3], 3);
        assert_eq!(conv3d_forward(&x, &k).unwrap(), x);
    }

    #[test]
    fn matches_naive_loops() {
        let x = random_tensor(&[2, 3, 3, 3], 11);
        let k = kernel(4, 2, 12);
        let fast = conv3d_forward(&x, &k).unwrap();
        let slow = naive_conv(&x, &k);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!(rel_err(*a, *b) < 1e-5, "{a} vs {b}");
        }
        // 32-bit path against the 64-bit oracle
        let k32 = ConvKernel::new(k.weights.cast::<f32>(), k.bias.cast::<f32>()).unwrap();
        let fast32 = conv3d_forward(&x.cast::<f32>(), &k32).unwrap();
        for (a, b) in fast32.data().iter().zip(slow.data()) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batched_layout_matches_per_sample() {
        // [c, batch, d, h, w] with batch 3 equals three independent single-sample calls
        let k = kernel(2, 2, 5);
        let xs: Vec<_> = (0..3)
            .map(|i| random_tensor(&[2, 4, 4, 4], 20 + i))
            .collect();
        let mut packed = vec![0.0; 2 * 3 * 64];
        for (b, x) in xs.iter().enumerate() {
            for c in 0..2 {
                packed[(c * 3 + b) * 64..][..64].copy_from_slice(&x.data()[c * 64..][..64]);
            }
        }
        let batch =
            conv3d_forward(&Tensor::from_vec(&[2, 3, 4, 4, 4], packed).unwrap(), &k).unwrap();
        for (b, x) in xs.iter().enumerate() {
            let single = conv3d_forward(x, &k).unwrap();
            for c in 0..2 {
                assert_eq!(
                    &batch.data()[(c * 3 + b) * 64..][..64],
                    &single.data()[c * 64..][..64]
                );
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let k = kernel(2, 3, 1);
        let err = conv3d_forward(&Tensor::<f64>::zeros(&[2, 3, 3, 3]), &k).unwrap_err();
        assert!(
            err.to_string().contains("[2, 3, 3, 3, 3]") && err.to_string().contains("[2, 3, 3, 3]")
        );
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let x = random_tensor(&[2, 3, 3, 2], 4);
        let k = kernel(3, 2, 5);
        let zero = conv3d_backward(&x, &k, &Tensor::zeros(&[3, 3, 3, 2])).unwrap();
        assert!(zero
            .grad_input
            .data()
            .iter()
            .chain(zero.grad_weights.data())
            .all(|&v| v == 0.0));
        let up = random_tensor(&[3, 3, 3, 2], 6);
        let g1 = conv3d_backward(&x, &k, &up).unwrap();
        let g2 = conv3d_backward(&x, &k, &up.map(|v| 2.0 * v)).unwrap();
        for (a, b) in g1.grad_weights.data().iter().zip(g2.grad_weights.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        for (a, b) in g1.grad_input.data().iter().zip(g2.grad_input.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        for c in 0..3 {
            let s: f64 = up.data()[c * 18..(c + 1) * 18].iter().sum();
            assert!((g1.grad_bias[c] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut x = random_tensor(&[2, 3, 4, 3], 30);
        let mut k = kernel(3, 2, 31);
        let probe_w = random_tensor(&[3, 3, 4, 3], 32);
        let g = conv3d_backward(&x, &k, &probe_w).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let kk = k.clone();
            let num = central_diff(&mut x, i, h, |xx| {
                probe(&conv3d_forward(xx, &kk).unwrap(), &probe_w)
            });
            assert!(
                rel_err(num, g.grad_input[i]) < 1e-6,
                "input {i}: {num} vs {}",
                g.grad_input[i]
            );
        }
        for i in 0..k.weights.len() {
            let xx = x.clone();
            let bias = k.bias.clone();
            let num = central_diff(&mut k.weights, i, h, |w| {
                let kk = ConvKernel::new(w.clone(), bias.clone()).unwrap();
                probe(&conv3d_forward(&xx, &kk).unwrap(), &probe_w)
            });
            assert!(rel_err(num, g.grad_weights[i]) < 1e-6, "weight {i}");
        }
    }

    const ROUTES: [Route; 2] = [Route::Direct, Route::Lowered];

    fn raw_forward(
        route: Route,
        x: &[f64],
        ci: usize,
        batch: usize,
        dims: Dims3,
        k: &ConvKernel<f64>,
    ) -> Vec<f64> {
        forward_route(
            route,
            x,
            ci,
            batch,
            dims,
            k.weights.data(),
            k.bias.data(),
            k.out_channels(),
        )
    }

    #[test]
    fn both_routes_match_naive_loops() {
        // batch 19 crosses a lowered block boundary
        let (ci, co, batch) = (3, 5, 19);
        let k = kernel(co, ci, 40);
        for (d, h, w) in [(5, 5, 5), (2, 3, 4), (6, 7, 5)] {
            let dims = Dims3 { d, h, w };
            let s = dims.len();
            let x = random_tensor(&[ci, batch, d, h, w], 41);
            for route in ROUTES {
                let y = raw_forward(route, x.data(), ci, batch, dims, &k);
                for b in 0..batch {
                    let mut xb = Vec::new();
                    for c in 0..ci {
                        xb.extend_from_slice(&x.data()[(c * batch + b) * s..][..s]);
                    }
                    let want = naive_conv(&Tensor::from_vec(&[ci, d, h, w], xb).unwrap(), &k);
                    for o in 0..co {
                        for (a, e) in y[(o * batch + b) * s..][..s]
                            .iter()
                            .zip(&want.data()[o * s..][..s])
                        {
                            assert!(rel_err(*a, *e) < 1e-9, "{route:?} {dims:?}: {a} vs {e}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn both_routes_match_finite_differences() {
        let (ci, co, batch) = (2, 3, 2);
        let dims = Dims3 { d: 3, h: 4, w: 2 };
        let n = co * batch * dims.len();
        let up = random_tensor(&[n], 50);
        let x0 = random_tensor(&[ci * batch * dims.len()], 51);
        let k0 = kernel(co, ci, 52);
        let objective = |route: Route, x: &Tensor<f64>, k: &ConvKernel<f64>| {
            raw_forward(route, x.data(), ci, batch, dims, k)
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        for route in ROUTES {
            let mut gw = vec![0.0; k0.weights.len()];
            let mut gb = vec![0.0; co];
            let gx = backward_route(
                route,
                x0.data(),
                ci,
                batch,
                dims,
                k0.weights.data(),
                co,
                up.data(),
                &mut gw,
                &mut gb,
                true,
            )
            .unwrap();
            let mut x = x0.clone();
            for i in 0..x.len() {
                let num = central_diff(&mut x, i, 1e-5, |xx| objective(route, xx, &k0));
                assert!(
                    rel_err(num, gx[i]) < 1e-6,
                    "{route:?} input {i}: {num} vs {}",
                    gx[i]
                );
            }
            let mut w = k0.weights.clone();
            for i in 0..w.len() {
                let num = central_diff(&mut w, i, 1e-5, |ww| {
                    objective(
                        route,
                        &x0,
                        &ConvKernel::new(ww.clone(), k0.bias.clone()).unwrap(),
                    )
                });
                assert!(
                    rel_err(num, gw[i]) < 1e-6,
                    "{route:?} weight {i}: {num} vs {}",
                    gw[i]
                );
            }
            for (c, g) in gb.iter().enumerate() {
                let s: f64 = up.data()[c * batch * dims.len()..][..batch * dims.len()]
                    .iter()
                    .sum();
                assert!((g - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn routes_agree_on_batched_backward() {
        let (ci, co, batch) = (4, 3, 18);
        let dims = Dims3 { d: 5, h: 5, w: 5 };
        let s = dims.len();
        let x = random_tensor(&[ci * batch * s], 60);
        let up = random_tensor(&[co * batch * s], 61);
        let k = kernel(co, ci, 62);
        let run = |route| {
            let mut gw = vec![0.5; k.weights.len()];
            let mut gb = vec![0.25; co];
            let gx = backward_route(
                route,
                x.data(),
                ci,
                batch,
                dims,
                k.weights.data(),
                co,
                up.data(),
                &mut gw,
                &mut gb,
                true,
            );
            (gx.unwrap(), gw, gb)
        };
        let (a, b) = (run(Route::Direct), run(Route::Lowered));
        for (u, v) in
            a.0.iter()
                .chain(&a.1)
                .chain(&a.2)
                .zip(b.0.iter().chain(&b.1).chain(&b.2))
        {
            assert!(rel_err(*u, *v) < 1e-10, "{u} vs {v}");
        }
        let none = backward_route(
            Route::Lowered,
            x.data(),
            ci,
            batch,
            dims,
            k.weights.data(),
            co,
            up.data(),
            &mut vec![0.0; k.weights.len()],
            &mut vec![0.0; co],
            false,
        );
        assert!(none.is_none());
    }

    #[test]
    fn route_selection_by_volume() {
        assert_eq!(Route::for_dims(Dims3 { d: 5, h: 5, w: 5 }), Route::Lowered);
        assert_eq!(
            Route::for_dims(Dims3 {
                d: 11,
                h: 11,
                w: 11
            }),
            Route::Direct
        );
    }
}
