//! Direct 3x3x3 convolution over zero-padded volumes.
//!
//! A sample of extent `d x h x w` is stored in a padded grid of
//! `(d + 2) x (h + 2) x (w + 2)` with a zero border. Every kernel tap is then a
//! constant offset in the flattened grid, so one output channel over the
//! contiguous run of flat positions from the first to the last interior voxel
//! is a sum of shifted input rows. Border positions inside that run are computed
//! and discarded.

use crate::ops::Dims3;
use crate::tensor::Scalar;

/// Output channels per register block.
const CB: usize = 4;
/// Flat positions per register block.
const PB: usize = 16;

/// Flat geometry of a padded grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Padded {
    pub dims: Dims3,
    /// Padded plane and row strides.
    pub sz: usize,
    pub sy: usize,
    /// Values per padded sample.
    pub vol: usize,
    /// First interior flat index.
    pub q0: usize,
    /// Length of the interior run (first to last interior voxel inclusive),
    /// rounded up to whole position blocks.
    pub run_padded: usize,
}

impl Padded {
    pub fn new(dims: Dims3) -> Self {
        let (sy, sz) = (dims.w + 2, (dims.w + 2) * (dims.h + 2));
        let vol = sz * (dims.d + 2);
        let q0 = sz + sy + 1;
        let last = dims.d * sz + dims.h * sy + dims.w;
        let run = last - q0 + 1;
        Self {
            dims,
            sz,
            sy,
            vol,
            q0,
            run_padded: run.div_ceil(PB) * PB,
        }
    }

    /// Flat offsets of the 27 taps in `(kd, kh, kw)` raster order.
    pub fn taps(&self) -> [isize; 27] {
        let mut out = [0isize; 27];
        for (t, o) in out.iter_mut().enumerate() {
            let (kd, kh, kw) = (t / 9, (t / 3) % 3, t % 3);
            *o = (kd as isize - 1) * self.sz as isize
                + (kh as isize - 1) * self.sy as isize
                + kw as isize
                - 1;
        }
        out
    }

    /// Buffer length for `channels` padded samples, with slack so that whole
    /// position blocks never read past the end.
    pub fn buffer_len(&self, channels: usize) -> usize {
        channels * self.vol + self.run_padded
    }

    /// Copies `[channels][d*h*w]` into padded layout.
    pub fn pad<T: Scalar>(&self, src: &[T], channels: usize, stride: usize, dst: &mut [T]) {
        let Dims3 { d, h, w } = self.dims;
        dst.fill(T::ZERO);
        for c in 0..channels {
            let s = &src[c * stride..];
            let o = &mut dst[c * self.vol..];
            for z in 0..d {
                for y in 0..h {
                    let q = (z + 1) * self.sz + (y + 1) * self.sy + 1;
                    o[q..q + w].copy_from_slice(&s[(z * h + y) * w..][..w]);
                }
            }
        }
    }

    /// Position of interior voxel `(z, y, x)` within the interior run.
    #[inline]
    pub fn run_index(&self, z: usize, y: usize, x: usize) -> usize {
        (z + 1) * self.sz + (y + 1) * self.sy + x + 1 - self.q0
    }

    /// Scatters run-indexed values `[channels][run_padded]` back to compact
    /// voxels, adding `bias[c]`.
    pub fn unpad<T: Scalar>(
        &self,
        run: &[T],
        channels: usize,
        bias: Option<&[T]>,
        dst: &mut [T],
        stride: usize,
    ) {
        let Dims3 { d, h, w } = self.dims;
        for c in 0..channels {
            let b = bias.map_or(T::ZERO, |b| b[c]);
            let r = &run[c * self.run_padded..];
            let o = &mut dst[c * stride..];
            for z in 0..d {
                for y in 0..h {
                    let q = self.run_index(z, y, 0);
                    for (v, &s) in o[(z * h + y) * w..][..w].iter_mut().zip(&r[q..q + w]) {
                        *v = s + b;
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn fmadd<T: Scalar, const FUSED: bool>(w: T, x: T, acc: T) -> T {
    if FUSED {
        w.mul_add(x, acc)
    } else {
        acc + w * x
    }
}

/// Sums for `N` output channels at `P` consecutive run positions, stored to
/// `dst + j * dst_stride` for channel `j`.
///
/// # Safety
/// For every `(base, wbase)`, `base + tap + P <= input.len()` for all taps and
/// `wbase + 27 * co <= wt.len()`, with `o0 + N <= co`; `dst` rows are writable.
#[inline(always)]
unsafe fn block<T: Scalar, const N: usize, const P: usize, const FUSED: bool>(
    input: &[T],
    bases: impl Iterator<Item = (usize, usize)>,
    taps: &[isize; 27],
    wt: &[T],
    co: usize,
    o0: usize,
    dst: *mut T,
    dst_stride: usize,
) {
    let mut acc = [[T::ZERO; P]; N];
    for (base, wbase) in bases {
        let src0 = input.as_ptr().add(base);
        let mut w = wt.as_ptr().add(wbase + o0);
        for &off in taps {
            let src = src0.offset(off);
            for j in 0..N {
                let wj = *w.add(j);
                for i in 0..P {
                    acc[j][i] = fmadd::<T, FUSED>(wj, *src.add(i), acc[j][i]);
                }
            }
            w = w.add(co);
        }
    }
    for (j, row) in acc.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            *dst.add(j * dst_stride + i) = v;
        }
    }
}

/// `out[o][q] = sum_c sum_t wt[(c*27 + t)*co + o] * input[c*vol + q0 + q + tap_t]`
/// for `q < run_padded`, where `input` is `ci` padded samples.
#[inline(always)]
fn correlate_body<T: Scalar, const C: usize, const P: usize, const FUSED: bool>(
    geo: &Padded,
    input: &[T],
    ci: usize,
    wt: &[T],
    co: usize,
    out: &mut [T],
) {
    let taps = geo.taps();
    let rp = geo.run_padded;
    debug_assert_eq!(rp % P, 0);
    let dst = out.as_mut_ptr();
    for p0 in (0..rp).step_by(P) {
        let bases = || (0..ci).map(|c| (c * geo.vol + geo.q0 + p0, c * 27 * co));
        let mut o0 = 0;
        // SAFETY: `correlate` checked the buffer sizes; see `Padded::buffer_len`.
        unsafe {
            while o0 + C <= co {
                block::<T, C, P, FUSED>(
                    input,
                    bases(),
                    &taps,
                    wt,
                    co,
                    o0,
                    dst.add(o0 * rp + p0),
                    rp,
                );
                o0 += C;
            }
            while o0 < co {
                block::<T, 1, P, FUSED>(
                    input,
                    bases(),
                    &taps,
                    wt,
                    co,
                    o0,
                    dst.add(o0 * rp + p0),
                    rp,
                );
                o0 += 1;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn correlate_avx2(
    geo: &Padded,
    input: &[f32],
    ci: usize,
    wt: &[f32],
    co: usize,
    out: &mut [f32],
) {
    correlate_body::<f32, CB, PB, true>(geo, input, ci, wt, co, out)
}

/// See [`correlate_body`]; `out` holds `co * run_padded` values.
pub(crate) fn correlate<T: Scalar>(
    geo: &Padded,
    input: &[T],
    ci: usize,
    wt: &[T],
    co: usize,
    out: &mut [T],
) {
    assert!(
        input.len() >= geo.buffer_len(ci)
            && out.len() >= co * geo.run_padded
            && wt.len() >= ci * 27 * co
    );
    #[cfg(target_arch = "x86_64")]
    if let Some((i, w, o)) = T::as_f32(input, wt, out) {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the CPU supports the enabled features.
            unsafe { correlate_avx2(geo, i, ci, w, co, o) };
            return;
        }
    }
    correlate_body::<T, CB, PB, false>(geo, input, ci, wt, co, out)
}

/// SIMD lanes assumed by the weight-gradient kernel.
const LANES: usize = 8;

/// Dot products of `N` upstream rows with the three `kw`-shifted input rows.
///
/// # Safety
/// `g[j] + PB * blocks` and `x + PB * blocks + 2` stay in bounds.
#[inline(always)]
unsafe fn dot_block<T: Scalar, const N: usize, const FUSED: bool>(
    g: [*const T; N],
    x: *const T,
    len: usize,
) -> [[T; 3]; N] {
    let mut acc = [[[T::ZERO; LANES]; 3]; N];
    let mut q = 0;
    while q < len {
        let mut gv = [[T::ZERO; LANES]; N];
        for j in 0..N {
            for i in 0..LANES {
                gv[j][i] = *g[j].add(q + i);
            }
        }
        for k in 0..3 {
            let mut xv = [T::ZERO; LANES];
            for (i, v) in xv.iter_mut().enumerate() {
                *v = *x.add(q + k + i);
            }
            for j in 0..N {
                for i in 0..LANES {
                    acc[j][k][i] = fmadd::<T, FUSED>(gv[j][i], xv[i], acc[j][k][i]);
                }
            }
        }
        q += LANES;
    }
    let mut out = [[T::ZERO; 3]; N];
    for j in 0..N {
        for k in 0..3 {
            out[j][k] = acc[j][k].iter().fold(T::ZERO, |a, &v| a + v);
        }
    }
    out
}

#[inline(always)]
fn weight_gradient_body<T: Scalar, const FUSED: bool>(
    geo: &Padded,
    gpad: &[T],
    co: usize,
    xpad: &[T],
    ci: usize,
    gw: &mut [T],
) {
    let len = geo.run_padded;
    let (sz, sy) = (geo.sz as isize, geo.sy as isize);
    let gbase = |o: usize| gpad[o * geo.vol + geo.q0..].as_ptr();
    let mut o0 = 0;
    while o0 < co {
        let n = if o0 + CB <= co { CB } else { 1 };
        for c in 0..ci {
            for kd in 0..3 {
                for kh in 0..3 {
                    let start = (c * geo.vol + geo.q0) as isize
                        + (kd as isize - 1) * sz
                        + (kh as isize - 1) * sy
                        - 1;
                    let x = xpad[start as usize..].as_ptr();
                    let t0 = kd * 9 + kh * 3;
                    if n == CB {
                        let g: [*const T; CB] = std::array::from_fn(|j| gbase(o0 + j));
                        // SAFETY: `weight_gradient` checked the buffer sizes.
                        let r = unsafe { dot_block::<T, CB, FUSED>(g, x, len) };
                        for (j, row) in r.iter().enumerate() {
                            let w = &mut gw[((o0 + j) * ci + c) * 27 + t0..][..3];
                            for (a, &b) in w.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                    } else {
                        // SAFETY: as above.
                        let [row] = unsafe { dot_block::<T, 1, FUSED>([gbase(o0)], x, len) };
                        let w = &mut gw[(o0 * ci + c) * 27 + t0..][..3];
                        for (a, &b) in w.iter_mut().zip(&row) {
                            *a += b;
                        }
                    }
                }
            }
        }
        o0 += n;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn weight_gradient_avx2(
    geo: &Padded,
    gpad: &[f32],
    co: usize,
    xpad: &[f32],
    ci: usize,
    gw: &mut [f32],
) {
    weight_gradient_body::<f32, true>(geo, gpad, co, xpad, ci, gw)
}

/// `gw[o][c][t] += sum_q gpad[o][q0 + q] * xpad[c][q0 + q + tap_t]` over the
/// interior run, for padded upstream `gpad` and padded input `xpad`.
pub(crate) fn weight_gradient<T: Scalar>(
    geo: &Padded,
    gpad: &[T],
    co: usize,
    xpad: &[T],
    ci: usize,
    gw: &mut [T],
) {
    assert!(
        gpad.len() >= geo.buffer_len(co)
            && xpad.len() >= geo.buffer_len(ci)
            && gw.len() >= co * ci * 27
    );
    debug_assert_eq!(geo.run_padded % LANES, 0);
    #[cfg(target_arch = "x86_64")]
    if let Some((x, g, w)) = T::as_f32(xpad, gpad, gw) {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the CPU supports the enabled features.
            unsafe { weight_gradient_avx2(geo, g, co, x, ci, w) };
            return;
        }
    }
    weight_gradient_body::<T, false>(geo, gpad, co, xpad, ci, gw)
}

/// Rearranges `[co][ci][27]` weights to `[ci][27][co]`.
pub(crate) fn transpose_weights<T: Scalar>(w: &[T], co: usize, ci: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; w.len()];
    for o in 0..co {
        for c in 0..ci {
            for t in 0..27 {
                out[(c * 27 + t) * co + o] = w[(o * ci + c) * 27 + t];
            }
        }
    }
    out
}

/// Weights of the adjoint correlation, `[co][27][ci]` with taps mirrored, so
/// that correlating the upstream gradient yields the input gradient.
pub(crate) fn adjoint_weights<T: Scalar>(w: &[T], co: usize, ci: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; w.len()];
    for o in 0..co {
        for c in 0..ci {
            for t in 0..27 {
                out[(o * 27 + (26 - t)) * ci + c] = w[(o * ci + c) * 27 + t];
            }
        }
    }
    out
}
