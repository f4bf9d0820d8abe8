//! Shared inputs for the benchmarks.

use msseg_core::ops::Dims3;
use msseg_core::phantom::PhantomSpec;
use msseg_core::Tensor;

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn filled(shape: &[usize], seed: u32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(2_654_435_761).max(1);
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 17;
            s ^= s << 5;
            s as f32 / u32::MAX as f32 * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(shape, data).expect("non-empty shape")
}

/// Small phantom family that keeps whole-case benchmarks in seconds.
pub fn small_phantom() -> PhantomSpec {
    PhantomSpec {
        dims: Dims3::cube(16),
        brain_radii: [0.7, 0.8, 0.7],
        lesion_count: (1, 3),
        lesion_radius: (1.5, 2.0),
        lesion_volume_ml: (0.02, 0.04),
        ..PhantomSpec::default()
    }
}
