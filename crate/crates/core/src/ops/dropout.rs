use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Scalar, Tensor};

/// Inverted dropout: zeroes each element with probability `p` and scales the
/// survivors by `1 / (1 - p)` in training; identity in inference.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if mode == Mode::Infer || p == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask::<T, R>(input.len(), p, rng);
    let data = input
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| v * m)
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Multiplicative mask of zeros and `1 / (1 - p)`.
pub(crate) fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    if p == 0.0 {
        return vec![T::ONE; len];
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { T::ZERO } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_probability_and_inference_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::full(&[100], 3.0);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, Mode::Infer, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.9, Mode::Infer, &mut rng).unwrap(), x);
    }

    #[test]
    fn rejects_out_of_range_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::zeros(&[4]);
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn half_of_a_million_survive() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f32>::full(&[1_000_000], 1.0);
        let y = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn deterministic_for_a_given_stream() {
        let x = Tensor::<f64>::full(&[64], 1.0);
        let a = dropout(&x, 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = dropout(&x, 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
