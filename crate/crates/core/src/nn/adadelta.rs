//! ADADELTA: per-parameter step sizes from running averages of squared
//! gradients and squared updates.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Accumulators `E[g^2]` and `E[dx^2]` for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState<T = f32> {
    pub acc_grad: Vec<T>,
    pub acc_update: Vec<T>,
}

impl<T: Scalar> AdadeltaState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            acc_grad: vec![T::ZERO; len],
            acc_update: vec![T::ZERO; len],
        }
    }
}

/// One update of `params` in place.
///
/// Fails without touching anything when a gradient is not finite.
pub fn adadelta_step<T: Scalar>(
    state: &mut AdadeltaState<T>,
    params: &mut [T],
    grads: &[T],
    rho: f64,
    epsilon: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.acc_grad.len() != params.len() {
        return Err(Error::shape(
            "adadelta operands",
            &[params.len()],
            &[grads.len(), state.acc_grad.len()],
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient component {i} of {} ({:?})",
            grads.len(),
            grads[i]
        )));
    }
    let (rho, eps) = (T::from_f64(rho), T::from_f64(epsilon));
    let one_minus = T::ONE - rho;
    for (((x, &g), eg), edx) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.acc_grad)
        .zip(&mut state.acc_update)
    {
        *eg = rho * *eg + one_minus * g * g;
        let dx = -((*edx + eps).sqrt() / (*eg + eps).sqrt()) * g;
        *edx = rho * *edx + one_minus * dx * dx;
        *x += dx;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays_state() {
        let mut st = AdadeltaState {
            acc_grad: vec![1.0f64, 2.0],
            acc_update: vec![0.5, 0.25],
        };
        let mut x = vec![3.0, -1.0];
        adadelta_step(&mut st, &mut x, &[0.0, 0.0], 0.95, 1e-6).unwrap();
        assert_eq!(x, vec![3.0, -1.0]);
        assert!((st.acc_grad[0] - 0.95).abs() < 1e-15 && (st.acc_grad[1] - 1.9).abs() < 1e-15);
        assert!((st.acc_update[0] - 0.475).abs() < 1e-15);
    }

    #[test]
    fn first_step_closed_form() {
        let (rho, eps, g) = (0.95f64, 1e-6, 0.3);
        let mut st = AdadeltaState::new(1);
        let mut x = vec![1.0];
        adadelta_step(&mut st, &mut x, &[g], rho, eps).unwrap();
        let expected = -(eps.sqrt() / ((1.0 - rho) * g * g + eps).sqrt()) * g;
        assert!((x[0] - 1.0 - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_parabola_monotonically() {
        let mut st = AdadeltaState::new(1);
        let mut x = vec![5.0f64];
        let mut prev = x[0].abs();
        for _ in 0..1000 {
            let g = 2.0 * x[0];
            adadelta_step(&mut st, &mut x, &[g], DEFAULT_RHO, DEFAULT_EPSILON).unwrap();
            assert!(x[0].abs() < prev);
            prev = x[0].abs();
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut st = AdadeltaState::new(2);
        let mut x = vec![1.0f32, 2.0];
        let err = adadelta_step(&mut st, &mut x, &[0.1, f32::INFINITY], 0.95, 1e-6).unwrap_err();
        assert!(err.to_string().contains("component 1"));
        assert_eq!(x, vec![1.0, 2.0]);
    }
}
