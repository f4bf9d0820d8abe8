use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean categorical cross-entropy of `softmax(logits)` against `targets`.
///
/// `logits` and `targets` are `[batch, classes]`; targets are one-hot rows. Returns
/// the mean loss and its exact gradient with respect to the logits,
/// `(softmax - target) / batch`.
pub fn softmax_crossentropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    let [batch, classes] = *logits.shape() else {
        return Err(Error::shape("logits rank", &[0, 2], logits.shape()));
    };
    if targets.shape() != logits.shape() {
        return Err(Error::shape(
            "cross-entropy targets",
            logits.shape(),
            targets.shape(),
        ));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let inv_batch = T::ONE / T::from_f64(batch as f64);
    let mut grad = Vec::with_capacity(logits.len());
    let mut total = T::ZERO;
    for (row, t) in logits
        .data()
        .chunks_exact(classes)
        .zip(targets.data().chunks_exact(classes))
    {
        let max = row
            .iter()
            .copied()
            .fold(row[0], |a, b| if b > a { b } else { a });
        let sum_exp = row.iter().fold(T::ZERO, |acc, &l| acc + (l - max).exp());
        let lse = max + sum_exp.ln();
        let t_sum = t.iter().fold(T::ZERO, |a, &b| a + b);
        for (&l, &tj) in row.iter().zip(t) {
            total += tj * (lse - l);
            let p = (l - lse).exp();
            grad.push((p * t_sum - tj) * inv_batch);
        }
    }
    Ok((total * inv_batch, Tensor::from_vec(logits.shape(), grad)?))
}

/// Builds one-hot targets for the two-class problem (1 = lesion).
pub(crate) fn one_hot<T: Scalar>(labels: &[u8]) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len().max(1), 2]);
    for (i, &l) in labels.iter().enumerate() {
        t[i * 2 + usize::from(l.min(1))] = T::ONE;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testutil::{central_diff, random_tensor, rel_err};

    #[test]
    fn equal_logits_cost_ln2() {
        let logits = Tensor::<f64>::full(&[5, 2], 0.7);
        let (loss, _) = softmax_crossentropy(&logits, &one_hot(&[0, 1, 1, 0, 1])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let logits = Tensor::<f64>::from_vec(&[2, 2], vec![20.0, 0.0, 0.0, 20.0]).unwrap();
        let (loss, _) = softmax_crossentropy(&logits, &one_hot(&[0, 1])).unwrap();
        assert!(loss < 1e-8);
        let (loss32, _) = softmax_crossentropy(&logits.cast::<f32>(), &one_hot(&[0, 1])).unwrap();
        assert!(loss32 < 1e-8);
    }

    #[test]
    fn rejects_non_finite() {
        let logits = Tensor::<f32>::from_vec(&[1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(
            softmax_crossentropy(&logits, &one_hot(&[0])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut logits = random_tensor(&[6, 2], 3).map(|v| 4.0 * v);
        let t = one_hot::<f64>(&[0, 1, 1, 0, 0, 1]);
        let (_, g) = softmax_crossentropy(&logits, &t).unwrap();
        for i in 0..logits.len() {
            let num = central_diff(&mut logits, i, 1e-6, |l| {
                softmax_crossentropy(l, &t).unwrap().0
            });
            assert!(rel_err(num, g[i]) < 1e-6);
        }
    }
}
