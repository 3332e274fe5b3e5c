use super::tensor::{lit, Real, Tensor};
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over the rows of `logits` and its gradient
/// `(softmax - onehot) / batch`.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    softmax_xent_scaled(logits, labels, logits.batch())
}

/// Like [`softmax_xent`] but divides loss and gradient by `normalizer`
/// instead of the row count, so that sub-batches routed to different output
/// heads share one batch-level mean.
pub fn softmax_xent_scaled<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    normalizer: usize,
) -> Result<(T, Tensor<T>)> {
    if logits.shape.len() != 2 || labels.len() != logits.batch() {
        return Err(Error::Shape(format!(
            "logits {:?} with {} labels",
            logits.shape,
            labels.len()
        )));
    }
    let c = logits.shape[1];
    let scale = lit::<T>(1.0 / normalizer.max(1) as f64);
    let mut grad = logits.clone();
    let mut loss = T::zero();
    for (row, &label) in grad.data.chunks_exact_mut(c).zip(labels) {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z = z + *v;
        }
        loss = loss + z.ln() - (row[label].ln());
        for v in row.iter_mut() {
            *v = *v / z * scale;
        }
        row[label] = row[label] - scale;
    }
    Ok((loss * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let (loss, _) = softmax_xent(&Tensor::<f64>::zeros(&[3, 7]), &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_match_gives_zero_loss() {
        let logits = Tensor::from_vec(&[1, 3], vec![0.0, 200.0, 0.0f64]).unwrap();
        let (loss, grad) = softmax_xent(&logits, &[1]).unwrap();
        assert!(loss < 1e-12);
        assert!(grad.data.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn label_range_checked() {
        assert!(matches!(
            softmax_xent(&Tensor::<f32>::zeros(&[1, 3]), &[3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data: Vec<f64> = (0..12).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.4).collect();
        let logits = Tensor::from_vec(&[3, 4], data).unwrap();
        let labels = [2, 0, 3];
        let (_, grad) = softmax_xent(&logits, &labels).unwrap();
        let eps = 1e-5;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data[i] += eps;
            let mut m = logits.clone();
            m.data[i] -= eps;
            let num = (softmax_xent(&p, &labels).unwrap().0 - softmax_xent(&m, &labels).unwrap().0)
                / (2.0 * eps);
            assert!(
                (num - grad.data[i]).abs() / num.abs().max(grad.data[i].abs()).max(1e-8) < 1e-6
            );
        }
    }
}
