use super::NnError;
use crate::tensor::{Real, Tensor};

/// Floor added inside the logarithm of the cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

/// Row-wise softmax of `[N, K]` logits, stabilized by subtracting each row's maximum.
pub fn softmax<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let k = z.row_len();
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

pub fn one_hot<T: Real>(labels: &[u8], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l as usize] = T::one();
    }
    t
}

fn validate<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<(), NnError> {
    probs.same_shape(targets, "categorical_cross_entropy")?;
    if probs.rank() != 2 {
        return Err(NnError::Dimension {
            op: "categorical_cross_entropy",
            message: format!("expected [N, K], got {:?}", probs.shape()),
        });
    }
    for i in 0..targets.rows() {
        let row = targets.row(i);
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(NnError::InvalidTarget { row: i });
        }
        let sum = probs.row(i).iter().fold(0.0, |a, v| a + v.to_f64().unwrap());
        if (sum - 1.0).abs() > 1e-4 {
            return Err(NnError::InvalidProbabilities { row: i, sum });
        }
    }
    Ok(())
}

/// Batch-mean of `−Σ y·ln(p + floor)`.
pub fn categorical_cross_entropy<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<T, NnError> {
    validate(probs, targets)?;
    let floor = T::lit(LOG_FLOOR);
    let mut total = T::zero();
    for (&p, &y) in probs.data().iter().zip(targets.data()) {
        if y != T::zero() {
            total -= y * (p + floor).ln();
        }
    }
    Ok(total / T::from_usize(probs.rows()).unwrap())
}

/// Gradient of the softmax + cross-entropy composite with respect to the logits: `(p − y) / N`.
pub fn softmax_cross_entropy_grad<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    validate(probs, targets)?;
    let n = T::from_usize(probs.rows()).unwrap();
    let mut g = probs.clone();
    for (v, &y) in g.data_mut().iter_mut().zip(targets.data()) {
        *v = (*v - y) / n;
    }
    Ok(g)
}
