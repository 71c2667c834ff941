use crate::{Result, Scalar, Tensor5, TensorError};

/// Clamp applied to predictions before taking logs.
pub const BCE_EPS: f64 = 1e-7;

fn check<T: Scalar>(pred: &Tensor5<T>, target: &Tensor5<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(TensorError::shape("bce_loss", pred.shape(), target.shape()));
    }
    Ok(())
}

/// Mean binary cross-entropy over every element. Accumulates in `f64`.
pub fn bce_loss<T: Scalar>(pred: &Tensor5<T>, target: &Tensor5<T>) -> Result<f64> {
    check(pred, target)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.to_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let t = t.to_f64();
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Gradient of [`bce_loss`] with respect to `pred`; zero where the clamp is active.
pub fn bce_loss_backward<T: Scalar>(pred: &Tensor5<T>, target: &Tensor5<T>) -> Result<Tensor5<T>> {
    check(pred, target)?;
    let scale = 1.0 / pred.len().max(1) as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.to_f64();
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                return T::ZERO;
            }
            let t = t.to_f64();
            T::from_f64(scale * (p - t) / (p * (1.0 - p)))
        })
        .collect();
    Tensor5::from_vec(pred.shape(), data)
}
