use crate::{Result, Scalar, Tensor5, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

pub fn activation<T: Scalar>(x: &Tensor5<T>, kind: Activation) -> Tensor5<T> {
    match kind {
        Activation::Relu => x.map(|v| if v > T::ZERO { v } else { T::ZERO }),
        Activation::Tanh => x.map(|v| v.tanh()),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Backward pass expressed through the forward *output* `y`.
///
/// ReLU's derivative at zero is taken as 0.
pub fn activation_backward<T: Scalar>(
    y: &Tensor5<T>,
    grad_out: &Tensor5<T>,
    kind: Activation,
) -> Result<Tensor5<T>> {
    if y.shape() != grad_out.shape() {
        return Err(TensorError::shape(
            "activation_backward",
            y.shape(),
            grad_out.shape(),
        ));
    }
    let data: Vec<T> = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| match kind {
            Activation::Relu => {
                if y > T::ZERO {
                    g
                } else {
                    T::ZERO
                }
            }
            Activation::Tanh => g * (T::ONE - y * y),
            Activation::Sigmoid => g * y * (T::ONE - y),
        })
        .collect();
    Tensor5::from_vec(y.shape(), data)
}
