use crate::{Result, Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for a parameter set given as a list of flat buffers.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub hyper: AdamHyper,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with zeroed moments shaped like `sizes`.
    pub fn new(hyper: AdamHyper, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![T::ZERO; n], vec![T::ZERO; n]))
            .unzip();
        AdamState { hyper, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update applied in place.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::shape("adam_step", self.m.len(), params.len()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(TensorError::shape("adam_step", m.len(), p.len()));
            }
        }
        self.step += 1;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (nb1, nb2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + nb1 * gi;
                v[i] = b2 * v[i] + nb2 * gi * gi;
                let m_hat = m[i].to_f64() / c1;
                let v_hat = v[i].to_f64() / c2;
                p[i] -= T::from_f64(lr * m_hat / (v_hat.sqrt() + epsilon));
            }
        }
        Ok(())
    }
}
