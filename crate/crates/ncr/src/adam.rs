use crate::error::{NcrError, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Adam with bias correction. Moments are kept per trainable parameter;
/// frozen tensors (the truth anchor) are never touched.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let m = store.ids().map(|id| {
            let t = store.get(id);
            Tensor::zeros(t.rows, t.cols)
        }).collect::<Vec<_>>();
        let v = m.clone();
        AdamState { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v }
    }

    /// One update. Missing gradients count as zero (dense semantics).
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) -> Result<()> {
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            if let Some(g) = grads.get(id) {
                if g.data.iter().any(|x| x.is_nan()) {
                    return Err(NcrError::NanGradient(store.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.beta2);
        let bc1 = S::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);

        for id in 0..store.len() {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            match grads.get(id) {
                Some(g) => {
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        m.data[i] = b1 * m.data[i] + one_m_b1 * gi;
                        v.data[i] = b2 * v.data[i] + one_m_b2 * gi * gi;
                        let m_hat = m.data[i] / bc1;
                        let v_hat = v.data[i] / bc2;
                        p.data[i] = p.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                None => {
                    for i in 0..p.data.len() {
                        m.data[i] = b1 * m.data[i];
                        v.data[i] = b2 * v.data[i];
                        let m_hat = m.data[i] / bc1;
                        let v_hat = v.data[i] / bc2;
                        p.data[i] = p.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
