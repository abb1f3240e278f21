use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::params::{ParamGrads, ParamStore};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: T) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for (i, g) in grads.slots().iter().enumerate() {
            let Some(g) = g else { continue };
            let id = super::params::ParamId(i);
            let p = store.get_mut(id).data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers, in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }
}
