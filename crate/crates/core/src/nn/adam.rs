//! Adaptive-moment optimizer with global-norm gradient clipping.

use crate::nn::params::{ParamId, ParamKind, ParamStore};
use crate::nn::tape::{Gradients, Tape};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
pub struct GradMap<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradMap<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        GradMap {
            grads: vec![None; store.len()],
        }
    }

    /// Pull parameter gradients out of a finished backward pass, scaled by
    /// `scale` (1/batch for gradient averaging).
    pub fn accumulate(&mut self, tape: &Tape<S>, gradients: &Gradients<S>, scale: S) {
        for &(id, value) in tape.param_leaves() {
            if let Some(g) = gradients.get(value) {
                let slot = &mut self.grads[id.0];
                match slot {
                    Some(acc) => {
                        for (a, &v) in acc.data.iter_mut().zip(&g.data) {
                            *a = *a + v * scale;
                        }
                    }
                    None => {
                        *slot = Some(g.map(|v| v * scale));
                    }
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for g in self.grads.iter().flatten() {
            for v in &g.data {
                let x = v.as_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    /// Scale all gradients so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = S::from_f64(max_norm / norm);
            for g in self.grads.iter_mut().flatten() {
                for v in &mut g.data {
                    *v = *v * scale;
                }
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.data.iter().all(|v| v.is_finite()))
    }
}

pub struct Adam<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for id in store.ids() {
            let t = store.get(id);
            let shape = if store.kind(id) == ParamKind::Trainable {
                Tensor::zeros(t.rows, t.cols)
            } else {
                Tensor::zeros(0, 0)
            };
            m.push(shape.clone());
            v.push(shape);
        }
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &GradMap<S>, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let eps = S::from_f64(self.eps);
        let corr1 = S::from_f64(1.0 - self.beta1.powi(t));
        let corr2 = S::from_f64(1.0 - self.beta2.powi(t));
        let lr = S::from_f64(lr);
        for id in store.trainable_ids() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (S::one() - b1) * gi;
                v.data[i] = b2 * v.data[i] + (S::one() - b2) * gi * gi;
                let m_hat = m.data[i] / corr1;
                let v_hat = v.data[i] / corr2;
                p.data[i] = p.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Flat snapshot of the moment buffers, aligned with store ids.
    pub fn state(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<Tensor<S>>, v: Vec<Tensor<S>>, step_count: u64) {
        assert_eq!(m.len(), self.m.len(), "optimizer state size");
        assert_eq!(v.len(), self.v.len(), "optimizer state size");
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }
}
