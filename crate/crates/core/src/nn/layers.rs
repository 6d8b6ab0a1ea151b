//! Layer builders over the tape: linear maps, multi-layer perceptrons and
//! batch normalization with running statistics.

use rand_chacha::ChaCha8Rng;

use crate::nn::params::{he_uniform, ParamId, ParamStore};
use crate::nn::tape::{Tape, Value};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward phase. `Frozen` runs batch statistics without touching the
/// running averages, which keeps finite-difference probes side-effect free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Frozen,
    Eval,
}

impl Phase {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, Phase::Train | Phase::Frozen)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.trainable(format!("{name}.w"), he_uniform(rng, in_dim, out_dim, in_dim));
        let b = store.trainable(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    /// Pure linear map without a bias term (attention projections).
    pub fn projection<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.trainable(format!("{name}.w"), he_uniform(rng, in_dim, out_dim, in_dim));
        Linear {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    /// Zero-initialized variant; the layer starts as the zero map.
    pub fn zeroed<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.trainable(format!("{name}.w"), Tensor::zeros(in_dim, out_dim));
        let b = store.trainable(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Value) -> Value {
        debug_assert_eq!(tape.value(x).cols, self.in_dim, "linear input width");
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.trainable(format!("{name}.gamma"), Tensor::filled(1, dim, S::one()));
        let beta = store.trainable(format!("{name}.beta"), Tensor::zeros(1, dim));
        let run_mean = store.buffer(format!("{name}.running_mean"), Tensor::zeros(1, dim));
        let run_var = store.buffer(format!("{name}.running_var"), Tensor::filled(1, dim, S::one()));
        BatchNorm {
            gamma,
            beta,
            run_mean,
            run_var,
            dim,
        }
    }

    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: Value,
        phase: Phase,
    ) -> Value {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        if phase.uses_batch_stats() {
            if phase == Phase::Train {
                let (mean, var) = tape.batch_stats(x);
                let momentum = S::from_f64(BN_MOMENTUM);
                let keep = S::one() - momentum;
                let rm = store.get_mut(self.run_mean);
                for (r, &m) in rm.data.iter_mut().zip(&mean.data) {
                    *r = *r * keep + m * momentum;
                }
                let rv = store.get_mut(self.run_var);
                for (r, &v) in rv.data.iter_mut().zip(&var.data) {
                    *r = *r * keep + v * momentum;
                }
            }
            tape.batch_norm(x, gamma, beta, S::from_f64(BN_EPS))
        } else {
            let eps = S::from_f64(BN_EPS);
            let neg_mean = store.get(self.run_mean).map(|v| -v);
            let inv_std = store
                .get(self.run_var)
                .map(|v| S::one() / (v + eps).sqrt());
            let neg_mean = tape.constant(neg_mean);
            let inv_std = tape.constant(inv_std);
            let centered = tape.add_bias(x, neg_mean);
            let scaled = tape.mul_bias(centered, inv_std);
            let y = tape.mul_bias(scaled, gamma);
            tape.add_bias(y, beta)
        }
    }
}

/// Linear + batch norm + ReLU, the building block of the feature encoders.
#[derive(Debug, Clone)]
pub struct Lbr {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl Lbr {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Lbr {
            linear: Linear::new(store, rng, name, in_dim, out_dim),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_dim),
        }
    }

    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: Value,
        phase: Phase,
    ) -> Value {
        let y = self.linear.apply(tape, store, x);
        let y = self.bn.apply(tape, store, y, phase);
        tape.relu(y)
    }
}

/// Plain multi-layer perceptron: ReLU between layers, linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let layers = (0..dims.len() - 1)
            .map(|i| {
                Linear::new(
                    store,
                    rng,
                    &format!("{name}.{i}"),
                    dims[i],
                    dims[i + 1],
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Value) -> Value {
        let mut y = x;
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.apply(tape, store, y);
            if i + 1 < self.layers.len() {
                y = tape.relu(y);
            }
        }
        y
    }
}
