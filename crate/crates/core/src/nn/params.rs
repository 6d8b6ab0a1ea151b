//! Named parameter storage shared by every network module.
//!
//! Parameters are registered in a fixed order at network construction, which
//! makes optimizer iteration and checkpoint layout deterministic. Buffers
//! (batch-norm running statistics) live in the same store but receive no
//! gradients.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    kinds: Vec<ParamKind>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            kinds: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn register(&mut self, name: String, tensor: Tensor<S>, kind: ParamKind) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.kinds.push(kind);
        ParamId(id)
    }

    pub fn trainable(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        self.register(name.into(), tensor, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        self.register(name.into(), tensor, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.tensors.len())
            .filter(|&i| self.kinds[i] == ParamKind::Trainable)
            .map(ParamId)
            .collect()
    }

    /// Total number of trainable scalar entries.
    pub fn trainable_len(&self) -> usize {
        self.trainable_ids()
            .iter()
            .map(|&id| self.get(id).len())
            .sum()
    }
}

/// Kaiming-style uniform initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
/// Draws happen in `f64` so `f32` and `f64` networks built from the same seed
/// hold the same values.
pub fn he_uniform<S: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(rows, cols, data)
}
