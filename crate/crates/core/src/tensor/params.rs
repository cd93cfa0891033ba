use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{NdArray, TensorError};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, kept in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<NdArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdArray) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform matrix `[fan_in × fan_out]`.
    pub fn add_xavier(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, NdArray::from_parts(vec![fan_in, fan_out], data))
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite positive std");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, NdArray::from_parts(shape.to_vec(), data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &NdArray {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(NdArray::len).sum()
    }

    /// Replaces every value from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        if self.names != other.names {
            return Err(TensorError::DataLength {
                shape: vec![self.len()],
                len: other.len(),
            });
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_from",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    values: Vec<NdArray>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store.values.iter().map(|v| NdArray::zeros(v.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &NdArray {
        &self.values[id.0]
    }

    pub fn add(&mut self, id: ParamId, grad: &NdArray) {
        for (a, b) in self.values[id.0].data_mut().iter_mut().zip(grad.data()) {
            *a += b;
        }
    }

    /// Adds every bound-parameter gradient recorded in `graph`.
    pub fn absorb(&mut self, graph: &super::Graph) {
        for (id, g) in graph.param_grads() {
            self.add(id, g);
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NdArray)> {
        self.values.iter().enumerate().map(|(i, v)| (ParamId(i), v))
    }
}
