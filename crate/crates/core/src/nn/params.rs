//! Named parameter storage, gradient buffers and initializers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: BTreeMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Overwrites values from `(name, tensor)` pairs; every registered name
    /// must be supplied with its registered shape.
    pub fn load_named(&mut self, entries: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = entries
                .get(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {name}")))?;
            src.ensure_shape(self.tensors[i].shape())?;
            self.tensors[i] = src.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, &g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += g;
                }
            }
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn merge(&mut self, other: &ParamGrads<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }

    pub(crate) fn slots(&self) -> &[Option<Tensor<T>>] {
        &self.grads
    }
}

/// Uniform in `±sqrt(1/fan_in)`, the default for linear and conv layers.
pub fn uniform_fan_in<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}
