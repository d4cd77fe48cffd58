//! Named trainable parameters. A `ParamSet` owns every weight of a model and
//! is the single place gradients accumulate into; tapes reference parameters
//! by id so staging the same weight twice on one tape is impossible to get
//! wrong silently.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<E: Scalar> {
    name: String,
    pub value: Tensor<E>,
}

impl<E: Scalar> Parameter<E> {
    pub fn name(&self) -> &str {
        &self.name
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<E: Scalar> {
    items: Vec<Parameter<E>>,
    index: HashMap<String, usize>,
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            items: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a tensor as a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.items.len());
        self.index.insert(name.clone(), id.0);
        self.items.push(Parameter {
            name,
            value: value.with_grad(),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.items[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<E> {
        &mut self.items[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<E>)> {
        self.items.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<E>)> {
        self.items
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.value.zero_grad();
        }
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.items.iter().map(|p| p.value.numel()).sum()
    }

    /// Same parameters under another element type (exact for f32 -> f64),
    /// used to re-run a model in oracle precision.
    pub fn cast<F: Scalar>(&self) -> ParamSet<F> {
        ParamSet {
            items: self
                .items
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast::<F>().with_grad(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Uniform init over [-b, b] with b = sqrt(6 / (fan_in + fan_out)). Values
/// are drawn in f64 and rounded through f32 so the f32 model and its f64
/// oracle twin share bit-identical weights.
pub fn glorot_uniform<E: Scalar>(
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<E> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<E> = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.random();
            E::from_f32(((u * 2.0 - 1.0) * bound) as f32)
        })
        .collect();
    Tensor::from_vec(vec![rows, cols], data).expect("shape matches data")
}

/// All-zero tensor, the init for every bias.
pub fn zeros_tensor<E: Scalar>(shape: Vec<usize>) -> Tensor<E> {
    Tensor::zeros(shape)
}
