//! Named, seeded, trainable parameters.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`, fan-in being the leading extent.
    UniformFanIn,
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub init: Init,
    pub grad: Option<Tensor<T>>,
}

/// Owns every parameter of a model in creation order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::UniformFanIn => {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
            }
        };
        Tensor::new(shape.to_vec(), tensor.data().to_vec())?;
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor,
            init,
            grad: None,
        });
        Ok(id)
    }

    /// Adds a parameter with explicit values.
    pub fn add_tensor(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let shape = tensor.shape().to_vec();
        let id = self.add(name, &shape, Init::Zeros)?;
        self.params[id.0].tensor = tensor;
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Adds the gradients of every parameter bound in `graph`.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        let mut bound: Vec<_> = graph.bound_params().collect();
        bound.sort();
        for (id, var) in bound {
            let Some(g) = grads.get(var) else { continue };
            let slot = &mut self.params[id.0].grad;
            match slot {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += b),
                None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Plain gradient descent: `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&mut self, lr: T) {
        for p in &mut self.params {
            if let Some(g) = &p.grad {
                p.tensor
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(w, &d)| *w -= lr * d);
            }
        }
    }

    /// Overwrites parameter values by name; shapes must match.
    pub fn load_named(&mut self, values: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, t) in values {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name} in checkpoint")))?;
            if self.tensor(id).shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint shape {:?} for {name}, model expects {:?}",
                    t.shape(),
                    self.tensor(id).shape()
                )));
            }
            self.params[id.0].tensor = t.clone();
        }
        Ok(())
    }
}
