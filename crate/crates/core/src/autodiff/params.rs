use rand::Rng;

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its gradient buffer and momentum velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            velocity: Tensor::zeros(&shape),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(
            name,
            Tensor::new(shape.to_vec(), data).expect("valid shape"),
        )
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

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Adds the gradients from a finished backward pass into the buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (pid, grad) in graph.param_grads() {
            if let Some(grad) = grad {
                self.params[pid.0].grad.add_assign(grad);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self { lr, momentum })
    }

    /// `v <- momentum * v + grad; theta <- theta - lr * v`, then clears the
    /// gradients. Nothing is modified if any gradient is non-finite.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(bad) = store.params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::Optimizer {
                param: bad.name.clone(),
            });
        }
        for p in &mut store.params {
            for ((v, g), theta) in p
                .velocity
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(p.value.data_mut())
            {
                *v = self.momentum * *v + g;
                *theta -= self.lr * *v;
            }
        }
        store.zero_grads();
        Ok(())
    }
}
