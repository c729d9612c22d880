use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::tape::{Gradients, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Accumulated gradient; `None` after [`ParamStore::zero_grads`] until the
    /// next accumulation.
    pub grad: Option<Tensor>,
    pub moment1: Tensor,
    pub moment2: Tensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let shape = tensor.shape().to_vec();
        Self {
            name: name.into(),
            tensor,
            grad: None,
            moment1: Tensor::zeros(&shape),
            moment2: Tensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn reset_optimizer(&mut self) {
        let shape = self.shape().to_vec();
        self.moment1 = Tensor::zeros(&shape);
        self.moment2 = Tensor::zeros(&shape);
        self.step_count = 0;
    }
}

/// How a parameter is drawn at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled until within two std of zero.
    TruncatedNormal(f64),
}

impl Init {
    pub fn sample<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::TruncatedNormal(std) => {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| loop {
                        let z: f64 = StandardNormal.sample(rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect();
                Tensor::new(shape, data).expect("shape")
            }
        }
    }
}

/// Ordered collection of named parameters. Order is registration order and
/// is what checkpoints and bindings use.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        self.params.push(Parameter::new(name, tensor));
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.tensor.clone()))
                .collect(),
        }
    }

    /// Records every parameter as a constant (no gradient) on `tape`.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.tensor.clone()))
                .collect(),
        }
    }

    /// Adds the gradients from one backward pass into the accumulators.
    /// Parameters the loss does not reach receive an exact zero.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        if bound.vars.len() != self.params.len() {
            return Err(Error::Contract("binding does not match parameter store".into()));
        }
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            let acc = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.tensor.shape()));
            if let Some(g) = grads.get(*v) {
                for (a, x) in acc.data_mut().iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
        Ok(())
    }

    /// Gradients of one backward pass as tensors in store order (zeros for
    /// parameters the loss does not reach).
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, v)| match grads.get(*v) {
                Some(g) => Tensor::new(p.tensor.shape(), g.to_vec()).expect("shape"),
                None => Tensor::zeros(p.tensor.shape()),
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Flips the sign of every accumulated gradient (used for ascent).
    pub fn negate_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = -*v);
            }
        }
    }

    /// Flat copy of all parameter values in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }
}
