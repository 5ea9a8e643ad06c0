//! Parameter storage, initialisation and the Adam optimiser.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.values.iter().map(|t| tape.param(t.clone())).collect() }
    }

    /// Registers every parameter as a constant (no gradient) on `tape`.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.values.iter().map(|t| tape.constant(t.clone())).collect() }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a parameter by name, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Points `id` at another tape node, e.g. a perturbed copy in a gradient check.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }

    /// Gradient of each bound parameter, in parameter order.
    pub fn grads(&self, grads: &Gradients, params: &ParamSet) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&params.values)
            .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    }
}

/// Adaptive moment estimation.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.values.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension("one gradient per parameter expected".into()));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Training("non-finite gradient".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params.values.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Zero-mean Gaussian tensor with the given standard deviation.
pub fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Learnable affine parameters plus running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: params.add(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, train: bool) -> Result<(Var, Option<BatchStats>)> {
        let (gamma, beta) = (bound.var(self.gamma), bound.var(self.beta));
        if train {
            let (y, stats) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            Ok((y, Some(stats)))
        } else {
            let y = tape.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, BN_EPS)?;
            Ok((y, None))
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}
