use indexmap::IndexMap;

use super::params::{ParamSet, StatsSet};
use super::ModelError;
use crate::tensor::{BnMode, Scalar, Tape, Tensor, Var};

enum Stats<'a, T> {
    Train(&'a mut StatsSet<T>),
    Eval(&'a StatsSet<T>),
}

/// One forward pass of a network: a tape plus lazy binding of named
/// parameters onto it.
pub struct Graph<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ParamSet<T>,
    stats: Stats<'a, T>,
    bound: IndexMap<String, Var>,
    trainable: bool,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// Batch statistics, running averages updated, parameters trainable.
    pub fn train(params: &'a ParamSet<T>, stats: &'a mut StatsSet<T>) -> Self {
        Graph { tape: Tape::new(), params, stats: Stats::Train(stats), bound: IndexMap::new(), trainable: true }
    }

    /// Running statistics, parameters frozen.
    pub fn eval(params: &'a ParamSet<T>, stats: &'a StatsSet<T>) -> Self {
        Graph { tape: Tape::new(), params, stats: Stats::Eval(stats), bound: IndexMap::new(), trainable: false }
    }

    /// Replace the tape, e.g. with [`Tape::counting`].
    pub fn with_tape(mut self, tape: Tape<T>) -> Self {
        self.tape = tape;
        self
    }

    pub fn trainable(mut self, yes: bool) -> Self {
        self.trainable = yes;
        self
    }

    pub fn is_train(&self) -> bool {
        matches!(self.stats, Stats::Train(_))
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn param(&mut self, name: &str) -> Result<Var, ModelError> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let v = self.tape.leaf(t.clone(), self.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var, ModelError> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        Ok(self.tape.conv2d(x, w, Some(b), stride, padding)?)
    }

    pub fn dense(&mut self, name: &str, x: Var) -> Result<Var, ModelError> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        Ok(self.tape.dense(x, w, b)?)
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var, ModelError> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let missing = || ModelError::MissingParam(name.to_string());
        let mode = match &mut self.stats {
            Stats::Train(s) => BnMode::Train(s.get_mut(name).ok_or_else(missing)?),
            Stats::Eval(s) => BnMode::Eval(s.get(name).ok_or_else(missing)?),
        };
        Ok(self.tape.batch_norm(x, gamma, beta, mode)?)
    }

    /// Run backward from `loss` and collect the gradient of every bound parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>, ModelError> {
        self.tape.backward(loss)?;
        Ok(self.grads())
    }

    /// Gradients of bound parameters after [`Tape::backward`].
    pub fn grads(&self) -> Grads<T> {
        let mut out = IndexMap::new();
        for (name, v) in &self.bound {
            if let Some(g) = self.tape.grad(*v) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

pub type Grads<T> = IndexMap<String, Tensor<T>>;
