use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelError;
use crate::tensor::{RunningStats, Scalar, Shape, Tensor};

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Every named parameter and batch-norm statistic a network owns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    pub params: Vec<ParamSpec>,
    /// `(name, channels)` of each batch-norm layer.
    pub stats: Vec<(String, usize)>,
}

impl Layout {
    pub fn param(&mut self, name: impl Into<String>, shape: Shape, init: Init) {
        self.params.push(ParamSpec { name: name.into(), shape, init });
    }

    pub fn stat(&mut self, name: impl Into<String>, channels: usize) {
        self.stats.push((name.into(), channels));
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.numel()).sum()
    }

    /// Draw parameters in declaration order from a seeded stream.
    pub fn init<T: Scalar>(&self, seed: u64) -> (ParamSet<T>, StatsSet<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        for spec in &self.params {
            let tensor = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::ones(spec.shape),
                Init::Kaiming { fan_in } => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    let data = (0..spec.shape.numel()).map(|_| T::of(normal.sample(&mut rng))).collect();
                    Tensor::from_vec(spec.shape, data).expect("spec shape")
                }
            };
            params.insert(spec.name.clone(), tensor);
        }
        let mut stats = StatsSet::default();
        for (name, c) in &self.stats {
            stats.insert(name.clone(), RunningStats::new(*c));
        }
        (params, stats)
    }

    /// Check that a parameter set has exactly this layout.
    pub fn check<T: Scalar>(&self, params: &ParamSet<T>, stats: &StatsSet<T>) -> Result<(), ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                params.len()
            )));
        }
        for spec in &self.params {
            let t = params.get(&spec.name).ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {} has shape {}, expected {}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        if stats.len() != self.stats.len() {
            return Err(ModelError::Checkpoint(format!("expected {} norm layers, found {}", self.stats.len(), stats.len())));
        }
        for (name, c) in &self.stats {
            let s = stats.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if s.channels() != *c || s.var.len() != *c {
                return Err(ModelError::Checkpoint(format!("norm layer {name} has {} channels, expected {c}", s.channels())));
            }
        }
        Ok(())
    }
}

pub type StatsSet<T> = IndexMap<String, RunningStats<T>>;

/// Ordered named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { tensors: IndexMap::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn insert(&mut self, name: String, t: Tensor<T>) {
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

pub fn cast_stats<T: Scalar, U: Scalar>(stats: &StatsSet<T>) -> StatsSet<U> {
    stats.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}
