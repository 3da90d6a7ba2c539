//! Optimisation loop: augment, normalise, forward, loss, backward, Adam.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{augment, epoch_order, DataError, DepthSample};
use crate::eval::{inverse_depth_transform, EvalError};
use crate::losses::{combined_loss, LossConfig, LossError};
use crate::nn::{save_checkpoint, Graph, Model, ModelError};
use crate::tensor::kernels::bilinear_forward;
use crate::tensor::{Tensor, TensorError};

mod optim;

pub use optim::{Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no gradient for parameter {0}")]
    MissingGrad(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(
        "non-finite loss at step {step} (epoch {epoch}, lr {lr}): total {total}, dssim {dssim}, grad {grad}, l1 {l1}"
    )]
    NonFiniteLoss { step: usize, epoch: usize, lr: f64, total: f64, dssim: f64, grad: f64, l1: f64 },
    #[error("non-finite values at step {step} (epoch {epoch}, lr {lr}): {source}")]
    NonFinite {
        step: usize,
        epoch: usize,
        lr: f64,
        #[source]
        source: TensorError,
    },
}

/// Step-decay learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_epochs: usize,
    /// First epoch (0-based) trained at the reduced rate.
    pub drop_epoch: usize,
    pub drop_factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { base_lr: 1e-4, total_epochs: 20, drop_epoch: 15, drop_factor: 10.0 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.drop_epoch > 0 && self.drop_epoch <= self.total_epochs) {
            return Err(TrainError::Schedule(format!(
                "need 0 < drop_epoch <= total_epochs, got drop_epoch {} and total_epochs {}",
                self.drop_epoch, self.total_epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::Schedule(format!("base_lr {} must be finite and non-negative", self.base_lr)));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor.is_finite()) {
            return Err(TrainError::Schedule(format!("drop_factor {} must be positive", self.drop_factor)));
        }
        Ok(())
    }

    /// `base_lr` before `drop_epoch`, `base_lr / drop_factor` from it on.
    pub fn lr_at(&self, epoch: usize) -> Result<f64, TrainError> {
        self.validate()?;
        if epoch >= self.total_epochs {
            return Err(TrainError::Schedule(format!("epoch {epoch} outside 0..{}", self.total_epochs)));
        }
        Ok(if epoch < self.drop_epoch { self.base_lr } else { self.base_lr / self.drop_factor })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many optimiser steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Model input resolution; samples of another size are resized.
    pub resolution: Option<(usize, usize)>,
    pub augment: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: Schedule::default(),
            adam: AdamConfig::default(),
            batch_size: 8,
            seed: 0,
            max_steps: None,
            resolution: None,
            augment: true,
            checkpoint_dir: None,
            checkpoint_every: 0,
        }
    }
}

/// One optimiser step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub dssim: f64,
    pub grad: f64,
    pub l1: f64,
}

pub const HISTORY_HEADER: &str = "step,epoch,lr,loss,dssim,grad,l1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{},{},{},{},{}", s.step, s.epoch, s.lr, s.loss, s.dssim, s.grad, s.l1);
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(HISTORY_HEADER) {
            return Err(TrainError::Config(format!("history must start with '{HISTORY_HEADER}'")));
        }
        let mut steps = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || TrainError::Config(format!("bad history row '{line}'"));
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad());
            let int = |i: usize| f[i].trim().parse::<usize>().map_err(|_| bad());
            steps.push(StepRecord {
                step: int(0)?,
                epoch: int(1)?,
                lr: num(2)?,
                loss: num(3)?,
                dssim: num(4)?,
                grad: num(5)?,
                l1: num(6)?,
            });
        }
        Ok(History { steps })
    }
}

fn resize_to(t: &Tensor<f32>, res: Option<(usize, usize)>) -> Tensor<f32> {
    match res {
        Some((h, w)) if (t.shape().h, t.shape().w) != (h, w) => bilinear_forward(t, h, w),
        _ => t.clone(),
    }
}

/// Images and normalised inverse-depth targets for a list of samples.
pub fn prepare_batch(samples: &[DepthSample], res: Option<(usize, usize)>) -> Result<(Tensor<f32>, Tensor<f32>), TrainError> {
    let mut images = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        images.push(resize_to(&s.image, res));
        targets.push(inverse_depth_transform(&resize_to(&s.depth, res), s.d_max)?);
    }
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&targets)?))
}

/// Train in place. `observe` sees every step as it completes.
pub fn train_with(
    model: &mut Model<f32>,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    dataset: &[DepthSample],
    observe: &mut dyn FnMut(&StepRecord),
) -> Result<History, TrainError> {
    cfg.schedule.validate()?;
    loss_cfg.validate()?;
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();
    let limit = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.schedule.total_epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        let order = epoch_order(dataset.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if history.steps.len() >= limit {
                break 'epochs;
            }
            let step = history.steps.len();
            let batch: Vec<DepthSample> = chunk
                .iter()
                .map(|&i| if cfg.augment { augment(&dataset[i], &mut rng).0 } else { dataset[i].clone() })
                .collect();
            let (x, y) = prepare_batch(&batch, cfg.resolution)?;

            let non_finite = |e: ModelError| match e {
                ModelError::Tensor(source @ TensorError::NonFinite { .. }) => TrainError::NonFinite { step, epoch, lr, source },
                other => other.into(),
            };
            let mut g = Graph::train(&model.params, &mut model.stats);
            let xv = g.input(x);
            let yv = g.input(y);
            let pred = model.arch.forward(&mut g, xv).map_err(non_finite)?;
            let terms = match combined_loss(&mut g.tape, yv, pred, loss_cfg) {
                Ok(t) => t,
                Err(LossError::Tensor(source @ TensorError::NonFinite { .. })) => {
                    return Err(TrainError::NonFinite { step, epoch, lr, source })
                }
                Err(e) => return Err(e.into()),
            };
            let v = terms.values(&g.tape);
            if !v.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, epoch, lr, total: v.total, dssim: v.dssim, grad: v.grad, l1: v.l1 });
            }
            let grads = g.backward(terms.total).map_err(non_finite)?;
            adam.step(&mut model.params, &grads, lr)?;

            let record = StepRecord { step, epoch, lr, loss: v.total, dssim: v.dssim, grad: v.grad, l1: v.l1 };
            observe(&record);
            history.steps.push(record);
        }
        if let (Some(dir), k) = (&cfg.checkpoint_dir, cfg.checkpoint_every) {
            if k > 0 && (epoch + 1) % k == 0 {
                save_checkpoint(dir.join(format!("epoch_{:03}", epoch + 1)), model)?;
            }
        }
    }
    Ok(history)
}

pub fn train(
    model: &mut Model<f32>,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    dataset: &[DepthSample],
) -> Result<History, TrainError> {
    train_with(model, loss_cfg, cfg, dataset, &mut |_| {})
}
