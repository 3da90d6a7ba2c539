//! Network architecture: blocks, encoder, guided upsampling decoder, model.

use std::io;

use thiserror::Error;

use crate::tensor::io::FormatError;
use crate::tensor::TensorError;

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod graph;
pub mod gub;
pub mod laplacian;
pub mod model;
pub mod params;

pub use blocks::{Pointwise, SeGate, StackedConv};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ablation_variants, GuidanceBranch, GuidanceType, LaplacianMode, ModelConfig};
pub use encoder::Encoder;
pub use graph::{Grads, Graph};
pub use gub::{GuidedUpsample, StageGuidance};
pub use laplacian::{laplacian_guidance, laplacian_guidance_var};
pub use model::{count_macs, count_params, init_params, Architecture, Model};
pub use params::{cast_stats, Init, Layout, ParamSet, ParamSpec, StatsSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("guide is {guide_h}x{guide_w}, expected twice the feature size {feat_h}x{feat_w}")]
    GuideResolution { guide_h: usize, guide_w: usize, feat_h: usize, feat_w: usize },
    #[error("input {h}x{w} is not divisible by 8")]
    IndivisibleDims { h: usize, w: usize },
}

impl ModelError {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        ModelError::Io { context: context.into(), source }
    }
}
