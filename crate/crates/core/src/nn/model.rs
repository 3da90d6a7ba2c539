use super::blocks::Pointwise;
use super::config::{GuidanceBranch, GuidanceType, ModelConfig};
use super::encoder::Encoder;
use super::graph::Graph;
use super::gub::{GuidedUpsample, StageGuidance};
use super::laplacian::laplacian_guidance_var;
use super::params::{cast_stats, Layout, ParamSet, StatsSet};
use super::ModelError;
use crate::tensor::{Scalar, Tensor, Var};

/// The network structure derived from a [`ModelConfig`], independent of
/// parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub stages: [GuidedUpsample; 3],
    pub head: Pointwise,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let guidance = match (config.guidance_type, config.guidance_branch) {
            (GuidanceType::None, _) => StageGuidance::None,
            (_, GuidanceBranch::Gub) => StageGuidance::Gub,
            (_, GuidanceBranch::Direct) => StageGuidance::Direct,
        };
        let d = config.decoder_channels;
        let ins = [config.encoder_out_channels, d[0], d[1]];
        Ok(Architecture {
            config: config.clone(),
            encoder: Encoder::new(config.encoder_width, config.encoder_out_channels),
            stages: std::array::from_fn(|j| {
                GuidedUpsample::new(format!("decoder.stage{j}"), ins[j], d[j], guidance, config.se_reduction)
            }),
            head: Pointwise::new("head", d[2], config.output_channels),
        })
    }

    pub fn layout(&self) -> Layout {
        let mut layout = Layout::default();
        self.encoder.layout(&mut layout);
        self.stages.iter().for_each(|s| s.layout(&mut layout));
        self.head.layout(&mut layout);
        layout
    }

    pub fn check_dims(h: usize, w: usize) -> Result<(), ModelError> {
        if h == 0 || w == 0 || !h.is_multiple_of(8) || !w.is_multiple_of(8) {
            return Err(ModelError::IndivisibleDims { h, w });
        }
        Ok(())
    }

    /// Guidance image for each decoder stage, at 1/4, 1/2 and full resolution.
    pub fn guides<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<[Option<Var>; 3], ModelError> {
        let s = g.tape.shape(x);
        Self::check_dims(s.h, s.w)?;
        let mut out = [None; 3];
        for (j, slot) in out.iter_mut().enumerate() {
            let k = 2 - j as u32;
            *slot = match self.config.guidance_type {
                GuidanceType::None => None,
                GuidanceType::Image => Some(g.tape.resize(x, s.h >> k, s.w >> k)?),
                GuidanceType::Laplacian => Some(laplacian_guidance_var(&mut g.tape, x, k, self.config.laplacian_mode)?),
            };
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, ModelError> {
        let guides = self.guides(g, x)?;
        self.forward_with_guides(g, x, guides)
    }

    /// Forward pass with caller-supplied guidance images.
    pub fn forward_with_guides<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        guides: [Option<Var>; 3],
    ) -> Result<Var, ModelError> {
        let mut z = self.encoder.forward(g, x)?;
        for (stage, guide) in self.stages.iter().zip(guides) {
            z = stage.forward(g, z, guide)?;
        }
        self.head.forward(g, z)
    }

    /// Analytic multiply-accumulate count for one sample.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64, ModelError> {
        Self::check_dims(h, w)?;
        let mut total = self.encoder.macs(h, w);
        let (mut fh, mut fw) = (h / 8, w / 8);
        for stage in &self.stages {
            total += stage.macs(fh, fw);
            (fh, fw) = (2 * fh, 2 * fw);
        }
        Ok(total + self.head.macs(h, w))
    }
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<(ParamSet<f32>, StatsSet<f32>), ModelError> {
    Ok(Architecture::new(config)?.layout().init(seed))
}

pub fn count_params(config: &ModelConfig) -> Result<usize, ModelError> {
    Ok(Architecture::new(config)?.layout().param_count())
}

pub fn count_macs(config: &ModelConfig, h: usize, w: usize) -> Result<u64, ModelError> {
    Architecture::new(config)?.macs(h, w)
}

/// Architecture plus parameter values and batch-norm statistics.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub arch: Architecture,
    pub params: ParamSet<T>,
    pub stats: StatsSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let arch = Architecture::new(config)?;
        let (params, stats) = arch.layout().init(seed);
        Ok(Model { arch, params, stats })
    }

    pub fn from_parts(config: &ModelConfig, params: ParamSet<T>, stats: StatsSet<T>) -> Result<Self, ModelError> {
        let arch = Architecture::new(config)?;
        arch.layout().check(&params, &stats)?;
        Ok(Model { arch, params, stats })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn stats_initialized(&self) -> bool {
        self.stats.values().all(|s| s.initialized)
    }

    /// Inference with running statistics.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::eval(&self.params, &self.stats);
        let xv = g.input(x.clone());
        let y = self.arch.forward(&mut g, xv)?;
        Ok(g.tape.value(y).clone())
    }

    /// Train-mode forward without gradients: uses batch statistics and folds
    /// them into the running averages.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::train(&self.params, &mut self.stats).trainable(false);
        let xv = g.input(x.clone());
        let y = self.arch.forward(&mut g, xv)?;
        Ok(g.tape.value(y).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { arch: self.arch.clone(), params: self.params.cast(), stats: cast_stats(&self.stats) }
    }
}
