//! Guided upsampling decoder stage and its ablation variants.

use super::blocks::{Pointwise, SeGate, StackedConv};
use super::graph::Graph;
use super::params::Layout;
use super::ModelError;
use crate::tensor::{Scalar, Var};

/// How a single decoder stage consumes its guidance image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageGuidance {
    /// Guide features from a stacked convolution.
    Gub,
    /// Raw guide channels.
    Direct,
    /// No guidance; the SE/residual path sees `h_t` only.
    None,
}

/// One decoder stage: doubles resolution, maps `c_in` to `c_out` channels.
///
/// ```text
/// h_up  = Up2(z)
/// h_t   = S_target(h_up)
/// h_g   = S_guide(guide)                (Gub)
/// h_res = S_res(SE([h_t, h_g]))
/// out   = reduce(h_up + h_res)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedUpsample {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub guidance: StageGuidance,
    pub guide_branch: Option<StackedConv>,
    pub target: StackedConv,
    pub se: SeGate,
    pub residual: StackedConv,
    pub reduce: Pointwise,
}

pub const GUIDE_CHANNELS: usize = 3;

impl GuidedUpsample {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, guidance: StageGuidance, se_reduction: usize) -> Self {
        let name = name.into();
        let c = c_in;
        let guide_branch = match guidance {
            StageGuidance::Gub => Some(StackedConv::new(format!("{name}.guide"), GUIDE_CHANNELS, c)),
            _ => None,
        };
        let c_cat = match guidance {
            StageGuidance::Gub => 2 * c,
            StageGuidance::Direct => c + GUIDE_CHANNELS,
            StageGuidance::None => c,
        };
        // Direct concatenation rarely yields a multiple of the reduction, so
        // the bottleneck rounds up there.
        let se = SeGate::new(format!("{name}.se"), c_cat, se_reduction)
            .unwrap_or_else(|_| SeGate::with_hidden(format!("{name}.se"), c_cat, c_cat.div_ceil(se_reduction.max(1))));
        GuidedUpsample {
            target: StackedConv::new(format!("{name}.target"), c, c),
            residual: StackedConv::new(format!("{name}.residual"), c_cat, c),
            reduce: Pointwise::new(format!("{name}.reduce"), c, c_out),
            name,
            c_in,
            c_out,
            guidance,
            guide_branch,
            se,
        }
    }

    pub fn concat_channels(&self) -> usize {
        self.se.channels
    }

    pub fn layout(&self, layout: &mut Layout) {
        if let Some(s) = &self.guide_branch {
            s.layout(layout);
        }
        self.target.layout(layout);
        self.se.layout(layout);
        self.residual.layout(layout);
        self.reduce.layout(layout);
    }

    /// `guide` must be present unless the stage is unguided, with spatial dims
    /// exactly twice those of `z`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var, guide: Option<Var>) -> Result<Var, ModelError> {
        let zs = g.tape.shape(z);
        let (h2, w2) = (2 * zs.h, 2 * zs.w);
        let guide = match (self.guidance, guide) {
            (StageGuidance::None, _) => None,
            (_, Some(v)) => {
                let gs = g.tape.shape(v);
                if gs.h != h2 || gs.w != w2 {
                    return Err(ModelError::GuideResolution { guide_h: gs.h, guide_w: gs.w, feat_h: zs.h, feat_w: zs.w });
                }
                Some(v)
            }
            (_, None) => return Err(ModelError::Config(format!("{} needs a guidance image", self.name))),
        };

        let h_up = g.tape.resize(z, h2, w2)?;
        let h_t = self.target.forward(g, h_up)?;
        let joint = match (&self.guide_branch, guide) {
            (Some(branch), Some(x)) => {
                let h_g = branch.forward(g, x)?;
                g.tape.concat(h_t, h_g)?
            }
            (None, Some(x)) => g.tape.concat(h_t, x)?,
            (_, None) => h_t,
        };
        let gated = self.se.forward(g, joint)?;
        let h_res = self.residual.forward(g, gated)?;
        let sum = g.tape.add(h_up, h_res)?;
        self.reduce.forward(g, sum)
    }

    /// Multiply-accumulates for one sample with features of size `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (h2, w2) = (2 * h, 2 * w);
        let guide = self.guide_branch.as_ref().map_or(0, |s| s.macs(h2, w2));
        guide + self.target.macs(h2, w2) + self.se.macs() + self.residual.macs(h2, w2) + self.reduce.macs(h2, w2)
    }
}
