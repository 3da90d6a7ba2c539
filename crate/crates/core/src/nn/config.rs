use std::fmt;
use std::str::FromStr;

use super::ModelError;

/// What the decoder sees as its guidance image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GuidanceType {
    Image,
    Laplacian,
    None,
}

/// How the guidance image enters a decoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GuidanceBranch {
    /// Features extracted by a stacked convolution before concatenation.
    Gub,
    /// Raw guidance channels concatenated with the features.
    Direct,
}

/// Which Laplacian-pyramid image is used for `GuidanceType::Laplacian`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LaplacianMode {
    /// `x_k - Up(Down(x))`, the band-pass residual.
    BandPass,
    /// `Up(Down(x))` itself.
    LowPass,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($ty::$variant),)+
                    other => Err(ModelError::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}', expected one of: ", $($text, " "),+),
                        other
                    ))),
                }
            }
        }
    };
}

keyword_enum!(GuidanceType { Image => "image", Laplacian => "laplacian", None => "none" });
keyword_enum!(GuidanceBranch { Gub => "gub", Direct => "direct" });
keyword_enum!(LaplacianMode { BandPass => "bandpass", LowPass => "lowpass" });

/// Architecture hyperparameters.
///
/// `decoder_channels[j]` is the number of feature maps produced by decoder
/// stage `j`; a final 1x1 convolution maps the last stage to depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder_width: usize,
    pub encoder_out_channels: usize,
    pub decoder_channels: [usize; 3],
    pub guidance_type: GuidanceType,
    pub guidance_branch: GuidanceBranch,
    pub laplacian_mode: LaplacianMode,
    pub se_reduction: usize,
    pub output_channels: usize,
}

impl ModelConfig {
    pub fn guidedepth() -> Self {
        ModelConfig {
            encoder_width: 16,
            encoder_out_channels: 64,
            decoder_channels: [64, 32, 16],
            guidance_type: GuidanceType::Image,
            guidance_branch: GuidanceBranch::Gub,
            laplacian_mode: LaplacianMode::BandPass,
            se_reduction: 4,
            output_channels: 1,
        }
    }

    /// Same encoder, half the decoder feature maps.
    pub fn guidedepth_s() -> Self {
        let mut cfg = Self::guidedepth();
        cfg.decoder_channels = cfg.decoder_channels.map(|c| c / 2);
        cfg
    }

    /// Test-scale model.
    pub fn guidedepth_tiny() -> Self {
        ModelConfig {
            encoder_width: 4,
            encoder_out_channels: 8,
            decoder_channels: [8, 4, 2],
            ..Self::guidedepth()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        match name.trim().to_ascii_lowercase().as_str() {
            "guidedepth" => Ok(Self::guidedepth()),
            "guidedepth-s" => Ok(Self::guidedepth_s()),
            "guidedepth-tiny" => Ok(Self::guidedepth_tiny()),
            other => Err(ModelError::Config(format!(
                "unknown model '{other}', expected guidedepth, guidedepth-s or guidedepth-tiny"
            ))),
        }
    }

    pub fn with_guidance(mut self, kind: GuidanceType, branch: GuidanceBranch) -> Self {
        self.guidance_type = kind;
        self.guidance_branch = branch;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::Config(msg.to_string()));
        if self.encoder_width == 0 || self.encoder_out_channels == 0 {
            return bad("encoder widths must be positive");
        }
        if self.decoder_channels.contains(&0) {
            return bad("decoder channels must be positive");
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be at least 1");
        }
        if self.output_channels != 1 {
            return bad("output_channels must be 1");
        }
        Ok(())
    }

    /// Label used in ablation tables: `Image/GUB`, `None/None`, ...
    pub fn variant_label(&self) -> (String, String) {
        let kind = match self.guidance_type {
            GuidanceType::Image => "Image",
            GuidanceType::Laplacian => "Laplacian",
            GuidanceType::None => return ("None".into(), "None".into()),
        };
        let branch = match self.guidance_branch {
            GuidanceBranch::Gub => "GUB",
            GuidanceBranch::Direct => "Direct",
        };
        (kind.into(), branch.into())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let d = self.decoder_channels;
        vec![
            ("encoder_width", self.encoder_width.to_string()),
            ("encoder_out_channels", self.encoder_out_channels.to_string()),
            ("decoder_channels", format!("{},{},{}", d[0], d[1], d[2])),
            ("guidance_type", self.guidance_type.to_string()),
            ("guidance_branch", self.guidance_branch.to_string()),
            ("laplacian_mode", self.laplacian_mode.to_string()),
            ("se_reduction", self.se_reduction.to_string()),
            ("output_channels", self.output_channels.to_string()),
        ]
    }

    /// Apply one `key = value` setting. Returns `false` for keys that are not
    /// model settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ModelError> {
        let int = |v: &str| {
            v.trim().parse::<usize>().map_err(|_| ModelError::Config(format!("{key}: '{v}' is not a non-negative integer")))
        };
        match key {
            "encoder_width" => self.encoder_width = int(value)?,
            "encoder_out_channels" => self.encoder_out_channels = int(value)?,
            "decoder_channels" => {
                let parts: Vec<usize> = value.split(',').map(int).collect::<Result<_, _>>()?;
                self.decoder_channels = parts
                    .try_into()
                    .map_err(|_| ModelError::Config(format!("decoder_channels needs three values, got '{value}'")))?;
            }
            "guidance_type" => self.guidance_type = value.parse()?,
            "guidance_branch" => self.guidance_branch = value.parse()?,
            "laplacian_mode" => self.laplacian_mode = value.parse()?,
            "se_reduction" => self.se_reduction = int(value)?,
            "output_channels" => self.output_channels = int(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::guidedepth()
    }
}

/// The five guidance variants compared in the ablation grid, in table order.
pub fn ablation_variants(base: &ModelConfig) -> Vec<ModelConfig> {
    use GuidanceBranch::*;
    use GuidanceType::*;
    [(Image, Gub), (Image, Direct), (Laplacian, Gub), (Laplacian, Direct), (None, Gub)]
        .into_iter()
        .map(|(k, b)| base.clone().with_guidance(k, b))
        .collect()
}
