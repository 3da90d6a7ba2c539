//! `key = value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use thiserror::Error;

use crate::data::SceneSpec;
use crate::eval::{flip_name, parse_flip, CropKind, EvalOptions, FlipAxis};
use crate::losses::LossConfig;
use crate::nn::{Architecture, ModelConfig};
use crate::train::{AdamConfig, Schedule, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    Syntax { path: PathBuf, line: usize, msg: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("{key}: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid override: {0}")]
    Override(String),
}

fn value_err(key: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Value { key: key.to_string(), msg: msg.to_string() }
}

/// Parse `key = value` lines. `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |msg: String| ConfigError::Syntax { path: origin.to_path_buf(), line: i + 1, msg };
        let (k, v) = line.split_once('=').ok_or_else(|| syntax(format!("expected 'key = value', got '{line}'")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(syntax("empty key".into()));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Settings given on the command line: an optional config file and ordered overrides.
pub type Overrides = (Option<PathBuf>, Vec<(String, String)>);

/// Split `--key value` / `--key=value` tokens. `--config <file>` is returned
/// separately; dashes inside keys become underscores.
pub fn parse_overrides(args: &[String]) -> Result<Overrides, ConfigError> {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(tok) = it.next() {
        let body = tok
            .strip_prefix("--")
            .ok_or_else(|| ConfigError::Override(format!("expected --key, got '{tok}'")))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| ConfigError::Override(format!("--{body} needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        if key.is_empty() {
            return Err(ConfigError::Override(format!("empty key in '{tok}'")));
        }
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            pairs.push((key, value));
        }
    }
    Ok((config, pairs))
}

/// Everything a subcommand may need, validated up front.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Preset name the model settings started from.
    pub model_name: String,
    pub model: ModelConfig,
    /// Model input resolution `(height, width)`.
    pub resolution: (usize, usize),
    pub seed: u64,
    /// Training data directory; synthetic scenes are generated when absent.
    pub dataset: Option<PathBuf>,
    /// Evaluation data directory; defaults to the training data.
    pub eval_dataset: Option<PathBuf>,
    pub synth: SceneSpec,
    pub synth_count: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
    pub augment: bool,
    pub checkpoint_every: usize,
    pub loss: LossConfig,
    pub crop: CropKind,
    pub flip: Option<FlipAxis>,
    pub run_dir: PathBuf,
    /// Checkpoint to load for eval, predict and bench.
    pub checkpoint: Option<PathBuf>,
    /// Image tensor file for predict.
    pub input: Option<PathBuf>,
    pub preview: bool,
    /// Evaluate the resized ground truth instead of a model.
    pub oracle: bool,
    pub bench_runs: usize,
    pub bench_warmup: usize,
    pub ablate_steps: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SceneSpec::default();
        let loss = LossConfig::with_range(f64::from(synth.d_max));
        RunConfig {
            model_name: "guidedepth".into(),
            model: ModelConfig::guidedepth(),
            resolution: (synth.height, synth.width),
            seed: 0,
            dataset: None,
            eval_dataset: None,
            synth,
            synth_count: 16,
            schedule: Schedule::default(),
            adam: AdamConfig::default(),
            batch_size: 8,
            max_steps: None,
            augment: true,
            checkpoint_every: 5,
            loss,
            crop: CropKind::Full,
            flip: Some(FlipAxis::Mirror),
            run_dir: PathBuf::from("run"),
            checkpoint: None,
            input: None,
            preview: true,
            oracle: false,
            bench_runs: 200,
            bench_warmup: 20,
            ablate_steps: 1,
            log_every: 10,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse::<T>().map_err(|_| value_err(key, format!("cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(value_err(key, format!("expected true or false, got '{v}'"))),
    }
}

/// `HxW`, e.g. `240x320`.
pub fn parse_resolution(v: &str) -> Option<(usize, usize)> {
    let (h, w) = v.trim().split_once(['x', 'X'])?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>, ConfigError> {
    if v.eq_ignore_ascii_case("none") || v.is_empty() {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

impl RunConfig {
    /// Build from ordered settings; later keys win. `model` selects the
    /// preset before any other model setting is applied.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut merged: IndexMap<&str, &str> = IndexMap::new();
        for (k, v) in pairs {
            merged.insert(k.as_str(), v.as_str());
        }
        let mut cfg = RunConfig::default();
        if let Some(name) = merged.shift_remove("model") {
            cfg.model = ModelConfig::preset(name).map_err(|e| value_err("model", e))?;
            cfg.model_name = name.trim().to_ascii_lowercase();
        }
        let mut synth_size = None;
        for (key, value) in merged {
            cfg.set(key, value, &mut synth_size)?;
        }
        let (h, w) = synth_size.unwrap_or(cfg.resolution);
        cfg.synth.height = h;
        cfg.synth.width = w;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config file (if any) overlaid with command-line settings.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut pairs = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
                parse_pairs(&text, path)?
            }
            None => Vec::new(),
        };
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    fn set(&mut self, key: &str, v: &str, synth_size: &mut Option<(usize, usize)>) -> Result<(), ConfigError> {
        if self.model.set(key, v).map_err(|e| value_err(key, e))? {
            return Ok(());
        }
        if key != "dynamic_range" && self.loss.set(key, v).map_err(|e| value_err(key, e))? {
            return Ok(());
        }
        let res = |v: &str| parse_resolution(v).ok_or_else(|| value_err(key, format!("expected HxW, got '{v}'")));
        match key {
            "resolution" => self.resolution = res(v)?,
            "seed" => self.seed = parse(key, v)?,
            "dataset" => self.dataset = optional(key, v)?,
            "eval_dataset" => self.eval_dataset = optional(key, v)?,
            "synth_count" => self.synth_count = parse(key, v)?,
            "synth_resolution" => *synth_size = Some(res(v)?),
            "synth_seed" => self.synth.seed = parse(key, v)?,
            "synth_primitives" => self.synth.primitives = parse(key, v)?,
            "d_min" => self.synth.d_min = parse(key, v)?,
            "d_max" => {
                self.synth.d_max = parse(key, v)?;
                self.loss.dynamic_range = f64::from(self.synth.d_max);
            }
            "dynamic_range" => return Err(value_err(key, "follows d_max; set d_max instead")),
            "fov_deg" => self.synth.fov_deg = parse(key, v)?,
            "lr" => self.schedule.base_lr = parse(key, v)?,
            "epochs" => self.schedule.total_epochs = parse(key, v)?,
            "drop_epoch" => self.schedule.drop_epoch = parse(key, v)?,
            "drop_factor" => self.schedule.drop_factor = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_steps" => self.max_steps = optional(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "crop" => self.crop = v.parse().map_err(|e| value_err(key, e))?,
            "flip" => self.flip = parse_flip(v).map_err(|e| value_err(key, e))?,
            "run_dir" => self.run_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = optional(key, v)?,
            "input" => self.input = optional(key, v)?,
            "preview" => self.preview = parse_bool(key, v)?,
            "oracle" => self.oracle = parse_bool(key, v)?,
            "bench_runs" => self.bench_runs = parse(key, v)?,
            "bench_warmup" => self.bench_warmup = parse(key, v)?,
            "ablate_steps" => self.ablate_steps = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| value_err("model", e))?;
        let (h, w) = self.resolution;
        Architecture::check_dims(h, w).map_err(|e| value_err("resolution", e))?;
        self.synth.validate().map_err(|e| value_err("synth", e))?;
        self.schedule.validate().map_err(|e| value_err("schedule", e))?;
        self.loss.validate().map_err(|e| value_err("loss", e))?;
        let adam = self.adam;
        if !(0.0..1.0).contains(&adam.beta1) || !(0.0..1.0).contains(&adam.beta2) || !(adam.eps > 0.0) {
            return Err(value_err("adam", "need 0 <= beta < 1 and eps > 0"));
        }
        for (key, n) in [("batch_size", self.batch_size), ("synth_count", self.synth_count), ("bench_runs", self.bench_runs)] {
            if n == 0 {
                return Err(value_err(key, "must be at least 1"));
            }
        }
        if self.max_steps == Some(0) {
            return Err(value_err("max_steps", "must be at least 1 (or none)"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule,
            adam: self.adam,
            batch_size: self.batch_size,
            seed: self.seed,
            max_steps: self.max_steps,
            resolution: Some(self.resolution),
            augment: self.augment,
            checkpoint_dir: Some(self.run_dir.join("checkpoints")),
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            height: self.resolution.0,
            width: self.resolution.1,
            d_max: self.synth.d_max,
            crop: self.crop,
            flip: self.flip,
        }
    }

    /// Every setting as `key = value` lines; parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("model", self.model_name.clone());
        for (k, v) in self.model.to_pairs() {
            line(k, v);
        }
        line("resolution", format!("{}x{}", self.resolution.0, self.resolution.1));
        line("seed", self.seed.to_string());
        line("dataset", opt(&self.dataset));
        line("eval_dataset", opt(&self.eval_dataset));
        line("synth_count", self.synth_count.to_string());
        line("synth_resolution", format!("{}x{}", self.synth.height, self.synth.width));
        line("synth_seed", self.synth.seed.to_string());
        line("synth_primitives", self.synth.primitives.to_string());
        line("d_min", self.synth.d_min.to_string());
        line("d_max", self.synth.d_max.to_string());
        line("fov_deg", self.synth.fov_deg.to_string());
        line("lr", self.schedule.base_lr.to_string());
        line("epochs", self.schedule.total_epochs.to_string());
        line("drop_epoch", self.schedule.drop_epoch.to_string());
        line("drop_factor", self.schedule.drop_factor.to_string());
        line("beta1", self.adam.beta1.to_string());
        line("beta2", self.adam.beta2.to_string());
        line("adam_eps", self.adam.eps.to_string());
        line("batch_size", self.batch_size.to_string());
        line("max_steps", self.max_steps.map_or("none".into(), |s| s.to_string()));
        line("augment", self.augment.to_string());
        line("checkpoint_every", self.checkpoint_every.to_string());
        for (k, v) in self.loss.to_pairs() {
            if k != "dynamic_range" {
                line(k, v);
            }
        }
        line("crop", self.crop.to_string());
        line("flip", flip_name(self.flip).into());
        line("run_dir", self.run_dir.display().to_string());
        line("checkpoint", opt(&self.checkpoint));
        line("input", opt(&self.input));
        line("preview", self.preview.to_string());
        line("oracle", self.oracle.to_string());
        line("bench_runs", self.bench_runs.to_string());
        line("bench_warmup", self.bench_warmup.to_string());
        line("ablate_steps", self.ablate_steps.to_string());
        line("log_every", self.log_every.to_string());
        out
    }
}
