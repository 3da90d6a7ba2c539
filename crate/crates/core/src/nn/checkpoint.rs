//! Checkpoint directories: one `GDT1` file per tensor plus `manifest.txt`.
//!
//! Manifest lines are `key = value`:
//!
//! ```text
//! config.decoder_channels = 8,4,2
//! param.encoder.stage0.conv3.weight = p0000.gdt
//! stat.encoder.stage0.bn3.mean = s0000.mean.gdt
//! stat.encoder.stage0.bn3.var = s0000.var.gdt
//! stat.encoder.stage0.bn3.initialized = true
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::config::ModelConfig;
use super::model::{Architecture, Model};
use super::params::{ParamSet, StatsSet};
use super::ModelError;
use crate::tensor::io::{read_tensor_shaped, write_tensor};
use crate::tensor::{RunningStats, Shape, Tensor};

pub const MANIFEST: &str = "manifest.txt";

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &Model<f32>) -> Result<(), ModelError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| ModelError::io(format!("creating {}", dir.display()), e))?;
    let mut manifest = String::new();
    for (k, v) in model.config().to_pairs() {
        manifest.push_str(&format!("config.{k} = {v}\n"));
    }
    for (i, (name, t)) in model.params.iter().enumerate() {
        let file = format!("p{i:04}.gdt");
        write_tensor(dir.join(&file), t)?;
        manifest.push_str(&format!("param.{name} = {file}\n"));
    }
    for (i, (name, s)) in model.stats.iter().enumerate() {
        for (part, values) in [("mean", &s.mean), ("var", &s.var)] {
            let file = format!("s{i:04}.{part}.gdt");
            write_tensor(dir.join(&file), &Tensor::from_vec(Shape::vector(values.len()), values.clone())?)?;
            manifest.push_str(&format!("stat.{name}.{part} = {file}\n"));
        }
        manifest.push_str(&format!("stat.{name}.initialized = {}\n", s.initialized));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| ModelError::io(format!("writing {}", path.display()), e))
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>, ModelError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelError::Checkpoint(format!("manifest line {}: expected 'key = value'", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(ModelError::Checkpoint(format!("manifest line {}: duplicate key '{}'", n + 1, k.trim())));
        }
    }
    Ok(out)
}

/// Load and validate a checkpoint against the architecture its manifest declares.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model<f32>, ModelError> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| ModelError::io(format!("reading {}", path.display()), e))?;
    let mut entries = parse_manifest(&text)?;

    let mut config = ModelConfig::default();
    let keys: Vec<String> = entries.keys().filter(|k| k.starts_with("config.")).cloned().collect();
    for key in keys {
        let value = entries.remove(&key).unwrap_or_default();
        let field = &key["config.".len()..];
        if !config.set(field, &value)? {
            return Err(ModelError::Checkpoint(format!("unknown config key '{field}'")));
        }
    }
    let layout = Architecture::new(&config)?.layout();

    let mut take = |key: String| entries.remove(&key).ok_or_else(|| ModelError::Checkpoint(format!("manifest lacks '{key}'")));
    let mut params = ParamSet::default();
    for spec in &layout.params {
        let file = take(format!("param.{}", spec.name))?;
        params.insert(spec.name.clone(), read_tensor_shaped(dir.join(file), spec.shape)?);
    }
    let mut stats: StatsSet<f32> = IndexMap::new();
    for (name, c) in &layout.stats {
        let mean = read_tensor_shaped(dir.join(take(format!("stat.{name}.mean"))?), Shape::vector(*c))?;
        let var = read_tensor_shaped(dir.join(take(format!("stat.{name}.var"))?), Shape::vector(*c))?;
        let initialized = match take(format!("stat.{name}.initialized"))?.as_str() {
            "true" => true,
            "false" => false,
            other => return Err(ModelError::Checkpoint(format!("stat.{name}.initialized: '{other}' is not a boolean"))),
        };
        stats.insert(name.clone(), RunningStats { mean: mean.into_vec(), var: var.into_vec(), initialized });
    }
    if let Some(extra) = entries.keys().next() {
        return Err(ModelError::Checkpoint(format!("unexpected manifest entry '{extra}'")));
    }
    Model::from_parts(&config, params, stats)
}
