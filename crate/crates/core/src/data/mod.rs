//! Synthetic RGB-D data, sample files and augmentation.
//!
//! A dataset directory holds numbered sample directories (`0000`, `0001`, ...),
//! each with `image.gdt`, `depth.gdt` and a `meta` file of `key = value`
//! lines (`d_max`, `seed`). Depth is stored in metres.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::io::{read_tensor, read_tensor_shaped, write_tensor, FormatError};
use crate::tensor::{Shape, Tensor, TensorError};

pub mod augment;
pub mod scene;

pub use augment::{apply_augment, augment, AugmentRecord};
pub use scene::{generate_dataset, generate_scene, SceneSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {msg}")]
    Meta { path: PathBuf, msg: String },
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("invalid sample: {0}")]
    Sample(String),
    #[error("dataset {0} contains no samples")]
    Empty(PathBuf),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// An RGB image in `[0, 1]` with metric depth in `(0, d_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSample {
    pub image: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub d_max: f32,
}

impl DepthSample {
    pub fn validate(&self) -> Result<(), DataError> {
        let (i, d) = (self.image.shape(), self.depth.shape());
        if i.c != 3 || d.c != 1 || i.n != d.n || i.h != d.h || i.w != d.w {
            return Err(DataError::Sample(format!("image {i} and depth {d} do not pair")));
        }
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return Err(DataError::Sample(format!("d_max {} must be positive", self.d_max)));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.depth.shape().h
    }

    pub fn width(&self) -> usize {
        self.depth.shape().w
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn fmt_err(path: &Path) -> impl FnOnce(FormatError) -> DataError + '_ {
    move |source| DataError::Format { path: path.to_path_buf(), source }
}

pub fn write_sample(dir: impl AsRef<Path>, sample: &DepthSample, seed: u64) -> Result<(), DataError> {
    let dir = dir.as_ref();
    sample.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let image = dir.join("image.gdt");
    write_tensor(&image, &sample.image).map_err(fmt_err(&image))?;
    let depth = dir.join("depth.gdt");
    write_tensor(&depth, &sample.depth).map_err(fmt_err(&depth))?;
    let meta = dir.join("meta");
    fs::write(&meta, format!("d_max = {}\nseed = {seed}\n", sample.d_max)).map_err(io_err(&meta))
}

/// Read one sample. Nothing is returned unless every file parses.
pub fn read_sample(dir: impl AsRef<Path>) -> Result<DepthSample, DataError> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta");
    let meta = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let mut d_max = None;
    for line in meta.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let bad = |msg: String| DataError::Meta { path: meta_path.clone(), msg };
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("expected 'key = value', got '{line}'")))?;
        match k.trim() {
            "d_max" => d_max = Some(v.trim().parse::<f32>().map_err(|_| bad(format!("bad d_max '{}'", v.trim())))?),
            "seed" => {}
            other => return Err(bad(format!("unknown key '{other}'"))),
        }
    }
    let d_max = d_max.ok_or_else(|| DataError::Meta { path: meta_path.clone(), msg: "missing d_max".into() })?;

    let image_path = dir.join("image.gdt");
    let image = read_tensor(&image_path).map_err(fmt_err(&image_path))?;
    let s = image.shape();
    if s.c != 3 {
        return Err(DataError::Sample(format!("{}: expected 3 channels, found {}", image_path.display(), s.c)));
    }
    let depth_path = dir.join("depth.gdt");
    let depth = read_tensor_shaped(&depth_path, Shape::new(s.n, 1, s.h, s.w)).map_err(fmt_err(&depth_path))?;
    let sample = DepthSample { image, depth, d_max };
    sample.validate()?;
    Ok(sample)
}

pub fn write_dataset(dir: impl AsRef<Path>, samples: &[DepthSample], seeds: &[u64]) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, s) in samples.iter().enumerate() {
        write_sample(dir.join(format!("{i:04}")), s, seeds.get(i).copied().unwrap_or(i as u64))?;
    }
    Ok(())
}

/// Read every numbered sample directory in numeric order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<DepthSample>, DataError> {
    let dir = dir.as_ref();
    let mut entries: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if let Some(idx) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<u64>().ok()) {
            if path.is_dir() {
                entries.push((idx, path));
            }
        }
    }
    if entries.is_empty() {
        return Err(DataError::Empty(dir.to_path_buf()));
    }
    entries.sort();
    entries.iter().map(|(_, p)| read_sample(p)).collect()
}

/// Visiting order for one epoch: a permutation seeded by `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Stack samples into `(B, 3, H, W)` images and `(B, 1, H, W)` depths.
pub fn stack(samples: &[DepthSample]) -> Result<(Tensor<f32>, Tensor<f32>), DataError> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let depths: Vec<_> = samples.iter().map(|s| s.depth.clone()).collect();
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&depths)?))
}
