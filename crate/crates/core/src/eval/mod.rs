//! Evaluation protocol: inverse depth norm, crops, flip averaging, metrics.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::DepthSample;
use crate::nn::{Model, ModelError};
use crate::tensor::kernels::bilinear_forward;
use crate::tensor::{Tensor, TensorError};

mod metrics;

pub use metrics::{compute_metrics, MetricAccumulator, Metrics};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid depth: {0}")]
    InvalidDepth(String),
    #[error("no valid pixels under the evaluation mask")]
    EmptyMask,
    #[error("crop {crop} does not fit a {h}x{w} image")]
    Crop { crop: Crop, h: usize, w: usize },
    #[error("resolution mismatch: {0}")]
    Resolution(String),
    #[error("evaluation needs at least one sample")]
    EmptyDataset,
    #[error("cannot parse report: {0}")]
    Parse(String),
}

/// Smallest metric depth accepted before inversion.
pub const DEPTH_EPS: f32 = 1e-3;

/// `d_max / max(y, eps)`. Zero, negative and non-finite depths are errors.
///
/// The map is its own inverse, so the same function takes normalised values
/// back to metres.
pub fn inverse_depth_transform(y: &Tensor<f32>, d_max: f32) -> Result<Tensor<f32>, EvalError> {
    if let Some((i, v)) = y.data().iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(EvalError::InvalidDepth(format!("value {v} at index {i} is not a positive finite depth")));
    }
    Ok(y.map(|v| d_max / v.max(DEPTH_EPS)))
}

/// Largest normalised value a prediction may take, i.e. the nearest
/// representable depth is `d_max / NORM_MAX`.
pub const NORM_MAX: f32 = 100.0;

/// Network output (normalised space) to metres. The output is clamped to
/// `[1, NORM_MAX]` first, so any prediction maps into `[d_max / 100, d_max]`.
pub fn prediction_to_depth(pred: &Tensor<f32>, d_max: f32) -> Tensor<f32> {
    pred.map(|v| d_max / if v.is_nan() { 1.0 } else { v.clamp(1.0, NORM_MAX) })
}

/// Half-open pixel rectangle `[top, bottom) x [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl fmt::Display for Crop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rows [{}, {}) cols [{}, {})", self.top, self.bottom, self.left, self.right)
    }
}

impl Crop {
    pub fn full(h: usize, w: usize) -> Self {
        Crop { top: 0, bottom: h, left: 0, right: w }
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.top < self.bottom && self.bottom <= h && self.left < self.right && self.right <= w
    }

    /// Row-major mask of an `h x w` image, true inside the crop.
    pub fn mask(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|i| (self.top..self.bottom).contains(&(i / w)) && (self.left..self.right).contains(&(i % w))).collect()
    }
}

pub const NYU_HEIGHT: usize = 480;
pub const NYU_WIDTH: usize = 640;

/// Rows 20..460, columns 24..616 of a 480x640 depth map.
pub fn nyu_crop() -> Crop {
    Crop { top: 20, bottom: 460, left: 24, right: 616 }
}

/// Rows `[0.332 H, 0.914 H)`, columns `[0.036 W, 0.964 W)`, each bound floored.
pub fn kitti_crop(h: usize, w: usize) -> Crop {
    // Integer arithmetic keeps the floor exact.
    let f = |num: usize, n: usize| num * n / 1000;
    Crop { top: f(332, h), bottom: f(914, h), left: f(36, w), right: f(964, w) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropKind {
    Nyu,
    Kitti,
    Full,
}

impl CropKind {
    pub fn resolve(self, h: usize, w: usize) -> Result<Crop, EvalError> {
        let crop = match self {
            CropKind::Nyu => nyu_crop(),
            CropKind::Kitti => kitti_crop(h, w),
            CropKind::Full => Crop::full(h, w),
        };
        let nyu_mismatch = self == CropKind::Nyu && (h, w) != (NYU_HEIGHT, NYU_WIDTH);
        if nyu_mismatch || !crop.fits(h, w) {
            return Err(EvalError::Crop { crop, h, w });
        }
        Ok(crop)
    }
}

impl fmt::Display for CropKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CropKind::Nyu => "nyu",
            CropKind::Kitti => "kitti",
            CropKind::Full => "full",
        })
    }
}

impl FromStr for CropKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nyu" => Ok(CropKind::Nyu),
            "kitti" => Ok(CropKind::Kitti),
            "full" | "none" => Ok(CropKind::Full),
            other => Err(EvalError::Parse(format!("unknown crop '{other}', expected nyu, kitti or full"))),
        }
    }
}

/// Axis of the test-time flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Left-right mirror.
    Mirror,
    /// Upside down.
    Vertical,
}

impl FlipAxis {
    pub fn apply(self, t: &Tensor<f32>) -> Tensor<f32> {
        match self {
            FlipAxis::Mirror => t.flip_horizontal(),
            FlipAxis::Vertical => t.flip_vertical(),
        }
    }
}

pub fn flip_name(flip: Option<FlipAxis>) -> &'static str {
    match flip {
        None => "none",
        Some(FlipAxis::Mirror) => "mirror",
        Some(FlipAxis::Vertical) => "vertical",
    }
}

pub fn parse_flip(s: &str) -> Result<Option<FlipAxis>, EvalError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "none" | "false" | "off" => Ok(None),
        "mirror" | "horizontal" | "true" | "on" => Ok(Some(FlipAxis::Mirror)),
        "vertical" => Ok(Some(FlipAxis::Vertical)),
        other => Err(EvalError::Parse(format!("unknown flip '{other}', expected none, mirror or vertical"))),
    }
}

/// What a predictor is asked to process.
#[derive(Debug, Clone, Copy)]
pub struct PredictInput<'a> {
    /// `(1, 3, h, w)` image at model resolution, already flipped if `flip` is set.
    pub image: &'a Tensor<f32>,
    /// Position of the sample in the dataset.
    pub index: usize,
    pub flip: Option<FlipAxis>,
}

/// Anything that maps an image to a normalised (inverse-depth) map of the
/// same spatial size.
pub trait DepthPredictor {
    fn predict(&mut self, input: &PredictInput<'_>) -> Result<Tensor<f32>, EvalError>;
}

impl DepthPredictor for Model<f32> {
    fn predict(&mut self, input: &PredictInput<'_>) -> Result<Tensor<f32>, EvalError> {
        Ok(Model::predict(self, input.image)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Model input resolution.
    pub height: usize,
    pub width: usize,
    pub d_max: f32,
    pub crop: CropKind,
    pub flip: Option<FlipAxis>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub rel: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_images: usize,
    pub flip: Option<FlipAxis>,
    pub crop: CropKind,
}

pub const CSV_HEADER: &str = "rmse,rel,log10,d1,d2,d3,n,flip,crop";

impl EvalReport {
    pub fn from_metrics(m: Metrics, n_images: usize, flip: Option<FlipAxis>, crop: CropKind) -> Self {
        EvalReport {
            rmse: m.rmse,
            rel: m.rel,
            log10: m.log10,
            delta1: m.delta1,
            delta2: m.delta2,
            delta3: m.delta3,
            n_images,
            flip,
            crop,
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics::from_array([self.rmse, self.rel, self.log10, self.delta1, self.delta2, self.delta3])
    }

    pub fn flip_averaged(&self) -> bool {
        self.flip.is_some()
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "rmse = {}\nrel = {}\nlog10 = {}\ndelta1 = {}\ndelta2 = {}\ndelta3 = {}\nn_images = {}\nflip = {}\ncrop = {}\n",
            self.rmse,
            self.rel,
            self.log10,
            self.delta1,
            self.delta2,
            self.delta3,
            self.n_images,
            flip_name(self.flip),
            self.crop
        )
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.rmse,
            self.rel,
            self.log10,
            self.delta1,
            self.delta2,
            self.delta3,
            self.n_images,
            flip_name(self.flip),
            self.crop
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self, EvalError> {
        let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if fields.len() != 9 {
            return Err(EvalError::Parse(format!("expected 9 fields ({CSV_HEADER}), got {}", fields.len())));
        }
        let num = |i: usize| fields[i].parse::<f64>().map_err(|_| EvalError::Parse(format!("field {i}: '{}'", fields[i])));
        Ok(EvalReport {
            rmse: num(0)?,
            rel: num(1)?,
            log10: num(2)?,
            delta1: num(3)?,
            delta2: num(4)?,
            delta3: num(5)?,
            n_images: fields[6].parse().map_err(|_| EvalError::Parse(format!("n: '{}'", fields[6])))?,
            flip: parse_flip(fields[7])?,
            crop: fields[8].parse()?,
        })
    }
}

fn resize(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    if (s.h, s.w) == (h, w) {
        t.clone()
    } else {
        bilinear_forward(t, h, w)
    }
}

/// Metrics of one sample for one pass (plain or flipped).
fn evaluate_pass(
    predictor: &mut dyn DepthPredictor,
    sample: &DepthSample,
    index: usize,
    opts: &EvalOptions,
    mask: &[bool],
    flip: Option<FlipAxis>,
) -> Result<Metrics, EvalError> {
    let (gh, gw) = (sample.height(), sample.width());
    let image = flip.map_or_else(|| sample.image.clone(), |f| f.apply(&sample.image));
    let input = resize(&image, opts.height, opts.width);
    let pred = predictor.predict(&PredictInput { image: &input, index, flip })?;
    let ps = pred.shape();
    if (ps.n, ps.c, ps.h, ps.w) != (1, 1, opts.height, opts.width) {
        return Err(EvalError::Resolution(format!(
            "predictor returned {ps} for a {}x{} input",
            opts.height, opts.width
        )));
    }
    let metric = resize(&prediction_to_depth(&pred, opts.d_max), gh, gw);
    let metric = flip.map_or(metric.clone(), |f| f.apply(&metric));
    compute_metrics(&sample.depth, &metric, Some(mask))
}

/// Per image: resize the input to the model resolution, predict, convert to
/// metres, upsample to the ground-truth resolution, crop, and score. With a
/// flip axis the flipped image is scored too (its prediction flipped back)
/// and the two results are averaged. The report is the mean over images.
pub fn evaluate(predictor: &mut dyn DepthPredictor, samples: &[DepthSample], opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut acc = MetricAccumulator::default();
    for (index, sample) in samples.iter().enumerate() {
        let (gh, gw) = (sample.height(), sample.width());
        if sample.depth.shape().n != 1 {
            return Err(EvalError::Resolution(format!("sample {index} holds a batch of {}", sample.depth.shape().n)));
        }
        let crop = opts.crop.resolve(gh, gw)?;
        let mut mask = crop.mask(gh, gw);
        for (m, &d) in mask.iter_mut().zip(sample.depth.data()) {
            *m &= d > 0.0 && d.is_finite();
        }
        let plain = evaluate_pass(predictor, sample, index, opts, &mask, None)?;
        match opts.flip {
            None => acc.push(&plain),
            Some(axis) => {
                let flipped = evaluate_pass(predictor, sample, index, opts, &mask, Some(axis))?;
                let mean = Metrics::from_array(std::array::from_fn(|i| 0.5 * (plain.as_array()[i] + flipped.as_array()[i])));
                acc.push(&mean);
            }
        }
    }
    let mean = acc.mean().ok_or(EvalError::EmptyDataset)?;
    Ok(EvalReport::from_metrics(mean, acc.count, opts.flip, opts.crop))
}

/// Predicts the ground truth resized to model resolution: the error that
/// remains is what the protocol's resampling costs.
#[derive(Debug, Clone)]
pub struct OraclePredictor<'a> {
    pub samples: &'a [DepthSample],
    pub d_max: f32,
}

impl DepthPredictor for OraclePredictor<'_> {
    fn predict(&mut self, input: &PredictInput<'_>) -> Result<Tensor<f32>, EvalError> {
        let s = input.image.shape();
        let gt = &self.samples[input.index].depth;
        let gt = input.flip.map_or_else(|| gt.clone(), |f| f.apply(gt));
        inverse_depth_transform(&resize(&gt, s.h, s.w), self.d_max)
    }
}

/// Predicts one normalised constant everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f32);

impl DepthPredictor for ConstantPredictor {
    fn predict(&mut self, input: &PredictInput<'_>) -> Result<Tensor<f32>, EvalError> {
        let s = input.image.shape();
        Ok(Tensor::full([s.n, 1, s.h, s.w], self.0))
    }
}
