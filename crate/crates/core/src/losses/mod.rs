//! Training objective: structural dissimilarity + depth-gradient + L1.
//!
//! All loss functions take `(y, yhat)`: target first, prediction second.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{Backward, Scalar, Shape, Tape, Tensor, TensorError, Var};

mod ssim;

pub use ssim::{ssim, ssim_map, ssim_value};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid loss config: {0}")]
    Config(String),
}

/// Norm applied to the depth-gradient differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradNorm {
    L1,
    L2,
}

impl fmt::Display for GradNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradNorm::L1 => "l1",
            GradNorm::L2 => "l2",
        })
    }
}

impl FromStr for GradNorm {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(GradNorm::L1),
            "l2" => Ok(GradNorm::L2),
            other => Err(LossError::Config(format!("unknown grad_norm '{other}', expected l1 or l2"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_l1: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    /// Explicit SSIM stabilisers; default to `(0.01 L)^2` and `(0.03 L)^2`.
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    /// `L` in the SSIM stabilisers.
    pub dynamic_range: f64,
    pub grad_norm: GradNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::with_range(10.0)
    }
}

impl LossConfig {
    pub fn with_range(dynamic_range: f64) -> Self {
        LossConfig {
            lambda_l1: 0.1,
            ssim_window: 11,
            ssim_sigma: 1.5,
            c1: None,
            c2: None,
            dynamic_range,
            grad_norm: GradNorm::L1,
        }
    }

    pub fn c1(&self) -> f64 {
        self.c1.unwrap_or((0.01 * self.dynamic_range).powi(2))
    }

    pub fn c2(&self) -> f64 {
        self.c2.unwrap_or((0.03 * self.dynamic_range).powi(2))
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: String| Err(LossError::Config(m));
        if !(self.lambda_l1 > 0.0 && self.lambda_l1.is_finite()) {
            return bad(format!("lambda_l1 must be positive, got {}", self.lambda_l1));
        }
        if self.ssim_window.is_multiple_of(2) {
            return bad(format!("ssim_window must be odd, got {}", self.ssim_window));
        }
        if !(self.ssim_sigma > 0.0) {
            return bad(format!("ssim_sigma must be positive, got {}", self.ssim_sigma));
        }
        if !(self.dynamic_range > 0.0 && self.dynamic_range.is_finite()) {
            return bad(format!("dynamic_range must be positive, got {}", self.dynamic_range));
        }
        if !(self.c1() > 0.0 && self.c2() > 0.0) {
            return bad("c1 and c2 must be positive".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("lambda_l1", self.lambda_l1.to_string()),
            ("ssim_window", self.ssim_window.to_string()),
            ("ssim_sigma", self.ssim_sigma.to_string()),
            ("dynamic_range", self.dynamic_range.to_string()),
            ("grad_norm", self.grad_norm.to_string()),
        ];
        if let Some(c) = self.c1 {
            out.push(("c1", c.to_string()));
        }
        if let Some(c) = self.c2 {
            out.push(("c2", c.to_string()));
        }
        out
    }

    /// Apply one `key = value` setting; `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, LossError> {
        let float = |v: &str| v.trim().parse::<f64>().map_err(|_| LossError::Config(format!("{key}: '{v}' is not a number")));
        match key {
            "lambda_l1" => self.lambda_l1 = float(value)?,
            "ssim_window" => {
                self.ssim_window = value.trim().parse().map_err(|_| LossError::Config(format!("ssim_window: '{value}'")))?
            }
            "ssim_sigma" => self.ssim_sigma = float(value)?,
            "c1" => self.c1 = Some(float(value)?),
            "c2" => self.c2 = Some(float(value)?),
            "dynamic_range" => self.dynamic_range = float(value)?,
            "grad_norm" => self.grad_norm = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn check_pair(a: Shape, b: Shape) -> Result<(), LossError> {
    if a != b {
        return Err(TensorError::ShapeMismatch { expected: a, actual: b }.into());
    }
    Ok(())
}

/// `(1 - SSIM) / 2`.
pub fn dssim_loss<T: Scalar>(tape: &mut Tape<T>, y: Var, yhat: Var, cfg: &LossConfig) -> Result<Var, LossError> {
    ssim::ssim_affine(tape, y, yhat, cfg, 0.5, -0.5, "dssim")
}

/// Gradient of `mean(f(yhat - y))` pushed to both inputs.
struct PointwiseRule<T> {
    /// `f'(yhat - y) / P`, precomputed.
    dfdx: Tensor<T>,
}

impl<T: Scalar> Backward<T> for PointwiseRule<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = grad.item();
        let gyhat = self.dfdx.map(|d| d * g);
        let gy = gyhat.map(|d| -d);
        vec![Some(gy), Some(gyhat)]
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, y: Var, yhat: Var) -> Result<Var, LossError> {
    let (yv, pv) = (tape.value(y), tape.value(yhat));
    check_pair(yv.shape(), pv.shape())?;
    let diff = pv.zip_map(yv, |p, t| p - t)?;
    let inv = T::one() / T::of(diff.numel() as f64);
    let value = Tensor::scalar(diff.data().iter().map(|d| d.abs()).sum::<T>() * inv);
    let dfdx = diff.map(|d| sign(d) * inv);
    Ok(tape.custom("l1", &[y, yhat], value, Box::new(PointwiseRule { dfdx }))?)
}

/// Forward differences along x and y of `yhat - y`, compared with `norm`,
/// each direction averaged over its own derivative map.
pub fn grad_loss<T: Scalar>(tape: &mut Tape<T>, y: Var, yhat: Var, norm: GradNorm) -> Result<Var, LossError> {
    let (yv, pv) = (tape.value(y), tape.value(yhat));
    let s = yv.shape();
    check_pair(s, pv.shape())?;
    let diff = pv.zip_map(yv, |p, t| p - t)?;
    let mut value = T::zero();
    let mut dfdx = Tensor::zeros(s);
    // (dy, dx) offsets of the two derivative maps and their pixel counts.
    for (dy, dx) in [(0usize, 1usize), (1, 0)] {
        if s.w <= dx || s.h <= dy {
            continue;
        }
        let count = s.n * s.c * (s.h - dy) * (s.w - dx);
        let inv = T::one() / T::of(count as f64);
        for n in 0..s.n {
            for c in 0..s.c {
                let d = diff.plane(n, c);
                let g = dfdx.plane_mut(n, c);
                for yy in 0..s.h - dy {
                    for xx in 0..s.w - dx {
                        let (i0, i1) = (yy * s.w + xx, (yy + dy) * s.w + xx + dx);
                        let e = d[i1] - d[i0];
                        let (v, dv) = match norm {
                            GradNorm::L1 => (e.abs(), sign(e)),
                            GradNorm::L2 => (e * e, T::of(2.0) * e),
                        };
                        value += v * inv;
                        g[i1] += dv * inv;
                        g[i0] -= dv * inv;
                    }
                }
            }
        }
    }
    Ok(tape.custom("grad_loss", &[y, yhat], Tensor::scalar(value), Box::new(PointwiseRule { dfdx }))?)
}

/// Tape handles of the combined objective and its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub dssim: Var,
    pub grad: Var,
    pub l1: Var,
}

/// Plain values of [`LossTerms`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub dssim: f64,
    pub grad: f64,
    pub l1: f64,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossValues { total: v(self.total), dssim: v(self.dssim), grad: v(self.grad), l1: v(self.l1) }
    }
}

/// `DSSIM + grad + lambda * L1`.
pub fn combined_loss<T: Scalar>(tape: &mut Tape<T>, y: Var, yhat: Var, cfg: &LossConfig) -> Result<LossTerms, LossError> {
    cfg.validate()?;
    let dssim = dssim_loss(tape, y, yhat, cfg)?;
    let grad = grad_loss(tape, y, yhat, cfg.grad_norm)?;
    let l1 = l1_loss(tape, y, yhat)?;
    let structural = tape.add(dssim, grad)?;
    let weighted = tape.scale(l1, T::of(cfg.lambda_l1))?;
    let total = tape.add(structural, weighted)?;
    Ok(LossTerms { total, dssim, grad, l1 })
}

/// Evaluate the combined objective on plain tensors.
pub fn combined_loss_value<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, cfg: &LossConfig) -> Result<LossValues, LossError> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(y.clone()), tape.constant(yhat.clone()));
    Ok(combined_loss(&mut tape, a, b, cfg)?.values(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn value<T: Scalar>(f: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var, LossError>, a: &Tensor<T>, b: &Tensor<T>) -> T {
        let mut tape = Tape::new();
        let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = f(&mut tape, x, y).unwrap();
        tape.value(out).item()
    }

    fn depth(seed: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([1, 1, h, w], |_, _, y, x| 1.0 + ((seed * 31 + y * 7 + x * 13) % 17) as f64 * 0.5)
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let cfg = LossConfig::default();
        let a = depth(1, 12, 16);
        assert_eq!(ssim_value(&a, &a, &cfg).unwrap(), 1.0);
        assert_eq!(value(|t, a, b| dssim_loss(t, a, b, &cfg), &a, &a), 0.0);
    }

    #[test]
    fn ssim_constant_patches_closed_form() {
        let cfg = LossConfig::default();
        let c1 = cfg.c1();
        for (k1, k2) in [(1.0, 3.0), (2.5, 2.5), (0.2, 9.0), (7.0, 0.5)] {
            let a = Tensor::<f64>::full([1, 1, 2, 2], k1);
            let b = Tensor::<f64>::full([1, 1, 2, 2], k2);
            let expected = (2.0 * k1 * k2 + c1) / (k1 * k1 + k2 * k2 + c1);
            assert!((ssim_value(&a, &b, &cfg).unwrap() - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_negative() {
        let cfg = LossConfig::default();
        let l = cfg.dynamic_range;
        let a = Tensor::<f64>::from_fn([1, 1, 16, 16], |_, _, y, x| if (x + y) % 2 == 0 { l } else { 0.0 });
        let b = a.map(|v| l - v);
        assert!(ssim_value(&a, &b, &cfg).unwrap() < 0.0);
    }

    #[test]
    fn dssim_reaches_one_for_anti_correlated_patches() {
        // Constant patches a = k, b = -k: the variance terms cancel and the
        // luminance term is (C1 - 2k^2) / (C1 + 2k^2), which tends to -1.
        let cfg = LossConfig { c1: Some(1e-12), ..LossConfig::default() };
        let a = Tensor::<f64>::full([1, 1, 2, 2], 1.0);
        let b = a.map(|v| -v);
        let s = ssim_value(&a, &b, &cfg).unwrap();
        assert!((s + 1.0).abs() < 1e-9, "{s}");
        let d = value(|t, a, b| dssim_loss(t, a, b, &cfg), &a, &b);
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grad_loss_of_horizontal_ramp() {
        for slope in [0.5, -2.0, 3.0] {
            let y = Tensor::<f64>::full([1, 1, 3, 3], 4.0);
            let yhat = Tensor::from_fn([1, 1, 3, 3], |_, _, _, x| 1.0 + slope * x as f64);
            let v = value(|t, a, b| grad_loss(t, a, b, GradNorm::L1), &y, &yhat);
            assert!((v - f64::abs(slope)).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_hand_value_and_gradient() {
        let y = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        let yhat = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(y);
        let b = tape.param(yhat);
        let l = l1_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn combined_is_sum_of_terms() {
        let cfg = LossConfig::default();
        let (y, yhat) = (depth(1, 10, 12), depth(2, 10, 12));
        let v = combined_loss_value(&y, &yhat, &cfg).unwrap();
        assert!((v.total - (v.dssim + v.grad + cfg.lambda_l1 * v.l1)).abs() < 1e-6);
        let z = combined_loss_value(&y, &y, &cfg).unwrap();
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn lambda_linearity() {
        let (y, yhat) = (depth(3, 8, 8), depth(4, 8, 8));
        let a = LossConfig { lambda_l1: 0.1, ..LossConfig::default() };
        let b = LossConfig { lambda_l1: 0.35, ..LossConfig::default() };
        let (va, vb) = (combined_loss_value(&y, &yhat, &a).unwrap(), combined_loss_value(&y, &yhat, &b).unwrap());
        assert!(((vb.total - va.total) / 0.25 - va.l1).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones([1, 1, 4, 4]));
        let b = tape.constant(Tensor::ones([1, 1, 4, 5]));
        assert!(l1_loss(&mut tape, a, b).is_err());
        assert!(grad_loss(&mut tape, a, b, GradNorm::L1).is_err());
        assert!(ssim(&mut tape, a, b, &LossConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::default();
        assert!(cfg.set("ssim_window", "8").unwrap());
        assert!(cfg.validate().is_err());
        let mut cfg = LossConfig::default();
        cfg.set("lambda_l1", "0").unwrap();
        assert!(cfg.validate().is_err());
        assert!(!cfg.set("epochs", "3").unwrap());
    }

    fn map_strategy() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, f64)> {
        (proptest::collection::vec(0.0f64..10.0, 48), proptest::collection::vec(0.0f64..10.0, 48), -5.0f64..5.0)
            .prop_map(|(a, b, k)| (Tensor::from_vec([1, 1, 6, 8], a).unwrap(), Tensor::from_vec([1, 1, 6, 8], b).unwrap(), k))
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric_and_dssim_bounded((a, b, _k) in map_strategy()) {
            let cfg = LossConfig::default();
            let ab = ssim_value(&a, &b, &cfg).unwrap();
            let ba = ssim_value(&b, &a, &cfg).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6);
            let d = (1.0 - ab) / 2.0;
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn grad_loss_ignores_constant_shift((a, b, k) in map_strategy()) {
            let base = value(|t, x, y| grad_loss(t, x, y, GradNorm::L1), &a, &b);
            let moved = value(|t, x, y| grad_loss(t, x, y, GradNorm::L1), &a, &b.map(|v| v + k));
            prop_assert!((base - moved).abs() < 1e-12);
            // Quarter-step maps shifted by an integer keep every difference
            // exact, so the invariance is bitwise.
            let quarter = |t: &Tensor<f64>| t.map(|v| (v * 4.0).round() / 4.0);
            let (aq, bq) = (quarter(&a), quarter(&b));
            let exact = value(|t, x, y| grad_loss(t, x, y, GradNorm::L1), &aq, &bq);
            let shifted = value(|t, x, y| grad_loss(t, x, y, GradNorm::L1), &aq, &bq.map(|v| v + k.round()));
            prop_assert_eq!(exact, shifted);
        }

        #[test]
        fn combined_is_nonnegative((a, b, _k) in map_strategy()) {
            let v = combined_loss_value(&a, &b, &LossConfig::default()).unwrap();
            prop_assert!(v.total >= 0.0);
        }
    }
}
