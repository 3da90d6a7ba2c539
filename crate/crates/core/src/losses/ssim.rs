//! Gaussian-window SSIM as a single tape op.

use crate::tensor::{Backward, Scalar, Tape, Tensor, Var};

use super::{check_pair, LossConfig, LossError};

/// Geometry of a 1-D filtering pass over an `h x w` plane.
#[derive(Clone, Copy)]
struct Axis {
    len: usize,
    stride: usize,
    lines: usize,
    line_stride: usize,
}

impl Axis {
    fn rows(h: usize, w: usize) -> Self {
        Axis { len: w, stride: 1, lines: h, line_stride: w }
    }

    fn cols(h: usize, w: usize) -> Self {
        Axis { len: h, stride: w, lines: w, line_stride: 1 }
    }
}

/// Separable Gaussian filter, truncated at the image border and renormalised
/// by the in-bounds weight, so constant planes stay constant.
#[derive(Debug, Clone)]
struct Window {
    taps: Vec<f64>,
}

impl Window {
    fn new(size: usize, sigma: f64) -> Self {
        let r = (size / 2) as f64;
        Window { taps: (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect() }
    }

    fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    /// `(first input, last input, tap offset, 1 / in-bounds weight)` per output.
    fn support(&self, n: usize) -> Vec<(usize, usize, usize, f64)> {
        let r = self.radius();
        (0..n)
            .map(|i| {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(n - 1);
                let off = lo + r - i;
                let z: f64 = self.taps[off..off + hi - lo + 1].iter().sum();
                (lo, hi, off, 1.0 / z)
            })
            .collect()
    }

    fn pass<T: Scalar>(&self, src: &[T], dst: &mut [T], axis: Axis, transpose: bool) {
        let Axis { len, stride, lines, line_stride } = axis;
        let support = self.support(len);
        let taps: Vec<T> = self.taps.iter().map(|&t| T::of(t)).collect();
        for line in 0..lines {
            let base = line * line_stride;
            for (i, &(lo, hi, off, inv)) in support.iter().enumerate() {
                let inv = T::of(inv);
                if transpose {
                    let g = src[base + i * stride] * inv;
                    for j in lo..=hi {
                        dst[base + j * stride] += taps[off + j - lo] * g;
                    }
                } else {
                    let mut acc = T::zero();
                    for j in lo..=hi {
                        acc += taps[off + j - lo] * src[base + j * stride];
                    }
                    dst[base + i * stride] = acc * inv;
                }
            }
        }
    }

    /// Filter every plane: rows then columns.
    fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        let mut tmp = Tensor::zeros(s);
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                self.pass(x.plane(n, c), tmp.plane_mut(n, c), Axis::rows(s.h, s.w), false);
                self.pass(tmp.plane(n, c), out.plane_mut(n, c), Axis::cols(s.h, s.w), false);
            }
        }
        out
    }

    /// Adjoint of [`Window::apply`].
    fn apply_t<T: Scalar>(&self, g: &Tensor<T>) -> Tensor<T> {
        let s = g.shape();
        let mut tmp = Tensor::zeros(s);
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                self.pass(g.plane(n, c), tmp.plane_mut(n, c), Axis::cols(s.h, s.w), true);
                self.pass(tmp.plane(n, c), out.plane_mut(n, c), Axis::rows(s.h, s.w), true);
            }
        }
        out
    }
}

/// Local statistics of an image pair under the window.
struct Moments<T: Scalar> {
    mu_a: Tensor<T>,
    mu_b: Tensor<T>,
    m_aa: Tensor<T>,
    m_bb: Tensor<T>,
    m_ab: Tensor<T>,
}

impl<T: Scalar> Moments<T> {
    fn new(win: &Window, a: &Tensor<T>, b: &Tensor<T>) -> Self {
        let prod = |x: &Tensor<T>, y: &Tensor<T>| x.zip_map(y, |u, v| u * v).expect("equal shapes");
        Moments {
            mu_a: win.apply(a),
            mu_b: win.apply(b),
            m_aa: win.apply(&prod(a, a)),
            m_bb: win.apply(&prod(b, b)),
            m_ab: win.apply(&prod(a, b)),
        }
    }

    /// `(A1, A2, B1, B2)` at pixel `i`, with `S = A1 A2 / (B1 B2)`.
    fn terms(&self, i: usize, c1: T, c2: T) -> (T, T, T, T) {
        let (ma, mb) = (self.mu_a.data()[i], self.mu_b.data()[i]);
        let two = T::of(2.0);
        let a1 = two * ma * mb + c1;
        let a2 = two * (self.m_ab.data()[i] - ma * mb) + c2;
        let b1 = ma * ma + mb * mb + c1;
        let b2 = (self.m_aa.data()[i] - ma * ma) + (self.m_bb.data()[i] - mb * mb) + c2;
        (a1, a2, b1, b2)
    }
}

/// Per-pixel SSIM map.
pub fn ssim_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>, LossError> {
    check_pair(a.shape(), b.shape())?;
    cfg.validate()?;
    let win = Window::new(cfg.ssim_window, cfg.ssim_sigma);
    let m = Moments::new(&win, a, b);
    let (c1, c2) = (T::of(cfg.c1()), T::of(cfg.c2()));
    let mut out = Tensor::zeros(a.shape());
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (a1, a2, b1, b2) = m.terms(i, c1, c2);
        *v = a1 * a2 / (b1 * b2);
    }
    Ok(out)
}

struct SsimRule {
    window: Window,
    c1: f64,
    c2: f64,
    /// Output is `offset + factor * mean(S)`.
    factor: f64,
}

impl<T: Scalar> Backward<T> for SsimRule {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let s = a.shape();
        let m = Moments::new(&self.window, a, b);
        let (c1, c2) = (T::of(self.c1), T::of(self.c2));
        let scale = grad.item() * T::of(self.factor) / T::of(s.numel() as f64);
        let two = T::of(2.0);

        let mut g_mu_a = Tensor::zeros(s);
        let mut g_mu_b = Tensor::zeros(s);
        let mut g_var = Tensor::zeros(s);
        let mut g_ab = Tensor::zeros(s);
        for i in 0..s.numel() {
            let (a1, a2, b1, b2) = m.terms(i, c1, c2);
            let den = b1 * b2;
            let d_a1 = a2 / den;
            let d_a2 = a1 / den;
            let d_b1 = -a1 * a2 / (b1 * den);
            let d_b2 = -a1 * a2 / (b2 * den);
            let (ma, mb) = (m.mu_a.data()[i], m.mu_b.data()[i]);
            g_mu_a.data_mut()[i] = scale * two * (mb * (d_a1 - d_a2) + ma * (d_b1 - d_b2));
            g_mu_b.data_mut()[i] = scale * two * (ma * (d_a1 - d_a2) + mb * (d_b1 - d_b2));
            g_var.data_mut()[i] = scale * d_b2;
            g_ab.data_mut()[i] = scale * two * d_a2;
        }
        let t_mu_a = self.window.apply_t(&g_mu_a);
        let t_mu_b = self.window.apply_t(&g_mu_b);
        let t_var = self.window.apply_t(&g_var);
        let t_ab = self.window.apply_t(&g_ab);
        let mut ga = Tensor::zeros(s);
        let mut gb = Tensor::zeros(s);
        for i in 0..s.numel() {
            let (av, bv) = (a.data()[i], b.data()[i]);
            ga.data_mut()[i] = t_mu_a.data()[i] + two * av * t_var.data()[i] + bv * t_ab.data()[i];
            gb.data_mut()[i] = t_mu_b.data()[i] + two * bv * t_var.data()[i] + av * t_ab.data()[i];
        }
        vec![Some(ga), Some(gb)]
    }
}

/// `offset + factor * mean(SSIM map)` recorded as one op.
pub(super) fn ssim_affine<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    cfg: &LossConfig,
    offset: f64,
    factor: f64,
    name: &'static str,
) -> Result<Var, LossError> {
    let map = ssim_map(tape.value(a), tape.value(b), cfg)?;
    let value = Tensor::scalar(T::of(offset + factor * map.mean().as_f64()));
    let rule = SsimRule { window: Window::new(cfg.ssim_window, cfg.ssim_sigma), c1: cfg.c1(), c2: cfg.c2(), factor };
    Ok(tape.custom(name, &[a, b], value, Box::new(rule))?)
}

/// Mean SSIM over all pixel-centred windows.
pub fn ssim<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, cfg: &LossConfig) -> Result<Var, LossError> {
    ssim_affine(tape, a, b, cfg, 0.0, 1.0, "ssim")
}

pub fn ssim_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &LossConfig) -> Result<T, LossError> {
    Ok(ssim_map(a, b, cfg)?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_preserves_constants() {
        let w = Window::new(11, 1.5);
        let x = Tensor::<f64>::full([1, 1, 4, 7], 2.5);
        let y = w.apply(&x);
        assert!(y.data().iter().all(|v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn transpose_is_adjoint() {
        let w = Window::new(5, 1.0);
        let x = Tensor::<f64>::from_fn([1, 2, 6, 9], |_, c, y, x| ((c * 11 + y * 7 + x * 3) % 13) as f64 - 6.0);
        let g = Tensor::<f64>::from_fn([1, 2, 6, 9], |_, c, y, x| ((c * 5 + y * 2 + x * 9) % 7) as f64 - 3.0);
        let lhs: f64 = w.apply(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(w.apply_t(&g).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
