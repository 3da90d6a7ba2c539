//! Forward and backward kernels on raw tensors.
//!
//! These know nothing about the tape; [`super::Tape`] calls them and stores
//! whatever the backward pass needs.

use super::{Scalar, Shape, Tensor, TensorError};

/// Output extent of a strided, zero-padded window.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv2d_out_shape(x: Shape, w: Shape, stride: usize, padding: usize) -> Result<Shape, TensorError> {
    if x.c != w.c {
        return Err(TensorError::ChannelMismatch { expected: w.c, actual: x.c });
    }
    if stride == 0 {
        return Err(TensorError::InvalidDimension("stride must be at least 1".into()));
    }
    let ho = conv_out_dim(x.h, w.h, stride, padding);
    let wo = conv_out_dim(x.w, w.w, stride, padding);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(Shape::new(x.n, w.n, ho, wo)),
        _ => Err(TensorError::InvalidDimension(format!(
            "conv of {x} with kernel {w}, stride {stride}, padding {padding} has no output"
        ))),
    }
}

/// Range of output columns whose tap `k` lands inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    // ix = o*stride + k - padding must satisfy 0 <= ix < len
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    let hi_num = len as isize - 1 + padding as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let (xs, ws) = (x.shape(), w.shape());
    let os = conv2d_out_shape(xs, ws, stride, padding)?;
    if let Some(b) = b {
        b.expect_shape(Shape::vector(ws.n))?;
    }
    let mut out = Tensor::zeros(os);
    let wd = w.data();
    for n in 0..xs.n {
        for co in 0..ws.n {
            let bias = b.map_or(T::zero(), |b| b.data()[co]);
            let o = out.plane_mut(n, co);
            o.iter_mut().for_each(|v| *v = bias);
            for ci in 0..xs.c {
                let xp = x.plane(n, ci);
                for ky in 0..ws.h {
                    let (oy_lo, oy_hi) = valid_range(os.h, xs.h, ky, stride, padding);
                    for kx in 0..ws.w {
                        let wv = wd[((co * ws.c + ci) * ws.h + ky) * ws.w + kx];
                        let (ox_lo, ox_hi) = valid_range(os.w, xs.w, kx, stride, padding);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let orow = &mut o[oy * os.w..(oy + 1) * os.w];
                            let xrow = &xp[iy * xs.w..(iy + 1) * xs.w];
                            if stride == 1 {
                                let off = ox_lo + kx - padding;
                                let len = ox_hi - ox_lo;
                                for (ov, &xv) in orow[ox_lo..ox_hi].iter_mut().zip(&xrow[off..off + len]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * xrow[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reference convolution that visits every kernel tap, padded or not, and
/// counts one multiply-accumulate per visit.
pub fn conv2d_counting<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    macs: &mut u64,
) -> Result<Tensor<T>, TensorError> {
    let (xs, ws) = (x.shape(), w.shape());
    let os = conv2d_out_shape(xs, ws, stride, padding)?;
    let mut out = Tensor::zeros(os);
    for n in 0..os.n {
        for co in 0..os.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = b.map_or(T::zero(), |b| b.data()[co]);
                    for ci in 0..ws.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                let inside = iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w;
                                let xv = if inside { x.at(n, ci, iy as usize, ix as usize) } else { T::zero() };
                                acc += w.at(co, ci, ky, kx) * xv;
                                *macs += 1;
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> ConvGrads<T> {
    let (xs, ws, os) = (x.shape(), w.shape(), gout.shape());
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(Shape::vector(ws.n));
    let mut gx = need_input.then(|| Tensor::zeros(xs));
    let wd = w.data();
    for n in 0..xs.n {
        for co in 0..ws.n {
            let g = gout.plane(n, co);
            gb.data_mut()[co] += g.iter().copied().sum::<T>();
            for ci in 0..xs.c {
                let xp = x.plane(n, ci);
                for ky in 0..ws.h {
                    let (oy_lo, oy_hi) = valid_range(os.h, xs.h, ky, stride, padding);
                    for kx in 0..ws.w {
                        let widx = ((co * ws.c + ci) * ws.h + ky) * ws.w + kx;
                        let (ox_lo, ox_hi) = valid_range(os.w, xs.w, kx, stride, padding);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let grow = &g[oy * os.w..(oy + 1) * os.w];
                            let xrow = &xp[iy * xs.w..(iy + 1) * xs.w];
                            for ox in ox_lo..ox_hi {
                                acc += grow[ox] * xrow[ox * stride + kx - padding];
                            }
                        }
                        gw.data_mut()[widx] += acc;
                        if let Some(gx) = gx.as_mut() {
                            let wv = wd[widx];
                            let gxp = gx.plane_mut(n, ci);
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - padding;
                                let grow = &g[oy * os.w..(oy + 1) * os.w];
                                let xrow = &mut gxp[iy * xs.w..(iy + 1) * xs.w];
                                for ox in ox_lo..ox_hi {
                                    xrow[ox * stride + kx - padding] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads { input: gx, weight: gw, bias: gb }
}

/// Statistics saved by a train-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnSaved<T: Scalar> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased batch variance per channel.
    pub batch_var: Vec<T>,
}

/// Per-channel normalisation over `(n, h, w)` using the batch's own statistics.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, BnSaved<T>) {
    let s = x.shape();
    let count = T::of((s.n * s.plane()) as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += x.plane(n, c).iter().copied().sum::<T>();
        }
        mean[c] = acc / count;
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += x.plane(n, c).iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
        }
        var[c] = acc / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            let src = x.plane(n, c);
            let nrm = normalized.plane_mut(n, c);
            for (d, &v) in nrm.iter_mut().zip(src) {
                *d = (v - mean[c]) * inv_std[c];
            }
            let nrm = normalized.plane(n, c).to_vec();
            for (o, v) in out.plane_mut(n, c).iter_mut().zip(nrm) {
                *o = g * v + b;
            }
        }
    }
    (out, BnSaved { normalized, inv_std, batch_mean: mean, batch_var: var })
}

pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> (Tensor<T>, Vec<T>) {
    let s = x.shape();
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b, m, k) = (gamma.data()[c], beta.data()[c], running_mean[c], inv_std[c]);
            for (o, &v) in out.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                *o = g * (v - m) * k + b;
            }
        }
    }
    (out, inv_std)
}

/// Gradients of train-mode batch norm with respect to input, gamma and beta.
pub fn batch_norm_train_backward<T: Scalar>(
    gout: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = gout.shape();
    let count = T::of((s.n * s.plane()) as f64);
    let mut ggamma = Tensor::zeros(Shape::vector(s.c));
    let mut gbeta = Tensor::zeros(Shape::vector(s.c));
    let mut gx = Tensor::zeros(s);
    for c in 0..s.c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for n in 0..s.n {
            for (&g, &xh) in gout.plane(n, c).iter().zip(saved.normalized.plane(n, c)) {
                sum_g += g;
                sum_gx += g * xh;
            }
        }
        ggamma.data_mut()[c] = sum_gx;
        gbeta.data_mut()[c] = sum_g;
        let scale = gamma.data()[c] * saved.inv_std[c];
        let (mean_g, mean_gx) = (sum_g / count, sum_gx / count);
        for n in 0..s.n {
            let xh = saved.normalized.plane(n, c);
            let g = gout.plane(n, c);
            for ((d, &gv), &xv) in gx.plane_mut(n, c).iter_mut().zip(g).zip(xh) {
                *d = scale * (gv - mean_g - xv * mean_gx);
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Sampling taps for one axis of a half-pixel-centred bilinear resize.
#[derive(Debug, Clone)]
pub struct ResizeAxis<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

impl<T: Scalar> ResizeAxis<T> {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for d in 0..output {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(T::of(src - i0 as f64));
        }
        ResizeAxis { lo, hi, frac }
    }
}

pub fn bilinear_forward<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    let ay = ResizeAxis::<T>::new(s.h, out_h);
    let ax = ResizeAxis::<T>::new(s.w, out_w);
    let mut out = Tensor::zeros(s.with_spatial(out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..out_h {
                let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
                let (r0, r1) = (&src[y0 * s.w..(y0 + 1) * s.w], &src[y1 * s.w..(y1 + 1) * s.w]);
                for ox in 0..out_w {
                    let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    dst[oy * out_w + ox] = top + (bot - top) * fy;
                }
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(gout: &Tensor<T>, input: Shape) -> Tensor<T> {
    let os = gout.shape();
    let ay = ResizeAxis::<T>::new(input.h, os.h);
    let ax = ResizeAxis::<T>::new(input.w, os.w);
    let mut gx = Tensor::zeros(input);
    for n in 0..os.n {
        for c in 0..os.c {
            let g = gout.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for oy in 0..os.h {
                let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
                for ox in 0..os.w {
                    let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                    let gv = g[oy * os.w + ox];
                    let (one_y, one_x) = (T::one() - fy, T::one() - fx);
                    dst[y0 * input.w + x0] += gv * one_y * one_x;
                    dst[y0 * input.w + x1] += gv * one_y * fx;
                    dst[y1 * input.w + x0] += gv * fy * one_x;
                    dst[y1 * input.w + x1] += gv * fy * fx;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for len in 1..7 {
            for k in 0..3 {
                for stride in 1..3 {
                    for padding in 0..3 {
                        let Some(out_len) = conv_out_dim(len, 3, stride, padding) else { continue };
                        let expected: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let ix = (o * stride + k) as isize - padding as isize;
                                ix >= 0 && (ix as usize) < len
                            })
                            .collect();
                        let (lo, hi) = valid_range(out_len, len, k, stride, padding);
                        assert_eq!((lo..hi).collect::<Vec<_>>(), expected, "len {len} k {k} s {stride} p {padding}");
                    }
                }
            }
        }
    }

    #[test]
    fn counting_kernel_agrees_with_fast_kernel() {
        let x = Tensor::<f64>::from_fn([2, 3, 7, 6], |n, c, y, x| ((n * 7 + c * 3 + y * 5 + x) % 11) as f64 - 5.0);
        let w = Tensor::<f64>::from_fn([4, 3, 3, 3], |o, c, y, x| ((o + 2 * c + 3 * y + x) % 5) as f64 * 0.25 - 0.5);
        let b = Tensor::<f64>::from_fn([1, 4, 1, 1], |_, c, _, _| c as f64);
        for (stride, padding) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let fast = conv2d_forward(&x, &w, Some(&b), stride, padding).unwrap();
            let mut macs = 0;
            let slow = conv2d_counting(&x, &w, Some(&b), stride, padding, &mut macs).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-12);
            let os = fast.shape();
            assert_eq!(macs as usize, 2 * 27 * 4 * os.h * os.w);
        }
    }

    #[test]
    fn resize_axis_identity_when_sizes_match() {
        let a = ResizeAxis::<f64>::new(5, 5);
        assert_eq!(a.lo, vec![0, 1, 2, 3, 4]);
        assert!(a.frac.iter().all(|&f| f == 0.0));
    }
}
