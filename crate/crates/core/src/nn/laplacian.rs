use super::config::LaplacianMode;
use super::ModelError;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

/// Guidance for the decoder stage at scale `1 / 2^k`.
///
/// The low-pass image is `Up_k(Down_{k+1}(x))`: `x` resized to `1/2^(k+1)`
/// and back up to `1/2^k`. `BandPass` returns `x_k` minus that image, where
/// `x_k` is `x` resized to `1/2^k`.
pub fn laplacian_guidance_var<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    k: u32,
    mode: LaplacianMode,
) -> Result<Var, ModelError> {
    if k > 2 {
        return Err(ModelError::Config(format!("laplacian level {k} outside 0..=2")));
    }
    let s = tape.shape(x);
    let div = 1usize << (k + 1);
    if !s.h.is_multiple_of(div) || !s.w.is_multiple_of(div) {
        return Err(TensorError::Indivisible(format!("image {}x{}", s.h, s.w), div).into());
    }
    let (hk, wk) = (s.h >> k, s.w >> k);
    let down = tape.resize(x, s.h / div, s.w / div)?;
    let low = tape.resize(down, hk, wk)?;
    match mode {
        LaplacianMode::LowPass => Ok(low),
        LaplacianMode::BandPass => {
            let xk = tape.resize(x, hk, wk)?;
            Ok(tape.sub(xk, low)?)
        }
    }
}

pub fn laplacian_guidance<T: Scalar>(x: &Tensor<T>, k: u32, mode: LaplacianMode) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = laplacian_guidance_var(&mut tape, v, k, mode)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_zero_band_pass() {
        let x = Tensor::<f64>::full([1, 3, 16, 16], 0.7);
        for k in 0..3 {
            let l = laplacian_guidance(&x, k, LaplacianMode::BandPass).unwrap();
            assert!(l.data().iter().all(|&v| v.abs() < 1e-15));
            let low = laplacian_guidance(&x, k, LaplacianMode::LowPass).unwrap();
            assert!(low.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn shape_matches_image_guidance_at_stage() {
        let x = Tensor::<f32>::ones([2, 3, 48, 64]);
        for (k, (h, w)) in [(0, (48, 64)), (1, (24, 32)), (2, (12, 16))] {
            let l = laplacian_guidance(&x, k, LaplacianMode::BandPass).unwrap();
            assert_eq!((l.shape().h, l.shape().w), (h, w));
            assert_eq!(l.shape().c, 3);
        }
    }

    #[test]
    fn linear_ramp_band_pass_vanishes_away_from_borders() {
        let x = Tensor::<f64>::from_fn([1, 1, 32, 32], |_, _, y, x| 0.01 * x as f64 + 0.02 * y as f64);
        for k in 0..3u32 {
            let l = laplacian_guidance(&x, k, LaplacianMode::BandPass).unwrap();
            let s = l.shape();
            let margin = 2;
            for y in margin..s.h - margin {
                for xx in margin..s.w - margin {
                    assert!(l.at(0, 0, y, xx).abs() < 1e-5, "k={k} at ({y},{xx}): {}", l.at(0, 0, y, xx));
                }
            }
        }
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let x = Tensor::<f32>::ones([1, 3, 12, 20]);
        assert!(laplacian_guidance(&x, 2, LaplacianMode::BandPass).is_err());
        assert!(laplacian_guidance(&x, 1, LaplacianMode::BandPass).is_ok());
        assert!(laplacian_guidance(&x, 3, LaplacianMode::BandPass).is_err());
    }
}
