use super::EvalError;
use crate::tensor::{Scalar, Tensor};

/// Per-image depth errors, all in metric units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub rmse: f64,
    pub rel: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl Metrics {
    pub fn as_array(&self) -> [f64; 6] {
        [self.rmse, self.rel, self.log10, self.delta1, self.delta2, self.delta3]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Metrics { rmse: a[0], rel: a[1], log10: a[2], delta1: a[3], delta2: a[4], delta3: a[5] }
    }
}

/// RMSE, mean relative error, mean log10 error and the three threshold
/// accuracies over the pixels where `mask` is true (all pixels when `None`).
///
/// `delta_j` counts pixels with `max(y / yhat, yhat / y) < 1.25^j`, strictly.
pub fn compute_metrics<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, mask: Option<&[bool]>) -> Result<Metrics, EvalError> {
    if y.shape() != yhat.shape() {
        return Err(EvalError::Resolution(format!("ground truth {} vs prediction {}", y.shape(), yhat.shape())));
    }
    if let Some(m) = mask {
        if m.len() != y.numel() {
            return Err(EvalError::Resolution(format!("mask has {} entries for {} pixels", m.len(), y.numel())));
        }
    }
    let thresholds = [1.25f64, 1.25f64.powi(2), 1.25f64.powi(3)];
    let (mut se, mut rel, mut log, mut hits, mut count) = (0.0, 0.0, 0.0, [0usize; 3], 0usize);
    for (i, (&t, &p)) in y.data().iter().zip(yhat.data()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (t, p) = (t.as_f64(), p.as_f64());
        if !(t > 0.0 && p > 0.0 && t.is_finite() && p.is_finite()) {
            return Err(EvalError::InvalidDepth(format!("pixel {i}: ground truth {t}, prediction {p}")));
        }
        let d = t - p;
        se += d * d;
        rel += d.abs() / t;
        log += (t.log10() - p.log10()).abs();
        let ratio = (t / p).max(p / t);
        for (h, th) in hits.iter_mut().zip(thresholds) {
            *h += (ratio < th) as usize;
        }
        count += 1;
    }
    if count == 0 {
        return Err(EvalError::EmptyMask);
    }
    let n = count as f64;
    Ok(Metrics {
        rmse: (se / n).sqrt(),
        rel: rel / n,
        log10: log / n,
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
    })
}

/// Sum of per-image metrics and their count; merging is associative and
/// commutative, so partial results may be combined in any order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricAccumulator {
    pub sums: [f64; 6],
    pub count: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, m: &Metrics) {
        self.push_weighted(m, 1.0);
        self.count += 1;
    }

    /// Add `weight * m` without counting an image; used to average the
    /// plain and flipped passes of one image.
    pub(crate) fn push_weighted(&mut self, m: &Metrics, weight: f64) {
        for (s, v) in self.sums.iter_mut().zip(m.as_array()) {
            *s += weight * v;
        }
    }

    pub fn merge(mut self, other: &Self) -> Self {
        for (s, v) in self.sums.iter_mut().zip(other.sums) {
            *s += v;
        }
        self.count += other.count;
        self
    }

    pub fn mean(&self) -> Option<Metrics> {
        (self.count > 0).then(|| Metrics::from_array(self.sums.map(|s| s / self.count as f64)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let y = t(&[1.0, 2.5, 7.0]);
        let m = compute_metrics(&y, &y, None).unwrap();
        assert_eq!(m, Metrics { rmse: 0.0, rel: 0.0, log10: 0.0, delta1: 1.0, delta2: 1.0, delta3: 1.0 });
    }

    #[test]
    fn doubled_depth() {
        assert_eq!(1.25f64.powi(3), 1.953125);
        let m = compute_metrics(&t(&[1.0, 2.0]), &t(&[2.0, 4.0]), None).unwrap();
        assert_eq!(m.rel, 1.0);
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn threshold_is_strict() {
        let m = compute_metrics(&t(&[4.0]), &t(&[5.0]), None).unwrap();
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 1.0);
        assert_eq!(m.delta3, 1.0);
    }

    #[test]
    fn empty_mask_and_invalid_depth() {
        let y = t(&[1.0, 2.0]);
        assert!(matches!(compute_metrics(&y, &y, Some(&[false, false])), Err(EvalError::EmptyMask)));
        assert!(matches!(compute_metrics(&y, &t(&[0.0, 1.0]), None), Err(EvalError::InvalidDepth(_))));
        let m = compute_metrics(&y, &t(&[-1.0, 2.0]), Some(&[false, true])).unwrap();
        assert_eq!(m.rmse, 0.0);
    }

    proptest! {
        #[test]
        fn deltas_nested_and_permutation_invariant(
            pairs in proptest::collection::vec((0.1f64..20.0, 0.1f64..20.0), 1..40),
            rot in 0usize..40,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let m = compute_metrics(&t(&a), &t(&b), None).unwrap();
            prop_assert!(0.0 <= m.delta1 && m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
            prop_assert!(m.rmse >= 0.0 && m.rel >= 0.0 && m.log10 >= 0.0);
            let k = rot % a.len();
            let (mut ra, mut rb) = (a.clone(), b.clone());
            ra.rotate_left(k);
            rb.rotate_left(k);
            let r = compute_metrics(&t(&ra), &t(&rb), None).unwrap();
            for (x, y) in m.as_array().iter().zip(r.as_array()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }

        #[test]
        fn accumulator_order_does_not_matter(vals in proptest::collection::vec(0.0f64..5.0, 6..30)) {
            let ms: Vec<Metrics> = vals.chunks_exact(6).map(|c| Metrics::from_array(c.try_into().unwrap())).collect();
            let mut fwd = MetricAccumulator::default();
            ms.iter().for_each(|m| fwd.push(m));
            let mut rev = MetricAccumulator::default();
            ms.iter().rev().for_each(|m| rev.push(m));
            let (a, b) = (fwd.mean().unwrap(), rev.mean().unwrap());
            for (x, y) in a.as_array().iter().zip(b.as_array()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
