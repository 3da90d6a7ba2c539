use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::nn::{count_macs, Model, ModelError};
use crate::tensor::Tensor;

/// Size and single-image latency of a model at one resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub param_count: usize,
    pub mac_count: u64,
    pub latency_mean_ms: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub n_runs: usize,
    pub height: usize,
    pub width: usize,
}

pub const BENCH_HEADER: &str = "params,macs,mean_ms,p50_ms,p95_ms,n_runs,height,width";

impl BenchReport {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.param_count,
            self.mac_count,
            self.latency_mean_ms,
            self.latency_p50_ms,
            self.latency_p95_ms,
            self.n_runs,
            self.height,
            self.width
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if f.len() != 8 {
            return Err(format!("expected 8 fields ({BENCH_HEADER}), got {}", f.len()));
        }
        fn field<T: std::str::FromStr>(f: &[&str], i: usize) -> Result<T, String> {
            f[i].parse().map_err(|_| format!("field {} ('{}') does not parse", i + 1, f[i]))
        }
        Ok(BenchReport {
            param_count: field(&f, 0)?,
            mac_count: field(&f, 1)?,
            latency_mean_ms: field(&f, 2)?,
            latency_p50_ms: field(&f, 3)?,
            latency_p95_ms: field(&f, 4)?,
            n_runs: field(&f, 5)?,
            height: field(&f, 6)?,
            width: field(&f, 7)?,
        })
    }
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Time `n_runs` single-image inferences on random input after `warmup`
/// untimed ones.
pub fn benchmark(model: &Model<f32>, height: usize, width: usize, n_runs: usize, warmup: usize, seed: u64) -> Result<BenchReport, ModelError> {
    let n_runs = n_runs.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0f32, 1.0).expect("valid range");
    let x = Tensor::from_fn([1, 3, height, width], |_, _, _, _| unit.sample(&mut rng));
    for _ in 0..warmup {
        model.predict(&x)?;
    }
    let mut times = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let start = Instant::now();
        std::hint::black_box(model.predict(std::hint::black_box(&x))?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / n_runs as f64;
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        param_count: model.param_count(),
        mac_count: count_macs(model.config(), height, width)?,
        latency_mean_ms: mean,
        latency_p50_ms: percentile(&times, 50.0),
        latency_p95_ms: percentile(&times, 95.0),
        n_runs,
        height,
        width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    fn calibrated(h: usize, w: usize) -> Model<f32> {
        let mut m = Model::new(&ModelConfig::guidedepth_tiny(), 0).unwrap();
        m.forward_train(&Tensor::from_fn([2, 3, h, w], |n, c, y, x| ((n + c + y + x) % 5) as f32 / 4.0)).unwrap();
        m
    }

    #[test]
    fn single_run_percentiles_coincide() {
        let r = benchmark(&calibrated(16, 16), 16, 16, 1, 0, 1).unwrap();
        assert_eq!(r.latency_p50_ms, r.latency_mean_ms);
        assert_eq!(r.latency_p95_ms, r.latency_mean_ms);
        assert!(r.param_count > 0 && r.mac_count > 0);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }

    #[test]
    fn csv_round_trip() {
        let r = benchmark(&calibrated(16, 16), 16, 16, 5, 1, 2).unwrap();
        assert!(r.latency_p50_ms <= r.latency_p95_ms);
        assert_eq!(BenchReport::parse_csv_row(&r.to_csv_row()).unwrap(), r);
        assert!(BenchReport::parse_csv_row("1,2,3").is_err());
    }

    #[test]
    fn latency_grows_with_resolution() {
        let m = calibrated(48, 64);
        let small = benchmark(&m, 48, 64, 20, 3, 0).unwrap();
        let large = benchmark(&m, 96, 128, 20, 3, 0).unwrap();
        assert!(large.latency_p50_ms > small.latency_p50_ms, "{small:?} vs {large:?}");
        assert!(large.mac_count > small.mac_count);
    }
}
