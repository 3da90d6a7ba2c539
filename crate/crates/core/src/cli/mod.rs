//! Subcommands of the `gd` binary. Each one validates its [`RunConfig`],
//! writes a config snapshot into the run directory and leaves its CSV or
//! tensor outputs next to it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};

use crate::data::{generate_dataset, read_dataset, write_dataset, DepthSample, SceneSpec};
use crate::eval::{self, evaluate, prediction_to_depth, EvalReport, OraclePredictor};
use crate::nn::{ablation_variants, count_macs, load_checkpoint, save_checkpoint, Model};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::kernels::bilinear_forward;
use crate::tensor::Tensor;
use crate::train::{train_with, History};

pub mod bench;
pub mod config;

pub use bench::{benchmark, BenchReport, BENCH_HEADER};
pub use config::{parse_overrides, parse_pairs, ConfigError, RunConfig};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Write `<run_dir>/<name>.config.txt`.
pub fn snapshot(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let path = cfg.run_dir.join(format!("{name}.config.txt"));
    write_text(&path, &cfg.to_text())?;
    Ok(path)
}

fn synth_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.synth_count as u64).map(|i| cfg.synth.seed + i).collect()
}

fn load_from(path: Option<&Path>, cfg: &RunConfig) -> Result<Vec<DepthSample>> {
    match path {
        Some(p) => read_dataset(p).with_context(|| format!("loading dataset {}", p.display())),
        None => generate_dataset(&cfg.synth, cfg.synth_count).context("generating synthetic scenes"),
    }
}

pub fn training_data(cfg: &RunConfig) -> Result<Vec<DepthSample>> {
    load_from(cfg.dataset.as_deref(), cfg)
}

pub fn evaluation_data(cfg: &RunConfig) -> Result<Vec<DepthSample>> {
    load_from(cfg.eval_dataset.as_deref().or(cfg.dataset.as_deref()), cfg)
}

/// Fill never-initialised batch-norm statistics with one train-mode pass
/// over a few synthetic scenes at the model resolution.
pub fn calibrate(model: &mut Model<f32>, cfg: &RunConfig) -> Result<()> {
    if model.stats_initialized() {
        return Ok(());
    }
    let (height, width) = cfg.resolution;
    let spec = SceneSpec { height, width, seed: cfg.seed, ..cfg.synth.clone() };
    let scenes = generate_dataset(&spec, 4)?;
    let images: Vec<Tensor<f32>> = scenes.into_iter().map(|s| s.image).collect();
    model.forward_train(&Tensor::stack_batch(&images)?)?;
    Ok(())
}

pub fn require_checkpoint(cfg: &RunConfig, command: &str) -> Result<Model<f32>> {
    let Some(dir) = &cfg.checkpoint else {
        bail!("{command} needs a trained model: pass --checkpoint <dir> (gd train writes <run_dir>/checkpoint)");
    };
    load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

pub struct TrainOutcome {
    pub history: History,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
}

/// Train, save the final checkpoint and the loss history, then evaluate.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    snapshot(cfg, "train")?;
    let data = training_data(cfg)?;
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    let log_every = cfg.log_every;
    let history = train_with(&mut model, &cfg.loss, &cfg.train_config(), &data, &mut |s| {
        if log_every > 0 && s.step % log_every == 0 {
            eprintln!(
                "step {:>5}  epoch {:>3}  lr {:.1e}  loss {:.5}  (dssim {:.5}, grad {:.5}, l1 {:.5})",
                s.step, s.epoch, s.lr, s.loss, s.dssim, s.grad, s.l1
            );
        }
    })?;
    write_text(&cfg.run_dir.join("history.csv"), &history.to_csv())?;
    let checkpoint = cfg.run_dir.join("checkpoint");
    save_checkpoint(&checkpoint, &model)?;
    let report = evaluate(&mut model, &evaluation_data(cfg)?, &cfg.eval_options())?;
    write_report(&cfg.run_dir.join("train_eval"), &report)?;
    Ok(TrainOutcome { history, checkpoint, report })
}

fn write_report(stem: &Path, report: &EvalReport) -> Result<()> {
    write_text(&stem.with_extension("csv"), &format!("{}\n{}\n", eval::CSV_HEADER, report.to_csv_row()))?;
    write_text(&stem.with_extension("txt"), &report.to_key_values())
}

/// Evaluate a checkpoint, or the resized ground truth when `oracle` is set.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport> {
    snapshot(cfg, "eval")?;
    let data = evaluation_data(cfg)?;
    let report = if cfg.oracle {
        let mut predictor = OraclePredictor { samples: &data, d_max: cfg.synth.d_max };
        evaluate(&mut predictor, &data, &cfg.eval_options())?
    } else {
        let mut model = require_checkpoint(cfg, "eval")?;
        evaluate(&mut model, &data, &cfg.eval_options())?
    };
    write_report(&cfg.run_dir.join("eval"), &report)?;
    Ok(report)
}

/// Plain-text greyscale image; near is bright.
pub fn pgm_preview(depth: &Tensor<f32>) -> String {
    let s = depth.shape();
    let (lo, hi) = (depth.min(), depth.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P2\n{} {}\n255\n", s.w, s.h);
    for row in depth.plane(0, 0).chunks(s.w) {
        let line: Vec<String> = row.iter().map(|&d| (255.0 * (hi - d) / span).round().to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Predict metric depth for one `(1, 3, H, W)` image file; the result has
/// the image's resolution.
pub fn run_predict(cfg: &RunConfig) -> Result<PathBuf> {
    snapshot(cfg, "predict")?;
    let input = cfg.input.as_ref().context("predict needs --input <image.gdt> holding a (1, 3, H, W) tensor")?;
    let model = require_checkpoint(cfg, "predict")?;
    let image = read_tensor(input).with_context(|| format!("reading {}", input.display()))?;
    let s = image.shape();
    ensure!(s.n == 1 && s.c == 3, "{}: expected a (1, 3, H, W) image, found {s}", input.display());
    let (h, w) = cfg.resolution;
    let x = if (s.h, s.w) == (h, w) { image } else { bilinear_forward(&image, h, w) };
    let depth = prediction_to_depth(&model.predict(&x)?, cfg.synth.d_max);
    let depth = if (s.h, s.w) == (h, w) { depth } else { bilinear_forward(&depth, s.h, s.w) };
    let out = cfg.run_dir.join("depth.gdt");
    fs::create_dir_all(&cfg.run_dir).with_context(|| format!("creating {}", cfg.run_dir.display()))?;
    write_tensor(&out, &depth)?;
    if cfg.preview {
        write_text(&cfg.run_dir.join("depth.pgm"), &pgm_preview(&depth))?;
    }
    Ok(out)
}

/// Benchmark a checkpoint, or a freshly initialised model of the configured
/// architecture.
pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport> {
    snapshot(cfg, "bench")?;
    let mut model = match cfg.checkpoint {
        Some(_) => require_checkpoint(cfg, "bench")?,
        None => Model::new(&cfg.model, cfg.seed)?,
    };
    calibrate(&mut model, cfg)?;
    let (h, w) = cfg.resolution;
    let report = benchmark(&model, h, w, cfg.bench_runs, cfg.bench_warmup, cfg.seed)?;
    write_text(&cfg.run_dir.join("bench.csv"), &format!("{BENCH_HEADER}\n{}\n", report.to_csv_row()))?;
    Ok(report)
}

/// One line of the guidance ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub guidance: String,
    pub branch: String,
    pub eval: EvalReport,
    pub bench: BenchReport,
}

pub const ABLATION_HEADER: &str = "guidance,branch,rmse,d1,d2,d3,latency_ms,params,macs";

impl AblationRow {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.3},{},{}",
            self.guidance,
            self.branch,
            self.eval.rmse,
            self.eval.delta1,
            self.eval.delta2,
            self.eval.delta3,
            self.bench.latency_mean_ms,
            self.bench.param_count,
            self.bench.mac_count
        )
    }
}

/// Train, evaluate and benchmark each guidance variant of the configured
/// model for `ablate_steps` steps on the same data.
pub fn run_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    snapshot(cfg, "ablate")?;
    let train_data = training_data(cfg)?;
    let eval_data = evaluation_data(cfg)?;
    let mut train_cfg = cfg.train_config();
    train_cfg.max_steps = Some(cfg.ablate_steps);
    train_cfg.checkpoint_dir = None;
    let (h, w) = cfg.resolution;
    let mut rows = Vec::new();
    for variant in ablation_variants(&cfg.model) {
        let (guidance, branch) = variant.variant_label();
        let mut model = Model::new(&variant, cfg.seed)?;
        if cfg.ablate_steps > 0 {
            train_with(&mut model, &cfg.loss, &train_cfg, &train_data, &mut |_| {})
                .with_context(|| format!("training {guidance}/{branch}"))?;
        }
        calibrate(&mut model, cfg)?;
        let eval = evaluate(&mut model, &eval_data, &cfg.eval_options())?;
        let bench = benchmark(&model, h, w, cfg.bench_runs, cfg.bench_warmup, cfg.seed)?;
        debug_assert_eq!(bench.mac_count, count_macs(&variant, h, w)?);
        rows.push(AblationRow { guidance, branch, eval, bench });
    }
    let mut csv = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        let _ = writeln!(csv, "{}", r.to_csv_row());
    }
    write_text(&cfg.run_dir.join("ablation.csv"), &csv)?;
    Ok(rows)
}

/// Write the configured synthetic scenes to `dataset` (or `<run_dir>/data`).
pub fn run_synth(cfg: &RunConfig) -> Result<PathBuf> {
    snapshot(cfg, "synth")?;
    let dir = cfg.dataset.clone().unwrap_or_else(|| cfg.run_dir.join("data"));
    let samples = generate_dataset(&cfg.synth, cfg.synth_count)?;
    write_dataset(&dir, &samples, &synth_seeds(cfg)).with_context(|| format!("writing {}", dir.display()))?;
    Ok(dir)
}

/// Fixed-width table for the terminal.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<10} {:<7} {:>8} {:>7} {:>7} {:>7} {:>11} {:>9} {:>12}\n",
        "guidance", "branch", "rmse", "d1", "d2", "d3", "latency_ms", "params", "macs"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:<7} {:>8.4} {:>7.4} {:>7.4} {:>7.4} {:>11.3} {:>9} {:>12}",
            r.guidance, r.branch, r.eval.rmse, r.eval.delta1, r.eval.delta2, r.eval.delta3, r.bench.latency_mean_ms,
            r.bench.param_count, r.bench.mac_count
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: &Path, extra: &str) -> RunConfig {
        let text = format!(
            "model = guidedepth-tiny\nresolution = 16x16\nsynth_count = 4\nbatch_size = 2\nmax_steps = 2\nlog_every = 0\nbench_runs = 2\nbench_warmup = 0\nrun_dir = {}\n{extra}",
            dir.display()
        );
        RunConfig::from_pairs(&parse_pairs(&text, Path::new("t")).unwrap()).unwrap()
    }

    #[test]
    fn train_then_eval_and_predict() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), "");
        let out = run_train(&c).unwrap();
        assert_eq!(out.history.steps.len(), 2);
        for f in ["train.config.txt", "history.csv", "train_eval.csv", "checkpoint/manifest.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }

        let with_ckpt = cfg(dir.path(), &format!("checkpoint = {}\n", out.checkpoint.display()));
        assert_eq!(run_eval(&with_ckpt).unwrap(), out.report);

        let image = Tensor::from_fn([1, 3, 24, 40], |_, c, y, x| ((c + y + x) % 7) as f32 / 6.0);
        let input = dir.path().join("in.gdt");
        write_tensor(&input, &image).unwrap();
        let c = cfg(dir.path(), &format!("checkpoint = {}\ninput = {}\n", out.checkpoint.display(), input.display()));
        let depth = read_tensor(run_predict(&c).unwrap()).unwrap();
        assert_eq!((depth.shape().h, depth.shape().w), (24, 40));
        let pgm = fs::read_to_string(dir.path().join("depth.pgm")).unwrap();
        assert!(pgm.starts_with("P2\n40 24\n255\n"));
        assert_eq!(pgm.lines().count(), 3 + 24);
    }

    #[test]
    fn missing_checkpoint_is_actionable() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_eval(&cfg(dir.path(), "")).unwrap_err();
        assert!(err.to_string().contains("--checkpoint"), "{err}");
        let c = cfg(dir.path(), "checkpoint = /nonexistent/ckpt\n");
        let err = format!("{:#}", run_eval(&c).unwrap_err());
        assert!(err.contains("/nonexistent/ckpt"), "{err}");
    }

    #[test]
    fn oracle_eval_matches_library() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), "synth_resolution = 32x48\noracle = true\n");
        let data = evaluation_data(&c).unwrap();
        let direct = evaluate(&mut OraclePredictor { samples: &data, d_max: 10.0 }, &data, &c.eval_options()).unwrap();
        assert_eq!(run_eval(&c).unwrap(), direct);
    }

    #[test]
    fn synth_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), "");
        let path = run_synth(&c).unwrap();
        assert_eq!(read_dataset(path).unwrap(), training_data(&c).unwrap());
    }

    #[test]
    fn preview_maps_near_to_white() {
        let d = Tensor::from_vec([1, 1, 1, 3], vec![1.0f32, 5.5, 10.0]).unwrap();
        assert_eq!(pgm_preview(&d), "P2\n3 1\n255\n255 128 0\n");
    }
}
