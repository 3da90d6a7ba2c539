//! Finite-difference oracle shared by the gradient and acceptance tests.
//!
//! Analytic gradients come from the tape in the precision under test; the
//! numeric reference is always a central difference evaluated in f64. The
//! function under test is reduced to a scalar by a fixed random projection,
//! so one check covers the full vector-Jacobian product.
#![allow(dead_code)]

use guidedepth::losses::{combined_loss, dssim_loss, grad_loss, l1_loss, GradNorm, LossConfig};
use guidedepth::nn::{laplacian_guidance_var, Graph, LaplacianMode, Layout, Model, ModelConfig, ParamSet, StatsSet};
use guidedepth::tensor::{BnMode, RunningStats};
use guidedepth::{Scalar, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL_F32: f64 = 1e-2;
pub const TOL_F64: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [11, 23, 37, 41, 59];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => TOL_F32,
            Precision::F64 => TOL_F64,
        }
    }
}

/// A differentiable computation over tape leaves, generic in precision.
pub trait OpFn {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Var;
}

/// `op!(|tape, v| body)` builds an [`OpFn`] from a body generic in `T`.
#[macro_export]
macro_rules! op {
    (|$tape:ident, $v:ident| $body:expr) => {{
        struct F;
        impl $crate::common::OpFn for F {
            fn eval<T: guidedepth::Scalar>(&self, $tape: &mut guidedepth::Tape<T>, $v: &[guidedepth::Var]) -> guidedepth::Var {
                #[allow(unused_imports)]
                use guidedepth::Scalar as _;
                $body
            }
        }
        F
    }};
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn rel_norm_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn projected<T: Scalar>(tape: &mut Tape<T>, out: Var, r: &Tensor<f64>) -> Var {
    let rv = tape.constant(r.cast());
    let prod = tape.mul(out, rv).expect("projection shape");
    tape.sum(prod).expect("finite projection")
}

fn scalar_loss<F: OpFn>(f: &F, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f.eval(&mut tape, &vars);
    let l = projected(&mut tape, out, r);
    tape.value(l).item()
}

fn analytic_grads<F: OpFn, T: Scalar>(f: &F, inputs: &[Tensor<f64>], wrt: &[bool], r: &Tensor<f64>) -> Vec<Option<Vec<f64>>> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().zip(wrt).map(|(t, &g)| tape.leaf(t.cast(), g)).collect();
    let out = f.eval(&mut tape, &vars);
    let l = projected(&mut tape, out, r);
    tape.backward(l).expect("backward");
    vars.iter()
        .zip(wrt)
        .map(|(v, &g)| g.then(|| tape.grad(*v).expect("gradient recorded").data().iter().map(|x| x.as_f64()).collect()))
        .collect()
}

/// Central-difference step for a coordinate with value `x`.
fn step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Largest relative error over the inputs flagged in `wrt`. At most
/// `max_coords` coordinates per input are differenced (all when smaller).
pub fn check_op<F: OpFn>(f: &F, inputs: &[Tensor<f64>], wrt: &[bool], seed: u64, precision: Precision, max_coords: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let shape = {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f.eval(&mut tape, &vars);
        tape.shape(out)
    };
    let r = random_tensor(&mut rng, shape, -1.0, 1.0);
    let grads = match precision {
        Precision::F32 => analytic_grads::<F, f32>(f, inputs, wrt, &r),
        Precision::F64 => analytic_grads::<F, f64>(f, inputs, wrt, &r),
    };
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let n = inputs[i].numel();
        let coords: Vec<usize> =
            if n <= max_coords { (0..n).collect() } else { (0..max_coords).map(|_| rng.random_range(0..n)).collect() };
        let mut a = Vec::with_capacity(coords.len());
        let mut num = Vec::with_capacity(coords.len());
        for &k in &coords {
            let mut probe = inputs.to_vec();
            let x = probe[i].data()[k];
            let h = step(x);
            probe[i].data_mut()[k] = x + h;
            let up = scalar_loss(f, &probe, &r);
            probe[i].data_mut()[k] = x - h;
            let down = scalar_loss(f, &probe, &r);
            num.push((up - down) / (2.0 * h));
            a.push(g[k]);
        }
        worst = worst.max(rel_norm_error(&a, &num));
    }
    worst
}

/// A network forward pass evaluated through a [`Graph`] in train mode.
pub trait NetFn {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Var;
}

fn net_loss<N: NetFn>(net: &N, params: &ParamSet<f64>, stats: &StatsSet<f64>, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> f64 {
    let mut stats = stats.clone();
    let mut g = Graph::train(params, &mut stats);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = net.forward(&mut g, &vars);
    let l = projected(&mut g.tape, out, r);
    g.tape.value(l).item()
}

fn net_grads<N: NetFn, T: Scalar>(
    net: &N,
    params: &ParamSet<f64>,
    stats: &StatsSet<f64>,
    inputs: &[Tensor<f64>],
    r: &Tensor<f64>,
) -> ParamSet<f64> {
    let params_t: ParamSet<T> = params.cast();
    let mut stats_t = guidedepth::nn::cast_stats::<f64, T>(stats);
    let mut g = Graph::train(&params_t, &mut stats_t);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.cast())).collect();
    let out = net.forward(&mut g, &vars);
    let l = projected(&mut g.tape, out, r);
    let grads = g.backward(l).expect("backward");
    let mut out = ParamSet::default();
    for (name, p) in params.iter() {
        let gt = grads.get(name).map(|t| t.cast()).unwrap_or_else(|| Tensor::zeros(p.shape()));
        out.insert(name.clone(), gt);
    }
    out
}

/// Central differences at two step sizes agree unless the probe crosses a
/// point where the function is not differentiable.
fn kink_free(coarse: f64, fine: f64) -> bool {
    (coarse - fine).abs() <= 1e-5 * coarse.abs().max(fine.abs()).max(1e-8)
}

/// Parameter-gradient check of a network: `coords` random coordinates
/// differenced one at a time plus `directions` random directional
/// derivatives through every parameter at once. Returns the worst error.
pub fn check_net<N: NetFn>(
    net: &N,
    layout: &Layout,
    inputs: &[Tensor<f64>],
    seed: u64,
    precision: Precision,
    coords: usize,
    directions: usize,
) -> f64 {
    let (params, stats) = layout.init::<f64>(seed);
    check_net_at(net, &params, &stats, inputs, seed, precision, coords, directions)
}

#[allow(clippy::too_many_arguments)]
pub fn check_net_at<N: NetFn>(
    net: &N,
    params: &ParamSet<f64>,
    stats: &StatsSet<f64>,
    inputs: &[Tensor<f64>],
    seed: u64,
    precision: Precision,
    coords: usize,
    directions: usize,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
    let shape = {
        let mut st = stats.clone();
        let mut g = Graph::train(params, &mut st);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = net.forward(&mut g, &vars);
        g.tape.shape(out)
    };
    let r = random_tensor(&mut rng, shape, -1.0, 1.0);
    let grads = match precision {
        Precision::F32 => net_grads::<N, f32>(net, params, stats, inputs, &r),
        Precision::F64 => net_grads::<N, f64>(net, params, stats, inputs, &r),
    };
    let names: Vec<String> = params.names().cloned().collect();

    let mut a = Vec::new();
    let mut num = Vec::new();
    let mut tries = 0;
    while a.len() < coords {
        tries += 1;
        assert!(tries <= 4 * coords, "finite differences unstable at most coordinates tried");
        let name = &names[rng.random_range(0..names.len())];
        let k = rng.random_range(0..params.get(name).unwrap().numel());
        let x = params.get(name).unwrap().data()[k];
        let central = |h: f64| {
            let mut probe = params.clone();
            probe.get_mut(name).unwrap().data_mut()[k] = x + h;
            let up = net_loss(net, &probe, stats, inputs, &r);
            probe.get_mut(name).unwrap().data_mut()[k] = x - h;
            (up - net_loss(net, &probe, stats, inputs, &r)) / (2.0 * h)
        };
        let h = step(x);
        let (coarse, fine) = (central(h), central(h / 10.0));
        // A shift that moves some pre-activation across zero straddles a
        // ReLU kink; the two step sizes then disagree. Skip such probes.
        if !kink_free(coarse, fine) {
            continue;
        }
        num.push(fine);
        a.push(grads.get(name).unwrap().data()[k]);
    }
    let mut worst = if coords > 0 { rel_norm_error(&a, &num) } else { 0.0 };

    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < directions {
        attempts += 1;
        assert!(attempts <= 10 * directions, "finite differences unstable in every direction tried");
        let mut dir = ParamSet::default();
        for (name, p) in params.iter() {
            dir.insert(name.clone(), random_tensor(&mut rng, p.shape(), -1.0, 1.0));
        }
        let norm = dir.iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v /= norm));
        let shifted = |delta: f64| {
            let mut p = params.clone();
            for (name, t) in p.iter_mut() {
                let d = dir.get(name).unwrap();
                t.data_mut().iter_mut().zip(d.data()).for_each(|(v, dv)| *v += delta * dv);
            }
            net_loss(net, &p, stats, inputs, &r)
        };
        let central = |h: f64| (shifted(h) - shifted(-h)) / (2.0 * h);
        let (coarse, fine) = (central(1e-5), central(1e-6));
        if !kink_free(coarse, fine) {
            continue;
        }
        let analytic: f64 = grads
            .iter()
            .map(|(name, g)| g.data().iter().zip(dir.get(name).unwrap().data()).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        worst = worst.max(rel_norm_error(&[analytic], &[fine]));
        accepted += 1;
    }
    worst
}

/// GuideDepth-tiny forward followed by the combined loss against a target.
pub struct ModelLoss {
    pub model: Model<f64>,
    pub loss: LossConfig,
}

impl NetFn for ModelLoss {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Var {
        let pred = self.model.arch.forward(g, inputs[0]).expect("forward");
        combined_loss(&mut g.tape, inputs[1], pred, &self.loss).expect("loss").total
    }
}

/// Worst gradient error of the full tiny model plus combined loss at
/// `h x w`, batch 2, for one seed.
pub fn check_model(config: &ModelConfig, seed: u64, precision: Precision, h: usize, w: usize, coords: usize, directions: usize) -> f64 {
    let model = Model::<f32>::new(config, seed).expect("model").cast::<f64>();
    let (params, stats) = (model.params.clone(), model.stats.clone());
    let net = ModelLoss { model, loss: LossConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..5 {
        let x = random_tensor(&mut rng, [2, 3, h, w], 0.0, 1.0);
        let y = random_tensor(&mut rng, [2, 1, h, w], 1.0, 10.0);
        let inputs = [x, y];
        // A pre-activation within rounding distance of zero can land on
        // opposite ReLU branches in f32 and f64; the f64 differences then
        // describe a different smooth piece than the f32 gradient.
        if precision == Precision::F32 && !same_relu_branches(&net, &params, &stats, &inputs) {
            continue;
        }
        return check_net_at(&net, &params, &stats, &inputs, seed, precision, coords, directions);
    }
    panic!("no input without f32/f64 ReLU branch disagreement");
}

/// Every ReLU takes the same branch in the f32 and f64 forward passes.
pub fn same_relu_branches<N: NetFn>(net: &N, params: &ParamSet<f64>, stats: &StatsSet<f64>, inputs: &[Tensor<f64>]) -> bool {
    fn signs<N: NetFn, T: Scalar>(net: &N, params: &ParamSet<f64>, stats: &StatsSet<f64>, inputs: &[Tensor<f64>]) -> Vec<bool> {
        let params_t: ParamSet<T> = params.cast();
        let mut stats_t = guidedepth::nn::cast_stats::<f64, T>(stats);
        let mut g = Graph::train(&params_t, &mut stats_t);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.cast())).collect();
        net.forward(&mut g, &vars);
        g.tape.relu_inputs().iter().flat_map(|t| t.data().iter().map(|v| *v > T::zero())).collect()
    }
    signs::<N, f32>(net, params, stats, inputs) == signs::<N, f64>(net, params, stats, inputs)
}

/// Every tape operation and loss term, each checked against central
/// differences. Returns `(name, worst relative error)`.
pub fn op_catalogue(seed: u64, precision: Precision) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rt = |shape: [usize; 4], lo: f64, hi: f64| random_tensor(&mut rng, shape, lo, hi);
    let all = usize::MAX;
    let mut out = Vec::new();
    let mut push = |name: &'static str, err: f64| out.push((name, err));

    let inputs = [rt([2, 3, 5, 6], -1.0, 1.0), rt([4, 3, 3, 3], -1.0, 1.0), rt([1, 4, 1, 1], -1.0, 1.0)];
    let f = op!(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap());
    push("conv2d 3x3 stride 1", check_op(&f, &inputs, &[true, true, true], seed, precision, all));

    let inputs = [rt([2, 2, 7, 8], -1.0, 1.0), rt([3, 2, 3, 3], -1.0, 1.0), rt([1, 3, 1, 1], -1.0, 1.0)];
    let f = op!(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap());
    push("conv2d 3x3 stride 2", check_op(&f, &inputs, &[true, true, true], seed, precision, all));

    let inputs = [rt([1, 4, 3, 3], -1.0, 1.0), rt([2, 4, 1, 1], -1.0, 1.0)];
    let f = op!(|t, v| t.conv2d(v[0], v[1], None, 1, 0).unwrap());
    push("conv2d 1x1", check_op(&f, &inputs, &[true, true], seed, precision, all));

    let inputs = [rt([3, 2, 3, 4], -1.0, 1.0), rt([1, 2, 1, 1], 0.5, 1.5), rt([1, 2, 1, 1], -0.5, 0.5)];
    let f = op!(|t, v| {
        let mut stats = RunningStats::<T>::new(2);
        t.batch_norm(v[0], v[1], v[2], BnMode::Train(&mut stats)).unwrap()
    });
    push("batch_norm train", check_op(&f, &inputs, &[true, true, true], seed, precision, all));

    let f = op!(|t, v| {
        let stats = RunningStats::<T> { mean: vec![T::of(0.1), T::of(-0.2)], var: vec![T::of(0.7), T::of(1.3)], initialized: true };
        t.batch_norm(v[0], v[1], v[2], BnMode::Eval(&stats)).unwrap()
    });
    push("batch_norm eval", check_op(&f, &inputs, &[true, true, true], seed, precision, all));

    let x = [rt([2, 3, 4, 5], -1.0, 1.0)];
    push("relu", check_op(&op!(|t, v| t.relu(v[0]).unwrap()), &x, &[true], seed, precision, all));
    push("sigmoid", check_op(&op!(|t, v| t.sigmoid(v[0]).unwrap()), &x, &[true], seed, precision, all));
    push("resize up", check_op(&op!(|t, v| t.resize(v[0], 8, 10).unwrap()), &x, &[true], seed, precision, all));
    push("resize down", check_op(&op!(|t, v| t.resize(v[0], 2, 3).unwrap()), &x, &[true], seed, precision, all));
    push("resize mixed", check_op(&op!(|t, v| t.resize(v[0], 7, 3).unwrap()), &x, &[true], seed, precision, all));
    push("scale", check_op(&op!(|t, v| t.scale(v[0], T::of(-1.7)).unwrap()), &x, &[true], seed, precision, all));
    push("global_avg_pool", check_op(&op!(|t, v| t.global_avg_pool(v[0]).unwrap()), &x, &[true], seed, precision, all));
    push("sum", check_op(&op!(|t, v| t.sum(v[0]).unwrap()), &x, &[true], seed, precision, all));
    push("mean", check_op(&op!(|t, v| t.mean(v[0]).unwrap()), &x, &[true], seed, precision, all));

    let pair = [rt([2, 3, 4, 5], -1.0, 1.0), rt([2, 3, 4, 5], -1.0, 1.0)];
    push("add", check_op(&op!(|t, v| t.add(v[0], v[1]).unwrap()), &pair, &[true, true], seed, precision, all));
    push("sub", check_op(&op!(|t, v| t.sub(v[0], v[1]).unwrap()), &pair, &[true, true], seed, precision, all));
    push("mul", check_op(&op!(|t, v| t.mul(v[0], v[1]).unwrap()), &pair, &[true, true], seed, precision, all));

    let cat = [rt([2, 3, 4, 5], -1.0, 1.0), rt([2, 2, 4, 5], -1.0, 1.0)];
    push("concat", check_op(&op!(|t, v| t.concat(v[0], v[1]).unwrap()), &cat, &[true, true], seed, precision, all));

    let dense = [rt([3, 5, 1, 1], -1.0, 1.0), rt([4, 5, 1, 1], -1.0, 1.0), rt([1, 4, 1, 1], -1.0, 1.0)];
    let f = op!(|t, v| t.dense(v[0], v[1], v[2]).unwrap());
    push("dense", check_op(&f, &dense, &[true, true, true], seed, precision, all));

    let cs = [rt([2, 3, 4, 5], -1.0, 1.0), rt([2, 3, 1, 1], -1.0, 1.0)];
    push("channel_scale", check_op(&op!(|t, v| t.channel_scale(v[0], v[1]).unwrap()), &cs, &[true, true], seed, precision, all));

    let img = [rt([2, 3, 16, 24], 0.0, 1.0)];
    let f = op!(|t, v| laplacian_guidance_var(t, v[0], 0, LaplacianMode::BandPass).unwrap());
    push("laplacian bandpass k=0", check_op(&f, &img, &[true], seed, precision, 200));
    let f = op!(|t, v| laplacian_guidance_var(t, v[0], 2, LaplacianMode::BandPass).unwrap());
    push("laplacian bandpass k=2", check_op(&f, &img, &[true], seed, precision, 200));
    let f = op!(|t, v| laplacian_guidance_var(t, v[0], 1, LaplacianMode::LowPass).unwrap());
    push("laplacian lowpass k=1", check_op(&f, &img, &[true], seed, precision, 200));

    let depth = [rt([2, 1, 13, 15], 1.0, 10.0), rt([2, 1, 13, 15], 1.0, 10.0)];
    push(
        "dssim loss",
        check_op(&op!(|t, v| dssim_loss(t, v[0], v[1], &LossConfig::default()).unwrap()), &depth, &[true, true], seed, precision, all),
    );
    push(
        "grad loss l1",
        check_op(&op!(|t, v| grad_loss(t, v[0], v[1], GradNorm::L1).unwrap()), &depth, &[true, true], seed, precision, all),
    );
    push(
        "grad loss l2",
        check_op(&op!(|t, v| grad_loss(t, v[0], v[1], GradNorm::L2).unwrap()), &depth, &[true, true], seed, precision, all),
    );
    push("l1 loss", check_op(&op!(|t, v| l1_loss(t, v[0], v[1]).unwrap()), &depth, &[true, true], seed, precision, all));
    push(
        "combined loss",
        check_op(
            &op!(|t, v| combined_loss(t, v[0], v[1], &LossConfig::default()).unwrap().total),
            &depth,
            &[true, true],
            seed,
            precision,
            all,
        ),
    );
    out
}
