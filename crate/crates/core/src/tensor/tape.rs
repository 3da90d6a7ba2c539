use super::kernels::{self, BnSaved};
use super::{Scalar, Shape, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for an operation defined outside this module.
pub trait Backward<T: Scalar> {
    /// Gradient for each input, in the order the inputs were recorded.
    /// `None` means the input receives no gradient from this op.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels], initialized: false }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Scalar>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|v| U::of(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::of(v.as_f64())).collect(),
            initialized: self.initialized,
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How a batch-norm node treats its statistics.
pub enum BnMode<'a, T> {
    /// Normalise with batch statistics and fold them into `stats`.
    Train(&'a mut RunningStats<T>),
    /// Normalise with `stats` only.
    Eval(&'a RunningStats<T>),
}

enum Op<T: Scalar> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    BnTrain { x: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    BnEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Relu(Var),
    Sigmoid(Var),
    Resize(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    GlobalAvgPool(Var),
    Dense { x: Var, w: Var, b: Var },
    ChannelScale { x: Var, gate: Var },
    Sum(Var),
    Mean(Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn Backward<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Eager recording of a forward pass, replayed in reverse by [`Tape::backward`].
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
    macs: Option<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite<T: Scalar>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false, macs: None }
    }

    /// A tape whose convolutions and dense layers run a reference kernel that
    /// counts every multiply-accumulate it performs.
    pub fn counting() -> Self {
        Tape { macs: Some(0), ..Self::new() }
    }

    pub fn macs(&self) -> Option<u64> {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inputs of every ReLU recorded so far, in recording order.
    pub fn relu_inputs(&self) -> Vec<&Tensor<T>> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .collect()
    }

    /// Gradient of the last backward's loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let nodes = &self.nodes;
        let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
        let bv = b.map(|b| &nodes[b.0].value);
        let out = match self.macs.as_mut() {
            Some(counter) => {
                let mut local = 0;
                let out = kernels::conv2d_counting(xv, wv, bv, stride, padding, &mut local)?;
                *counter += local;
                out
            }
            None => kernels::conv2d_forward(xv, wv, bv, stride, padding)?,
        };
        let out = finite("conv2d", out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, stride, padding }, &inputs))
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let vec_shape = Shape::vector(s.c);
        self.value(gamma).expect_shape(vec_shape)?;
        self.value(beta).expect_shape(vec_shape)?;
        let eps = T::of(BN_EPS);
        match mode {
            BnMode::Train(stats) => {
                if stats.channels() != s.c {
                    return Err(TensorError::ChannelMismatch { expected: stats.channels(), actual: s.c });
                }
                let (out, saved) = kernels::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps);
                let out = finite("batch_norm", out)?;
                let m = T::of(BN_MOMENTUM);
                let count = s.n * s.plane();
                let unbias = if count > 1 { T::of(count as f64 / (count - 1) as f64) } else { T::one() };
                for c in 0..s.c {
                    stats.mean[c] = (T::one() - m) * stats.mean[c] + m * saved.batch_mean[c];
                    stats.var[c] = (T::one() - m) * stats.var[c] + m * saved.batch_var[c] * unbias;
                }
                stats.initialized = true;
                Ok(self.push(out, Op::BnTrain { x, gamma, beta, saved }, &[x, gamma, beta]))
            }
            BnMode::Eval(stats) => {
                if !stats.initialized {
                    return Err(TensorError::UninitializedStats);
                }
                if stats.channels() != s.c {
                    return Err(TensorError::ChannelMismatch { expected: stats.channels(), actual: s.c });
                }
                let (out, inv_std) =
                    kernels::batch_norm_eval(self.value(x), self.value(gamma), self.value(beta), &stats.mean, &stats.var, eps);
                let out = finite("batch_norm", out)?;
                let op = Op::BnEval { x, gamma, beta, mean: stats.mean.clone(), inv_std };
                Ok(self.push(out, op, &[x, gamma, beta]))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(out, Op::Relu(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let out = finite("sigmoid", out)?;
        Ok(self.push(out, Op::Sigmoid(x), &[x]))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var, TensorError> {
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::InvalidDimension(format!("resize target {out_h}x{out_w}")));
        }
        let s = self.shape(x);
        if (s.h, s.w) == (out_h, out_w) {
            return Ok(x);
        }
        let out = kernels::bilinear_forward(self.value(x), out_h, out_w);
        Ok(self.push(out, Op::Resize(x), &[x]))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(TensorError::SpatialMismatch { a: sa, b: sb });
        }
        let out_shape = sa.with_channels(sa.c + sb.c);
        let mut data = Vec::with_capacity(out_shape.numel());
        let (per_a, per_b) = (sa.c * sa.plane(), sb.c * sb.plane());
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for n in 0..sa.n {
            data.extend_from_slice(&va[n * per_a..(n + 1) * per_a]);
            data.extend_from_slice(&vb[n * per_b..(n + 1) * per_b]);
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        finite(name, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, TensorError> {
        let out = finite("scale", self.value(x).map(|v| v * factor))?;
        Ok(self.push(out, Op::Scale(x, factor), &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let xv = self.value(x);
        let inv = T::one() / T::of(s.plane() as f64);
        let out = Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| xv.plane(n, c).iter().copied().sum::<T>() * inv);
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Affine map of a `(n, c_in, 1, 1)` channel vector by a `(c_out, c_in, 1, 1)` weight.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.h != 1 || xs.w != 1 {
            return Err(TensorError::InvalidDimension(format!("dense expects (n, c, 1, 1) input, got {xs}")));
        }
        if ws.h != 1 || ws.w != 1 {
            return Err(TensorError::InvalidDimension(format!("dense weight must be (out, in, 1, 1), got {ws}")));
        }
        if ws.c != xs.c {
            return Err(TensorError::ChannelMismatch { expected: ws.c, actual: xs.c });
        }
        self.value(b).expect_shape(Shape::vector(ws.n))?;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut data = Vec::with_capacity(xs.n * ws.n);
        let mut count = 0u64;
        for n in 0..xs.n {
            for o in 0..ws.n {
                let mut acc = bv[o];
                for i in 0..ws.c {
                    acc += wv[o * ws.c + i] * xv[n * xs.c + i];
                    count += 1;
                }
                data.push(acc);
            }
        }
        if let Some(m) = self.macs.as_mut() {
            *m += count;
        }
        let out = finite("dense", Tensor::from_vec(Shape::new(xs.n, ws.n, 1, 1), data)?)?;
        Ok(self.push(out, Op::Dense { x, w, b }, &[x, w, b]))
    }

    /// `x * gate` with the `(n, c, 1, 1)` gate broadcast over each plane.
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Result<Var, TensorError> {
        let (xs, gs) = (self.shape(x), self.shape(gate));
        let expected = Shape::new(xs.n, xs.c, 1, 1);
        if gs != expected {
            return Err(TensorError::ShapeMismatch { expected, actual: gs });
        }
        let (xv, gv) = (self.value(x), self.value(gate));
        let mut out = xv.clone();
        for n in 0..xs.n {
            for c in 0..xs.c {
                let k = gv.data()[n * xs.c + c];
                out.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
            }
        }
        let out = finite("channel_scale", out)?;
        Ok(self.push(out, Op::ChannelScale { x, gate }, &[x, gate]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = finite("sum", Tensor::scalar(self.value(x).sum()))?;
        Ok(self.push(out, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = finite("mean", Tensor::scalar(self.value(x).mean()))?;
        Ok(self.push(out, Op::Mean(x), &[x]))
    }

    /// Record an op computed elsewhere together with its backward rule.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        rule: Box<dyn Backward<T>>,
    ) -> Result<Var, TensorError> {
        let value = finite(name, value)?;
        Ok(self.push(value, Op::Custom { inputs: inputs.to_vec(), rule }, inputs))
    }

    /// Propagate `d loss / d v` to every node that requires a gradient.
    ///
    /// Afterwards every trainable leaf holds a gradient (zeros when the loss
    /// does not depend on it) and the tape refuses a second backward.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let ls = self.shape(loss);
        if ls != Shape::SCALAR {
            return Err(TensorError::NonScalarLoss(ls));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, gi) in self.input_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&gi),
                    None => grads[input.0] = Some(gi),
                }
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn input_grads(&self, idx: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride, padding } => {
                let grads = kernels::conv2d_backward(val(*x), val(*w), g, *stride, *padding, needs(*x));
                if let Some(gx) = grads.input {
                    out.push((*x, gx));
                }
                out.push((*w, grads.weight));
                if let Some(b) = b {
                    out.push((*b, grads.bias));
                }
            }
            Op::BnTrain { x, gamma, beta, saved } => {
                let (gx, gg, gb) = kernels::batch_norm_train_backward(g, val(*gamma), saved);
                out.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
            }
            Op::BnEval { x, gamma, beta, mean, inv_std } => {
                let xv = val(*x);
                let s = xv.shape();
                let gam = val(*gamma).data();
                let mut gx = Tensor::zeros(s);
                let mut gg = Tensor::zeros(Shape::vector(s.c));
                let mut gb = Tensor::zeros(Shape::vector(s.c));
                for n in 0..s.n {
                    for c in 0..s.c {
                        let k = inv_std[c];
                        let (mut sg, mut sgx) = (T::zero(), T::zero());
                        for ((d, &gv), &v) in gx.plane_mut(n, c).iter_mut().zip(g.plane(n, c)).zip(xv.plane(n, c)) {
                            *d = gv * gam[c] * k;
                            sg += gv;
                            sgx += gv * (v - mean[c]) * k;
                        }
                        gg.data_mut()[c] += sgx;
                        gb.data_mut()[c] += sg;
                    }
                }
                out.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
            }
            Op::Relu(x) => {
                let gx = g.zip_map(val(*x), |gv, v| if v > T::zero() { gv } else { T::zero() }).expect("relu shapes");
                out.push((*x, gx));
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gv, s| gv * s * (T::one() - s)).expect("sigmoid shapes");
                out.push((*x, gx));
            }
            Op::Resize(x) => out.push((*x, kernels::bilinear_backward(g, val(*x).shape()))),
            Op::Concat(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (per_a, per_b) = (sa.c * sa.plane(), sb.c * sb.plane());
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                for chunk in g.data().chunks(per_a + per_b) {
                    ga.extend_from_slice(&chunk[..per_a]);
                    gb.extend_from_slice(&chunk[per_a..]);
                }
                out.push((*a, Tensor::from_vec(sa, ga).expect("concat split")));
                if sb.c > 0 {
                    out.push((*b, Tensor::from_vec(sb, gb).expect("concat split")));
                }
            }
            Op::Add(a, b) => out.extend([(*a, g.clone()), (*b, g.clone())]),
            Op::Sub(a, b) => out.extend([(*a, g.clone()), (*b, g.map(|v| -v))]),
            Op::Mul(a, b) => {
                out.push((*a, g.zip_map(val(*b), |gv, v| gv * v).expect("mul shapes")));
                out.push((*b, g.zip_map(val(*a), |gv, v| gv * v).expect("mul shapes")));
            }
            Op::Scale(x, k) => out.push((*x, g.map(|v| v * *k))),
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let inv = T::one() / T::of(s.plane() as f64);
                out.push((*x, Tensor::from_fn(s, |n, c, _, _| g.data()[n * s.c + c] * inv)));
            }
            Op::Dense { x, w, b } => {
                let (xs, ws) = (val(*x).shape(), val(*w).shape());
                let (xv, wv, gv) = (val(*x).data(), val(*w).data(), g.data());
                let mut gx = Tensor::zeros(xs);
                let mut gw = Tensor::zeros(ws);
                let mut gb = Tensor::zeros(Shape::vector(ws.n));
                for n in 0..xs.n {
                    for o in 0..ws.n {
                        let go = gv[n * ws.n + o];
                        gb.data_mut()[o] += go;
                        for i in 0..ws.c {
                            gw.data_mut()[o * ws.c + i] += go * xv[n * xs.c + i];
                            gx.data_mut()[n * xs.c + i] += go * wv[o * ws.c + i];
                        }
                    }
                }
                out.extend([(*x, gx), (*w, gw), (*b, gb)]);
            }
            Op::ChannelScale { x, gate } => {
                let (xv, gtv) = (val(*x), val(*gate));
                let s = xv.shape();
                let mut gx = g.clone();
                let mut gg = Tensor::zeros(gtv.shape());
                for n in 0..s.n {
                    for c in 0..s.c {
                        let k = gtv.data()[n * s.c + c];
                        gx.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
                        gg.data_mut()[n * s.c + c] =
                            g.plane(n, c).iter().zip(xv.plane(n, c)).map(|(&a, &b)| a * b).sum();
                    }
                }
                out.extend([(*x, gx), (*gate, gg)]);
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), g.item()))),
            Op::Mean(x) => {
                let xv = val(*x);
                out.push((*x, Tensor::full(xv.shape(), g.item() / T::of(xv.numel() as f64))));
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                for (v, gi) in inputs.iter().zip(rule.backward(&ins, &node.value, g)) {
                    if let Some(gi) = gi {
                        out.push((*v, gi));
                    }
                }
            }
        }
        out
    }
}
