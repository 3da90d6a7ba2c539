//! Building blocks shared by encoder and decoder.

use super::graph::Graph;
use super::params::{Init, Layout};
use super::ModelError;
use crate::tensor::kernels::conv_out_dim;
use crate::tensor::{Scalar, Shape, TensorError, Var};

fn conv_params(layout: &mut Layout, name: &str, c_out: usize, c_in: usize, k: usize) {
    layout.param(format!("{name}.weight"), Shape::new(c_out, c_in, k, k), Init::Kaiming { fan_in: c_in * k * k });
    layout.param(format!("{name}.bias"), Shape::vector(c_out), Init::Zeros);
}

fn bn_params(layout: &mut Layout, name: &str, c: usize) {
    layout.param(format!("{name}.gamma"), Shape::vector(c), Init::Ones);
    layout.param(format!("{name}.beta"), Shape::vector(c), Init::Zeros);
    layout.stat(name, c);
}

fn check_channels(expected: usize, actual: usize) -> Result<(), ModelError> {
    if expected != actual {
        return Err(TensorError::ChannelMismatch { expected, actual }.into());
    }
    Ok(())
}

/// conv3x3 -> BN -> ReLU -> conv1x1 -> BN -> ReLU.
///
/// With `stride == 1` spatial dims are preserved; the encoder uses stride 2
/// on the 3x3 convolution to halve them.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedConv {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl StackedConv {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        StackedConv { name: name.into(), c_in, c_out, stride: 1 }
    }

    pub fn strided(name: impl Into<String>, c_in: usize, c_out: usize, stride: usize) -> Self {
        StackedConv { name: name.into(), c_in, c_out, stride }
    }

    pub fn layout(&self, layout: &mut Layout) {
        let n = &self.name;
        conv_params(layout, &format!("{n}.conv3"), self.c_out, self.c_in, 3);
        bn_params(layout, &format!("{n}.bn3"), self.c_out);
        conv_params(layout, &format!("{n}.conv1"), self.c_out, self.c_out, 1);
        bn_params(layout, &format!("{n}.bn1"), self.c_out);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, ModelError> {
        check_channels(self.c_in, g.tape.shape(x).c)?;
        let n = &self.name;
        let h = g.conv(&format!("{n}.conv3"), x, self.stride, 1)?;
        let h = g.batch_norm(&format!("{n}.bn3"), h)?;
        let h = g.tape.relu(h)?;
        let h = g.conv(&format!("{n}.conv1"), h, 1, 0)?;
        let h = g.batch_norm(&format!("{n}.bn1"), h)?;
        Ok(g.tape.relu(h)?)
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let d = |v| conv_out_dim(v, 3, self.stride, 1).unwrap_or(0);
        (d(h), d(w))
    }

    /// Multiply-accumulates for one sample at input resolution `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_dims(h, w);
        let px = (ho * wo) as u64;
        (9 * self.c_in * self.c_out) as u64 * px + (self.c_out * self.c_out) as u64 * px
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Debug, Clone, PartialEq)]
pub struct SeGate {
    pub name: String,
    pub channels: usize,
    pub hidden: usize,
}

impl SeGate {
    /// Bottleneck of `channels / reduction`; the reduction must divide the
    /// channel count.
    pub fn new(name: impl Into<String>, channels: usize, reduction: usize) -> Result<Self, ModelError> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(TensorError::Indivisible(format!("SE channel count {channels}"), reduction).into());
        }
        Ok(SeGate { name: name.into(), channels, hidden: channels / reduction })
    }

    pub fn with_hidden(name: impl Into<String>, channels: usize, hidden: usize) -> Self {
        SeGate { name: name.into(), channels, hidden: hidden.max(1) }
    }

    pub fn layout(&self, layout: &mut Layout) {
        let n = &self.name;
        let (c, h) = (self.channels, self.hidden);
        layout.param(format!("{n}.squeeze.weight"), Shape::new(h, c, 1, 1), Init::Kaiming { fan_in: c });
        layout.param(format!("{n}.squeeze.bias"), Shape::vector(h), Init::Zeros);
        layout.param(format!("{n}.excite.weight"), Shape::new(c, h, 1, 1), Init::Kaiming { fan_in: h });
        layout.param(format!("{n}.excite.bias"), Shape::vector(c), Init::Zeros);
    }

    /// `x * sigmoid(excite(relu(squeeze(pool(x)))))`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, ModelError> {
        check_channels(self.channels, g.tape.shape(x).c)?;
        let n = &self.name;
        let s = g.tape.global_avg_pool(x)?;
        let s = g.dense(&format!("{n}.squeeze"), s)?;
        let s = g.tape.relu(s)?;
        let s = g.dense(&format!("{n}.excite"), s)?;
        let gate = g.tape.sigmoid(s)?;
        Ok(g.tape.channel_scale(x, gate)?)
    }

    pub fn macs(&self) -> u64 {
        2 * (self.channels * self.hidden) as u64
    }
}

/// Plain 1x1 convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointwise {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl Pointwise {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Pointwise { name: name.into(), c_in, c_out }
    }

    pub fn layout(&self, layout: &mut Layout) {
        conv_params(layout, &self.name, self.c_out, self.c_in, 1);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, ModelError> {
        check_channels(self.c_in, g.tape.shape(x).c)?;
        g.conv(&self.name, x, 1, 0)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.c_in * self.c_out * h * w) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn build(layout_fn: impl Fn(&mut Layout)) -> (super::super::ParamSet<f64>, super::super::StatsSet<f64>) {
        let mut layout = Layout::default();
        layout_fn(&mut layout);
        layout.init(7)
    }

    #[test]
    fn stacked_conv_preserves_spatial_dims() {
        let block = StackedConv::new("s", 3, 4);
        let (params, mut stats) = build(|l| block.layout(l));
        let mut g = Graph::train(&params, &mut stats);
        let x = g.input(Tensor::from_fn([1, 3, 8, 8], |_, c, y, x| (c + y * x) as f64 * 0.1));
        let y = block.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(y), Shape::new(1, 4, 8, 8));
    }

    #[test]
    fn stacked_conv_zero_affine_gives_zero() {
        let block = StackedConv::new("s", 2, 3);
        let (mut params, mut stats) = build(|l| block.layout(l));
        for (name, t) in params.iter_mut() {
            if name.ends_with("gamma") || name.ends_with("beta") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::train(&params, &mut stats);
        let x = g.input(Tensor::from_fn([2, 2, 5, 5], |n, c, y, x| (n + c) as f64 - (y * x) as f64 * 0.3));
        let y = block.forward(&mut g, x).unwrap();
        assert!(g.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stacked_conv_channel_mismatch() {
        let block = StackedConv::new("s", 3, 4);
        let (params, mut stats) = build(|l| block.layout(l));
        let mut g = Graph::train(&params, &mut stats);
        let x = g.input(Tensor::ones([1, 2, 4, 4]));
        assert!(matches!(block.forward(&mut g, x), Err(ModelError::Tensor(TensorError::ChannelMismatch { .. }))));
    }

    #[test]
    fn se_gate_half_when_logits_zero() {
        let se = SeGate::new("se", 8, 4).unwrap();
        let (mut params, mut stats) = build(|l| se.layout(l));
        params.get_mut("se.excite.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let input = Tensor::from_fn([2, 8, 3, 3], |n, c, y, x| (n * 3 + c) as f64 - (y + x) as f64);
        let mut g = Graph::train(&params, &mut stats);
        let x = g.input(input.clone());
        let y = se.forward(&mut g, x).unwrap();
        let expected = input.map(|v| 0.5 * v);
        assert!(g.tape.value(y).max_abs_diff(&expected) < 1e-15);

        let mut g = Graph::train(&params, &mut stats);
        let x = g.input(Tensor::zeros([1, 8, 3, 3]));
        let y = se.forward(&mut g, x).unwrap();
        assert!(g.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_gate_rejects_indivisible_channels() {
        assert!(matches!(SeGate::new("se", 7, 4), Err(ModelError::Tensor(TensorError::Indivisible(..)))));
        assert_eq!(SeGate::with_hidden("se", 7, 2).hidden, 2);
    }

    #[test]
    fn se_gate_never_amplifies() {
        let se = SeGate::new("se", 4, 2).unwrap();
        for seed in 0..20 {
            let mut layout = Layout::default();
            se.layout(&mut layout);
            let (params, mut stats) = layout.init::<f64>(seed);
            let input = Tensor::from_fn([1, 4, 3, 3], |_, c, y, x| ((seed as usize + c * 5 + y * 3 + x) % 7) as f64 - 3.0);
            let mut g = Graph::train(&params, &mut stats);
            let x = g.input(input.clone());
            let y = se.forward(&mut g, x).unwrap();
            let out = g.tape.value(y);
            for c in 0..4 {
                let a: f64 = out.plane(0, c).iter().map(|v| v.abs()).sum();
                let b: f64 = input.plane(0, c).iter().map(|v| v.abs()).sum();
                assert!(a <= b);
            }
        }
    }

    #[test]
    fn stacked_conv_macs() {
        let block = StackedConv::strided("s", 3, 8, 2);
        assert_eq!(block.out_dims(48, 64), (24, 32));
        assert_eq!(block.macs(48, 64), (9 * 3 * 8 + 64) as u64 * 24 * 32);
    }
}
