use super::blocks::StackedConv;
use super::graph::Graph;
use super::params::Layout;
use super::ModelError;
use crate::tensor::{Scalar, Var};

/// Three stride-2 stacked convolutions: `3 -> w -> 2w -> F` at 1/8 resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub stages: [StackedConv; 3],
}

impl Encoder {
    pub fn new(width: usize, out_channels: usize) -> Self {
        let widths = [3, width, 2 * width, out_channels];
        Encoder { stages: std::array::from_fn(|i| StackedConv::strided(format!("encoder.stage{i}"), widths[i], widths[i + 1], 2)) }
    }

    pub fn out_channels(&self) -> usize {
        self.stages[2].c_out
    }

    pub fn layout(&self, layout: &mut Layout) {
        self.stages.iter().for_each(|s| s.layout(layout));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, ModelError> {
        let s = g.tape.shape(x);
        if !s.h.is_multiple_of(8) || !s.w.is_multiple_of(8) {
            return Err(ModelError::IndivisibleDims { h: s.h, w: s.w });
        }
        let mut h = x;
        for stage in &self.stages {
            h = stage.forward(g, h)?;
        }
        Ok(h)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (mut h, mut w) = (h, w);
        let mut total = 0;
        for stage in &self.stages {
            total += stage.macs(h, w);
            (h, w) = stage.out_dims(h, w);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn reaches_one_eighth_resolution() {
        let enc = Encoder::new(8, 32);
        let mut layout = Layout::default();
        enc.layout(&mut layout);
        let (params, mut stats) = layout.init::<f32>(0);
        let mut g = Graph::train(&params, &mut stats);
        let x = g.input(Tensor::from_fn([1, 3, 48, 64], |_, c, y, x| ((c + y + x) % 5) as f32 * 0.2));
        let y = enc.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(y), Shape::new(1, 32, 6, 8));
    }

    #[test]
    fn rejects_indivisible_input() {
        let enc = Encoder::new(4, 8);
        let mut layout = Layout::default();
        enc.layout(&mut layout);
        let (params, mut stats) = layout.init::<f32>(0);
        let mut g = Graph::train(&params, &mut stats);
        let x = g.input(Tensor::ones([1, 3, 20, 64]));
        assert!(matches!(enc.forward(&mut g, x), Err(ModelError::IndivisibleDims { h: 20, w: 64 })));
    }

    #[test]
    fn deterministic_under_seed() {
        let enc = Encoder::new(4, 8);
        let mut layout = Layout::default();
        enc.layout(&mut layout);
        let out = |seed| {
            let (params, mut stats) = layout.init::<f32>(seed);
            let mut g = Graph::train(&params, &mut stats);
            let x = g.input(Tensor::from_fn([2, 3, 16, 16], |n, c, y, x| ((n + c * y + x) % 7) as f32 * 0.1));
            let y = enc.forward(&mut g, x).unwrap();
            g.tape.value(y).clone()
        };
        assert_eq!(out(3).data(), out(3).data());
        assert_ne!(out(3).data(), out(4).data());
    }
}
