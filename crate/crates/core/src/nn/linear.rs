use ndarray::{Array2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, Module, Param, ParamVisitor, StateVisitor};

/// Fully connected layer on `[batch, features]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    input: Array2<f32>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        Self {
            weight: Param::uniform(&[outputs, inputs], bound, rng),
            bias: Param::uniform(&[outputs], bound, rng),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LinearCache) {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D");
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-D");
        let y = x.dot(&w.t()) + b;
        (y, LinearCache { input: x.to_owned() })
    }

    pub fn backward(&mut self, cache: &LinearCache, dy: &Array2<f32>) -> Array2<f32> {
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
            gw += &dy.t().dot(&cache.input);
        }
        self.bias.grad += &dy.sum_axis(Axis(0)).into_dyn();
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D");
        dy.dot(&w)
    }
}

impl Module for Linear {
    fn visit_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        v.param(&join(prefix, "bias"), &mut self.bias);
    }

    fn visit(&self, prefix: &str, v: &mut dyn StateVisitor) {
        v.tensor(&join(prefix, "weight"), &self.weight.value);
        v.tensor(&join(prefix, "bias"), &self.bias.value);
    }
}
