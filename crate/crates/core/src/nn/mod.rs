//! Minimal neural-network layers with explicit backward passes.
//!
//! Activations inside an extractor use the channel-major layout
//! `[channels, batch, time]` so that a convolution is one GEMM over the whole
//! batch. Forward calls return a cache object and never mutate the layer
//! (except batch-norm running statistics), so one layer can be evaluated
//! several times before the matching backward calls. Gradients accumulate
//! into [`Param::grad`] until [`Module::zero_grad`] is called.

mod adam;
mod batchnorm;
mod conv;
mod linear;
mod resnet;

pub use adam::Adam;
pub use batchnorm::{BatchNorm1d, BatchNormCache};
pub use conv::{Conv1d, Conv1dCache};
pub use linear::{Linear, LinearCache};
pub use resnet::{ExtractorConfig, ResBlock, ResNet1d, ResNetCache};

use ndarray::{Array, ArrayD, Dimension, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new<D: Dimension>(value: Array<f32, D>) -> Self {
        let value = value.into_dyn();
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    /// Uniform in `[-bound, bound]`, the default fan-in init of common frameworks.
    pub fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Self {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..=bound));
        Self::new(value)
    }
}

pub trait ParamVisitor {
    fn param(&mut self, name: &str, param: &mut Param);
    fn buffer(&mut self, _name: &str, _buffer: &mut ArrayD<f32>) {}
}

pub trait StateVisitor {
    fn tensor(&mut self, name: &str, tensor: &ArrayD<f32>);
}

pub trait Module {
    fn visit_mut(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor);
    fn visit(&self, prefix: &str, visitor: &mut dyn StateVisitor);

    fn zero_grad(&mut self) {
        struct Zero;
        impl ParamVisitor for Zero {
            fn param(&mut self, _: &str, p: &mut Param) {
                p.grad.fill(0.0);
            }
        }
        self.visit_mut("", &mut Zero);
    }

    fn num_params(&self) -> usize {
        struct Count(usize);
        impl StateVisitor for Count {
            fn tensor(&mut self, _: &str, t: &ArrayD<f32>) {
                self.0 += t.len();
            }
        }
        let mut c = Count(0);
        self.visit("", &mut c);
        c.0
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A tensor stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn from_array(a: &ArrayD<f32>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }
}

pub fn relu<D: Dimension>(x: &mut Array<f32, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks `grad` where the forward output `y` was clamped.
pub fn relu_backward<D: Dimension>(y: &Array<f32, D>, grad: &mut Array<f32, D>) {
    ndarray::Zip::from(grad).and(y).for_each(|g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
}
