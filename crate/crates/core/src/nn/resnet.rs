use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    join, relu, relu_backward, BatchNorm1d, BatchNormCache, Conv1d, Conv1dCache, Linear, LinearCache, Module,
    ParamVisitor, StateVisitor,
};

/// Shape of the residual 1-D extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub stem_kernel: usize,
    pub block_kernel: usize,
    /// Channel width of each residual stage; stages after the first halve
    /// the time resolution.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            stem_kernel: 9,
            block_kernel: 5,
            widths: vec![64, 128, 256],
            blocks_per_stage: 2,
        }
    }
}

impl ExtractorConfig {
    /// Desk-scale variant used by the synthetic experiments.
    pub fn small() -> Self {
        Self {
            widths: vec![16, 32, 64],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(crate::Error::Config("extractor widths must be non-empty and positive".into()));
        }
        if self.stem_kernel.is_multiple_of(2) || self.block_kernel.is_multiple_of(2) {
            return Err(crate::Error::Config("extractor kernels must be odd".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(crate::Error::Config("blocks_per_stage must be >= 1".into()));
        }
        Ok(())
    }
}

/// Basic residual block: conv-bn-relu-conv-bn plus a (projected) shortcut.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv1d,
    bn1: BatchNorm1d,
    conv2: Conv1d,
    bn2: BatchNorm1d,
    shortcut: Option<(Conv1d, BatchNorm1d)>,
}

#[derive(Debug, Clone)]
struct ResBlockCache {
    c1: Conv1dCache,
    b1: BatchNormCache,
    h1: Array3<f32>,
    c2: Conv1dCache,
    b2: BatchNormCache,
    short: Option<(Conv1dCache, BatchNormCache)>,
    out: Array3<f32>,
}

impl ResBlock {
    fn new(inputs: usize, outputs: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let pad = kernel / 2;
        let shortcut = (stride != 1 || inputs != outputs)
            .then(|| (Conv1d::new(inputs, outputs, 1, stride, 0, false, rng), BatchNorm1d::new(outputs)));
        Self {
            conv1: Conv1d::new(inputs, outputs, kernel, stride, pad, false, rng),
            bn1: BatchNorm1d::new(outputs),
            conv2: Conv1d::new(outputs, outputs, kernel, 1, pad, false, rng),
            bn2: BatchNorm1d::new(outputs),
            shortcut,
        }
    }

    fn forward(&mut self, x: &Array3<f32>, train: bool) -> (Array3<f32>, ResBlockCache) {
        let (h, c1) = self.conv1.forward(x);
        let (mut h1, b1) = self.bn1.forward(&h, train);
        relu(&mut h1);
        let (h, c2) = self.conv2.forward(&h1);
        let (mut out, b2) = self.bn2.forward(&h, train);
        let short = match &mut self.shortcut {
            Some((conv, bn)) => {
                let (s, cc) = conv.forward(x);
                let (s, bc) = bn.forward(&s, train);
                out += &s;
                Some((cc, bc))
            }
            None => {
                out += x;
                None
            }
        };
        relu(&mut out);
        let cache = ResBlockCache {
            c1,
            b1,
            h1,
            c2,
            b2,
            short,
            out: out.clone(),
        };
        (out, cache)
    }

    fn infer(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut h1 = self.bn1.infer(&self.conv1.forward(x).0);
        relu(&mut h1);
        let mut out = self.bn2.infer(&self.conv2.forward(&h1).0);
        match &self.shortcut {
            Some((conv, bn)) => out += &bn.infer(&conv.forward(x).0),
            None => out += x,
        }
        relu(&mut out);
        out
    }

    fn backward(&mut self, cache: &ResBlockCache, dy: &Array3<f32>) -> Array3<f32> {
        let mut d = dy.to_owned();
        relu_backward(&cache.out, &mut d);
        let mut dx = match (&mut self.shortcut, &cache.short) {
            (Some((conv, bn)), Some((cc, bc))) => {
                let ds = bn.backward(bc, &d);
                conv.backward(cc, &ds, true).expect("input grad")
            }
            _ => d.clone(),
        };
        let dh = self.bn2.backward(&cache.b2, &d);
        let mut dh1 = self.conv2.backward(&cache.c2, &dh, true).expect("input grad");
        relu_backward(&cache.h1, &mut dh1);
        let dh = self.bn1.backward(&cache.b1, &dh1);
        dx += &self.conv1.backward(&cache.c1, &dh, true).expect("input grad");
        dx
    }
}

impl Module for ResBlock {
    fn visit_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.conv1.visit_mut(&join(prefix, "conv1"), v);
        self.bn1.visit_mut(&join(prefix, "bn1"), v);
        self.conv2.visit_mut(&join(prefix, "conv2"), v);
        self.bn2.visit_mut(&join(prefix, "bn2"), v);
        if let Some((c, b)) = &mut self.shortcut {
            c.visit_mut(&join(prefix, "short_conv"), v);
            b.visit_mut(&join(prefix, "short_bn"), v);
        }
    }

    fn visit(&self, prefix: &str, v: &mut dyn StateVisitor) {
        self.conv1.visit(&join(prefix, "conv1"), v);
        self.bn1.visit(&join(prefix, "bn1"), v);
        self.conv2.visit(&join(prefix, "conv2"), v);
        self.bn2.visit(&join(prefix, "bn2"), v);
        if let Some((c, b)) = &self.shortcut {
            c.visit(&join(prefix, "short_conv"), v);
            b.visit(&join(prefix, "short_bn"), v);
        }
    }
}

/// Residual 1-D convolutional feature extractor.
///
/// stem conv, residual stages, global average pooling over time, a linear
/// map to the feature dimension, and a final ReLU so that every feature
/// vector is non-negative.
#[derive(Debug, Clone)]
pub struct ResNet1d {
    stem: Conv1d,
    stem_bn: BatchNorm1d,
    blocks: Vec<ResBlock>,
    head: Linear,
    in_channels: usize,
}

#[derive(Debug, Clone)]
pub struct ResNetCache {
    stem: Conv1dCache,
    stem_bn: BatchNormCache,
    stem_out: Array3<f32>,
    blocks: Vec<ResBlockCache>,
    pooled_len: usize,
    head: LinearCache,
    z: Array2<f32>,
}

impl ResNet1d {
    pub fn new(in_channels: usize, cfg: &ExtractorConfig, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let first = cfg.widths[0];
        let stem = Conv1d::new(in_channels, first, cfg.stem_kernel, 1, cfg.stem_kernel / 2, false, rng);
        let mut blocks = Vec::new();
        let mut width = first;
        for (stage, &w) in cfg.widths.iter().enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(width, w, cfg.block_kernel, stride, rng));
                width = w;
            }
        }
        Self {
            stem,
            stem_bn: BatchNorm1d::new(first),
            blocks,
            head: Linear::new(width, feature_dim, rng),
            in_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn feature_dim(&self) -> usize {
        self.head.out_features()
    }

    /// `x` is `[channels, batch, time]`; returns `[batch, feature_dim]`.
    pub fn forward(&mut self, x: &Array3<f32>, train: bool) -> (Array2<f32>, ResNetCache) {
        let (h, stem) = self.stem.forward(x);
        let (mut h, stem_bn) = self.stem_bn.forward(&h, train);
        relu(&mut h);
        let stem_out = h.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (next, c) = block.forward(&h, train);
            caches.push(c);
            h = next;
        }
        let pooled_len = h.dim().2;
        let pooled = h.mean_axis(Axis(2)).expect("non-empty time axis").reversed_axes();
        let pooled = pooled.as_standard_layout().into_owned();
        let (mut z, head) = self.head.forward(&pooled);
        relu(&mut z);
        let cache = ResNetCache {
            stem,
            stem_bn,
            stem_out,
            blocks: caches,
            pooled_len,
            head,
            z: z.clone(),
        };
        (z, cache)
    }

    /// Inference-mode forward (running statistics, no caches).
    pub fn infer(&self, x: &Array3<f32>) -> Array2<f32> {
        let mut h = self.stem_bn.infer(&self.stem.forward(x).0);
        relu(&mut h);
        for block in &self.blocks {
            h = block.infer(&h);
        }
        let pooled = h.mean_axis(Axis(2)).expect("non-empty time axis").reversed_axes();
        let mut z = self.head.forward(&pooled.as_standard_layout().into_owned()).0;
        relu(&mut z);
        z
    }

    pub fn backward(&mut self, cache: &ResNetCache, dz: &Array2<f32>) {
        let mut d = dz.to_owned();
        relu_backward(&cache.z, &mut d);
        let dpool = self.head.backward(&cache.head, &d);
        let (b, c) = dpool.dim();
        let l = cache.pooled_len;
        let mut dh = Array3::<f32>::zeros((c, b, l));
        for ((ci, bi, _), v) in dh.indexed_iter_mut() {
            *v = dpool[[bi, ci]] / l as f32;
        }
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dh = block.backward(bc, &dh);
        }
        relu_backward(&cache.stem_out, &mut dh);
        let dh = self.stem_bn.backward(&cache.stem_bn, &dh);
        self.stem.backward(&cache.stem, &dh, false);
    }
}

impl Module for ResNet1d {
    fn visit_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.stem.visit_mut(&join(prefix, "stem"), v);
        self.stem_bn.visit_mut(&join(prefix, "stem_bn"), v);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), v);
        }
        self.head.visit_mut(&join(prefix, "fc"), v);
    }

    fn visit(&self, prefix: &str, v: &mut dyn StateVisitor) {
        self.stem.visit(&join(prefix, "stem"), v);
        self.stem_bn.visit(&join(prefix, "stem_bn"), v);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), v);
        }
        self.head.visit(&join(prefix, "fc"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use crate::rng::stream_rng;
    use ndarray::Array;

    fn tiny() -> ExtractorConfig {
        ExtractorConfig {
            stem_kernel: 3,
            block_kernel: 3,
            widths: vec![4, 6],
            blocks_per_stage: 1,
        }
    }

    #[test]
    fn output_shape_and_sign() {
        let mut rng = stream_rng(0, "resnet");
        let mut net = ResNet1d::new(3, &ExtractorConfig::small(), 64, &mut rng);
        let x = Array::from_shape_simple_fn((3, 5, 32), || rng.random_range(-1.0f32..1.0));
        let (z, _) = net.forward(&x, true);
        assert_eq!(z.dim(), (5, 64));
        assert!(z.iter().all(|&v| v >= 0.0 && v.is_finite()));
        let zero = Array3::<f32>::zeros((3, 2, 32));
        assert!(net.infer(&zero).iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        let mut rng = stream_rng(1, "resnet-grad");
        let mut net = ResNet1d::new(2, &tiny(), 8, &mut rng);
        let x = Array::from_shape_simple_fn((2, 6, 16), || rng.random_range(-1.0f32..1.0));
        let (z, cache) = net.forward(&x, true);
        let dz = Array2::from_shape_fn(z.dim(), |(i, j)| ((i * 7 + j * 3) % 5) as f32 - 2.0);
        net.backward(&cache, &dz);
        struct Check(Vec<String>);
        impl ParamVisitor for Check {
            fn param(&mut self, name: &str, p: &mut Param) {
                if p.grad.iter().all(|&g| g == 0.0) {
                    self.0.push(name.to_string());
                }
            }
        }
        let mut check = Check(Vec::new());
        net.visit_mut("", &mut check);
        assert!(check.0.is_empty(), "dead parameters: {:?}", check.0);
    }

    #[test]
    fn gradient_matches_finite_difference_in_eval_mode() {
        let mut rng = stream_rng(2, "resnet-fd");
        let mut net = ResNet1d::new(2, &tiny(), 5, &mut rng);
        // push the features away from the ReLU kink so the difference is smooth
        net.head.bias.value.fill(3.0);
        let x = Array::from_shape_simple_fn((2, 3, 12), || rng.random_range(-1.0f32..1.0));
        let coef = Array::from_shape_simple_fn((3, 5), || rng.random_range(-1.0f32..1.0));
        let loss = |net: &ResNet1d| -> f64 {
            let z = net.infer(&x);
            z.iter().zip(coef.iter()).map(|(a, b)| f64::from(a * b)).sum()
        };
        let (_, cache) = net.forward(&x, false);
        net.backward(&cache, &coef);
        let analytic = net.stem.weight.grad.clone();
        let h = 1e-2f32;
        for flat in [0usize, 3, 11] {
            let mut p = net.clone();
            p.stem.weight.value.as_slice_mut().unwrap()[flat] += h;
            let mut m = net.clone();
            m.stem.weight.value.as_slice_mut().unwrap()[flat] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * f64::from(h));
            let an = f64::from(analytic.as_slice().unwrap()[flat]);
            assert!((fd - an).abs() < 5e-3 * (1.0 + an.abs()), "{fd} vs {an}");
        }
    }
}
