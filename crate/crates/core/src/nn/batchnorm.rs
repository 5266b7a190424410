use ndarray::{Array1, Array3, ArrayD, Axis};

use super::{join, Module, Param, ParamVisitor, StateVisitor};

/// Batch normalization over the batch and time axes of `[C, B, L]` input.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f32>,
    pub running_var: ArrayD<f32>,
    pub momentum: f32,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array3<f32>,
    inv_std: Array1<f32>,
    train: bool,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::<f32>::ones(channels)),
            beta: Param::new(Array1::<f32>::zeros(channels)),
            running_mean: ArrayD::zeros(vec![channels]),
            running_var: ArrayD::ones(vec![channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Batch statistics when `train` (updating the running estimates),
    /// running statistics otherwise.
    pub fn forward(&mut self, x: &Array3<f32>, train: bool) -> (Array3<f32>, BatchNormCache) {
        let (c, b, l) = x.dim();
        let n = (b * l) as f32;
        let mut mean = Array1::<f32>::zeros(c);
        let mut inv_std = Array1::<f32>::zeros(c);
        for ch in 0..c {
            let plane = x.index_axis(Axis(0), ch);
            let (m, var) = if train {
                let m = plane.sum() / n;
                let var = plane.fold(0.0f32, |acc, &v| acc + (v - m) * (v - m)) / n;
                let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
                let mom = self.momentum;
                self.running_mean[[ch]] = (1.0 - mom) * self.running_mean[[ch]] + mom * m;
                self.running_var[[ch]] = (1.0 - mom) * self.running_var[[ch]] + mom * unbiased;
                (m, var)
            } else {
                (self.running_mean[[ch]], self.running_var[[ch]])
            };
            mean[ch] = m;
            inv_std[ch] = 1.0 / (var + self.eps).sqrt();
        }
        let mut xhat = x.to_owned();
        let mut y = Array3::<f32>::zeros((c, b, l));
        for ch in 0..c {
            let (m, s) = (mean[ch], inv_std[ch]);
            let (g, bt) = (self.gamma.value[[ch]], self.beta.value[[ch]]);
            let mut xh = xhat.index_axis_mut(Axis(0), ch);
            xh.mapv_inplace(|v| (v - m) * s);
            let mut yc = y.index_axis_mut(Axis(0), ch);
            yc.zip_mut_with(&xh, |o, &v| *o = v * g + bt);
        }
        (y, BatchNormCache { xhat, inv_std, train })
    }

    /// Running-statistics normalization.
    pub fn infer(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut y = x.to_owned();
        for (ch, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let s = 1.0 / (self.running_var[[ch]] + self.eps).sqrt();
            let m = self.running_mean[[ch]];
            let (g, b) = (self.gamma.value[[ch]], self.beta.value[[ch]]);
            plane.mapv_inplace(|v| (v - m) * s * g + b);
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Array3<f32>) -> Array3<f32> {
        let (c, b, l) = dy.dim();
        let n = (b * l) as f32;
        let mut dx = Array3::<f32>::zeros((c, b, l));
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(0), ch);
            let xh = cache.xhat.index_axis(Axis(0), ch);
            let sum_dy = dyc.sum();
            let sum_dy_xh = ndarray::Zip::from(&dyc).and(&xh).fold(0.0f32, |a, &d, &x| a + d * x);
            self.gamma.grad[[ch]] += sum_dy_xh;
            self.beta.grad[[ch]] += sum_dy;
            let g = self.gamma.value[[ch]];
            let s = cache.inv_std[ch];
            let mut dxc = dx.index_axis_mut(Axis(0), ch);
            if cache.train {
                ndarray::Zip::from(&mut dxc).and(&dyc).and(&xh).for_each(|o, &d, &x| {
                    *o = g * s / n * (n * d - sum_dy - x * sum_dy_xh);
                });
            } else {
                dxc.zip_mut_with(&dyc, |o, &d| *o = g * s * d);
            }
        }
        dx
    }
}

impl Module for BatchNorm1d {
    fn visit_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.param(&join(prefix, "gamma"), &mut self.gamma);
        v.param(&join(prefix, "beta"), &mut self.beta);
        v.buffer(&join(prefix, "running_mean"), &mut self.running_mean);
        v.buffer(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn visit(&self, prefix: &str, v: &mut dyn StateVisitor) {
        v.tensor(&join(prefix, "gamma"), &self.gamma.value);
        v.tensor(&join(prefix, "beta"), &self.beta.value);
        v.tensor(&join(prefix, "running_mean"), &self.running_mean);
        v.tensor(&join(prefix, "running_var"), &self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::Array;
    use rand::Rng;

    #[test]
    fn normalizes_per_channel() {
        let mut rng = stream_rng(1, "bn");
        let x = Array::from_shape_simple_fn((2, 4, 5), || rng.random_range(-3.0f32..5.0));
        let mut bn = BatchNorm1d::new(2);
        let (y, _) = bn.forward(&x, true);
        for ch in 0..2 {
            let p = y.index_axis(Axis(0), ch);
            assert!(p.mean().unwrap().abs() < 1e-5);
            let var = p.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn train_gradient_matches_finite_differences() {
        let mut rng = stream_rng(2, "bn-grad");
        let x = Array::from_shape_simple_fn((2, 3, 4), || rng.random_range(-1.0f32..1.0));
        let coef = Array::from_shape_simple_fn((2, 3, 4), || rng.random_range(-1.0f32..1.0));
        let mut bn = BatchNorm1d::new(2);
        bn.gamma.value[[0]] = 1.5;
        bn.beta.value[[1]] = -0.3;
        let loss = |bn: &BatchNorm1d, x: &Array3<f32>| -> f64 {
            let (y, _) = bn.clone().forward(x, true);
            y.iter().zip(coef.iter()).map(|(a, b)| f64::from(a * b)).sum()
        };
        let (_, cache) = bn.clone().forward(&x, true);
        let dx = bn.backward(&cache, &coef);
        let h = 1e-2f32;
        for idx in [[0usize, 0, 0], [1, 2, 3], [0, 1, 2]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * f64::from(h));
            assert!((fd - f64::from(dx[idx])).abs() < 2e-3, "{fd} vs {}", dx[idx]);
        }
    }
}
