use ndarray::{Array2, Array3, ArrayView2, Axis, Ix2};
use rand::Rng;

use super::{join, Module, Param, ParamVisitor, StateVisitor};

/// 1-D convolution over `[channels, batch, time]` activations.
#[derive(Debug, Clone)]
pub struct Conv1d {
    /// `[out_channels, in_channels * kernel]`, row layout `(in, tap)`.
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct Conv1dCache {
    input: Array3<f32>,
}

impl Conv1d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self {
            weight: Param::uniform(&[out_channels, fan_in], bound, rng),
            bias: bias.then(|| Param::uniform(&[out_channels], bound, rng)),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_len(&self, len: usize) -> usize {
        (len + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn weight_view(&self) -> ArrayView2<'_, f32> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("conv weight is 2-D")
    }

    fn im2col(&self, x: &Array3<f32>) -> Array2<f32> {
        let (c, b, l) = x.dim();
        let lout = self.output_len(l);
        let mut cols = Array2::<f32>::zeros((c * self.kernel, b * lout));
        let xs = x.as_slice().expect("standard layout");
        let width = b * lout;
        let cs = cols.as_slice_mut().expect("standard layout");
        for ci in 0..c {
            for k in 0..self.kernel {
                let row = &mut cs[(ci * self.kernel + k) * width..][..width];
                for bi in 0..b {
                    let src = &xs[(ci * b + bi) * l..][..l];
                    let dst = &mut row[bi * lout..][..lout];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let pos = t * self.stride + k;
                        if pos >= self.padding && pos - self.padding < l {
                            *d = src[pos - self.padding];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f32>, shape: (usize, usize, usize)) -> Array3<f32> {
        let (c, b, l) = shape;
        let lout = self.output_len(l);
        let width = b * lout;
        let mut dx = Array3::<f32>::zeros(shape);
        let cs = cols.as_slice().expect("standard layout");
        let ds = dx.as_slice_mut().expect("standard layout");
        for ci in 0..c {
            for k in 0..self.kernel {
                let row = &cs[(ci * self.kernel + k) * width..][..width];
                for bi in 0..b {
                    let src = &row[bi * lout..][..lout];
                    let dst = &mut ds[(ci * b + bi) * l..][..l];
                    for (t, &g) in src.iter().enumerate() {
                        let pos = t * self.stride + k;
                        if pos >= self.padding && pos - self.padding < l {
                            dst[pos - self.padding] += g;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, Conv1dCache) {
        let x = x.as_standard_layout().into_owned();
        let (c, b, l) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let lout = self.output_len(l);
        let cols = self.im2col(&x);
        let mut y = self.weight_view().dot(&cols);
        if let Some(bias) = &self.bias {
            for (mut row, &bv) in y.rows_mut().into_iter().zip(bias.value.iter()) {
                row += bv;
            }
        }
        let y = y
            .into_shape_with_order((self.out_channels, b, lout))
            .expect("conv output reshape");
        (y, Conv1dCache { input: x })
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, cache: &Conv1dCache, dy: &Array3<f32>, need_input_grad: bool) -> Option<Array3<f32>> {
        let (o, b, lout) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, b * lout))
            .expect("conv grad reshape");
        let cols = self.im2col(&cache.input);
        let dw = dy2.dot(&cols.t());
        {
            let mut g = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
            g += &dw;
        }
        if let Some(bias) = &mut self.bias {
            let db = dy2.sum_axis(Axis(1));
            bias.grad += &db.into_dyn();
        }
        need_input_grad.then(|| {
            let dcols = self.weight_view().t().dot(&dy2);
            self.col2im(&dcols, cache.input.dim())
        })
    }
}

impl Module for Conv1d {
    fn visit_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param(&join(prefix, "bias"), b);
        }
    }

    fn visit(&self, prefix: &str, v: &mut dyn StateVisitor) {
        v.tensor(&join(prefix, "weight"), &self.weight.value);
        if let Some(b) = &self.bias {
            v.tensor(&join(prefix, "bias"), &b.value);
        }
    }
}
