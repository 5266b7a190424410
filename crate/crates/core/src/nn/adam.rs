use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::{Module, Param, ParamVisitor};

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: BTreeMap<String, (ArrayD<f32>, ArrayD<f32>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, module: &mut impl Module) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut update = Update {
            opt: self,
            step_size: 0.0,
            c2: c2 as f32,
        };
        update.step_size = (update.opt.lr / c1) as f32;
        module.visit_mut("", &mut update);
    }
}

struct Update<'a> {
    opt: &'a mut Adam,
    step_size: f32,
    c2: f32,
}

impl ParamVisitor for Update<'_> {
    fn param(&mut self, name: &str, p: &mut Param) {
        let (b1, b2, eps) = (self.opt.beta1 as f32, self.opt.beta2 as f32, self.opt.eps as f32);
        let (m, v) = self
            .opt
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
        let (step, c2) = (self.step_size, self.c2);
        ndarray::Zip::from(&mut p.value)
            .and(&p.grad)
            .and(m)
            .and(v)
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / ((*v / c2).sqrt() + eps);
            });
    }
}
