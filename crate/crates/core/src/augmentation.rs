//! Per-window stochastic augmentations, configured per modality and task.
//!
//! Windows are `[window_len, channels]`. Rotations treat consecutive channel
//! triples as 3-vectors, so a tri-axial sensor and a `J x 3` skeleton share
//! one code path.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Contrastive,
}

fn check_triples(window: &ArrayView2<f32>) -> Result<()> {
    let c = window.ncols();
    if c == 0 || !c.is_multiple_of(3) {
        return Err(Error::Layout(format!("rotation needs a multiple of 3 channels, got {c}")));
    }
    Ok(())
}

/// Rodrigues rotation matrix for a unit axis and an angle in degrees.
fn rotation_matrix(axis: [f64; 3], degrees: f64) -> [[f64; 3]; 3] {
    let [x, y, z] = axis;
    let (s, c) = degrees.to_radians().sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Rotates every 3-vector of the window about `axis` by `degrees`.
pub fn rotate_3d(window: ArrayView2<f32>, axis: [f64; 3], degrees: f64) -> Result<Array2<f32>> {
    check_triples(&window)?;
    let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Parameter(format!("rotation axis must be a unit vector, |axis| = {norm}")));
    }
    let r = rotation_matrix(axis, degrees);
    let mut out = window.to_owned();
    for mut row in out.rows_mut() {
        for j in 0..row.len() / 3 {
            let v = [f64::from(row[3 * j]), f64::from(row[3 * j + 1]), f64::from(row[3 * j + 2])];
            for (i, ri) in r.iter().enumerate() {
                row[3 * j + i] = (ri[0] * v[0] + ri[1] * v[1] + ri[2] * v[2]) as f32;
            }
        }
    }
    Ok(out)
}

pub fn rotate_z(window: ArrayView2<f32>, degrees: f64) -> Result<Array2<f32>> {
    rotate_3d(window, [0.0, 0.0, 1.0], degrees)
}

/// Negates the x coordinate of every joint of a `J x 2` skeleton.
pub fn hflip_2d(window: ArrayView2<f32>) -> Result<Array2<f32>> {
    let c = window.ncols();
    if c == 0 || !c.is_multiple_of(2) {
        return Err(Error::Layout(format!("2-D skeleton needs an even channel count, got {c}")));
    }
    let mut out = window.to_owned();
    for mut row in out.rows_mut() {
        for j in 0..c / 2 {
            row[2 * j] = -row[2 * j];
        }
    }
    Ok(out)
}

pub fn scale(window: ArrayView2<f32>, factor: f64) -> Result<Array2<f32>> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Parameter(format!("scale factor must be > 0, got {factor}")));
    }
    Ok(window.mapv(|v| (f64::from(v) * factor) as f32))
}

fn check_warp(knots: usize, sigma: f64) -> Result<()> {
    if knots < 2 {
        return Err(Error::Parameter(format!("warp needs >= 2 knots, got {knots}")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("warp sigma must be >= 0, got {sigma}")));
    }
    Ok(())
}

/// Natural cubic spline through equally spaced knots spanning `[0, len - 1]`,
/// evaluated at every integer position.
fn spline_curve(values: &[f64], len: usize) -> Vec<f64> {
    let n = values.len();
    let span = (len.max(2) - 1) as f64;
    let h = span / (n - 1) as f64;
    // second derivatives; natural boundary m0 = m_{n-1} = 0
    let mut m = vec![0.0; n];
    if n > 2 {
        let k = n - 2;
        let mut diag = vec![4.0; k];
        let mut rhs: Vec<f64> = (1..n - 1)
            .map(|i| 6.0 * (values[i + 1] - 2.0 * values[i] + values[i - 1]) / (h * h))
            .collect();
        for i in 1..k {
            let w = 1.0 / diag[i - 1];
            diag[i] -= w;
            rhs[i] -= w * rhs[i - 1];
        }
        m[k] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            m[i + 1] = (rhs[i] - m[i + 2]) / diag[i];
        }
    }
    (0..len)
        .map(|t| {
            let x = t as f64;
            let seg = ((x / h) as usize).min(n - 2);
            let (a, b) = (seg as f64 * h, (seg + 1) as f64 * h);
            let (da, db) = (b - x, x - a);
            m[seg] * da.powi(3) / (6.0 * h)
                + m[seg + 1] * db.powi(3) / (6.0 * h)
                + (values[seg] - m[seg] * h * h / 6.0) * da / h
                + (values[seg + 1] - m[seg + 1] * h * h / 6.0) * db / h
        })
        .collect()
}

fn random_curve(len: usize, knots: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0; len];
    }
    let normal = Normal::new(1.0, sigma).expect("sigma checked");
    let values: Vec<f64> = (0..knots).map(|_| normal.sample(rng)).collect();
    spline_curve(&values, len)
}

/// Multiplies each channel by its own smooth random curve.
pub fn magnitude_warp(window: ArrayView2<f32>, knots: usize, sigma: f64, rng: &mut impl Rng) -> Result<Array2<f32>> {
    check_warp(knots, sigma)?;
    let mut out = window.to_owned();
    let len = window.nrows();
    for mut col in out.columns_mut() {
        let curve = random_curve(len, knots, sigma, rng);
        for (v, g) in col.iter_mut().zip(curve) {
            *v = (f64::from(*v) * g) as f32;
        }
    }
    Ok(out)
}

/// Monotone time distortion mapping `[0, len - 1]` onto itself: the
/// normalized cumulative sum of a positive random speed curve.
pub fn time_warp_positions(len: usize, knots: usize, sigma: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    check_warp(knots, sigma)?;
    if len < 2 {
        return Ok(vec![0.0; len]);
    }
    let speed: Vec<f64> = random_curve(len, knots, sigma, rng).into_iter().map(|v| v.max(1e-2)).collect();
    let mut pos = Vec::with_capacity(len);
    let mut acc = 0.0;
    pos.push(0.0);
    for s in &speed[1..] {
        acc += s;
        pos.push(acc);
    }
    let end = (len - 1) as f64;
    Ok(pos.into_iter().map(|p| p / acc * end).collect())
}

/// Resamples the window along a random monotone time distortion. Length and
/// both endpoints are preserved.
pub fn time_warp(window: ArrayView2<f32>, knots: usize, sigma: f64, rng: &mut impl Rng) -> Result<Array2<f32>> {
    let len = window.nrows();
    let positions = time_warp_positions(len, knots, sigma, rng)?;
    let mut out = Array2::zeros(window.dim());
    for (t, &p) in positions.iter().enumerate() {
        let i = (p.floor() as usize).min(len.saturating_sub(2));
        let w = (p - i as f64) as f32;
        for c in 0..window.ncols() {
            let a = window[[i, c]];
            let b = window[[(i + 1).min(len - 1), c]];
            out[[t, c]] = a + w * (b - a);
        }
    }
    Ok(out)
}

/// One configured transform with its parameter ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    /// Random axis, angle uniform in `[-max_degrees, max_degrees]`.
    Rotate3d { max_degrees: f64 },
    RotateZ { max_degrees: f64 },
    HFlip { probability: f64 },
    Scale { low: f64, high: f64 },
    MagnitudeWarp { knots: usize, sigma: f64 },
    TimeWarp { knots: usize, sigma: f64 },
}

/// A transform with its random parameters drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum Drawn {
    Rotate { axis: [f64; 3], degrees: f64 },
    HFlip(bool),
    Scale(f64),
    MagnitudeWarp { knots: usize, sigma: f64 },
    TimeWarp { knots: usize, sigma: f64 },
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Transform::Rotate3d { max_degrees } | Transform::RotateZ { max_degrees } => {
                if !(0.0..=180.0).contains(&max_degrees) {
                    return Err(Error::Config(format!("rotation range must be within [0, 180], got {max_degrees}")));
                }
            }
            Transform::HFlip { probability } => {
                if !(0.0..=1.0).contains(&probability) {
                    return Err(Error::Config(format!("flip probability must be in [0, 1], got {probability}")));
                }
            }
            Transform::Scale { low, high } => {
                if !(low > 0.0 && low <= high && high.is_finite()) {
                    return Err(Error::Config(format!("scale range must satisfy 0 < low <= high, got [{low}, {high}]")));
                }
            }
            Transform::MagnitudeWarp { knots, sigma } | Transform::TimeWarp { knots, sigma } => {
                check_warp(knots, sigma).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    fn rotation_range(&self) -> Option<f64> {
        match *self {
            Transform::Rotate3d { max_degrees } | Transform::RotateZ { max_degrees } => Some(max_degrees),
            _ => None,
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Drawn {
        let angle = |max: f64, rng: &mut dyn rand::RngCore| if max == 0.0 { 0.0 } else { rng.random_range(-max..=max) };
        match *self {
            Transform::Rotate3d { max_degrees } => {
                let axis = loop {
                    let v: [f64; 3] = [
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    ];
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n > 1e-9 {
                        break v.map(|x| x / n);
                    }
                };
                Drawn::Rotate { axis, degrees: angle(max_degrees, rng) }
            }
            Transform::RotateZ { max_degrees } => Drawn::Rotate { axis: [0.0, 0.0, 1.0], degrees: angle(max_degrees, rng) },
            Transform::HFlip { probability } => Drawn::HFlip(rng.random_bool(probability)),
            Transform::Scale { low, high } => Drawn::Scale(if low == high { low } else { rng.random_range(low..high) }),
            Transform::MagnitudeWarp { knots, sigma } => Drawn::MagnitudeWarp { knots, sigma },
            Transform::TimeWarp { knots, sigma } => Drawn::TimeWarp { knots, sigma },
        }
    }
}

impl Drawn {
    pub fn apply(&self, window: ArrayView2<f32>, rng: &mut impl Rng) -> Result<Array2<f32>> {
        match *self {
            Drawn::Rotate { axis, degrees } => rotate_3d(window, axis, degrees),
            Drawn::HFlip(true) => hflip_2d(window),
            Drawn::HFlip(false) => Ok(window.to_owned()),
            Drawn::Scale(f) => scale(window, f),
            Drawn::MagnitudeWarp { knots, sigma } => magnitude_warp(window, knots, sigma, rng),
            Drawn::TimeWarp { knots, sigma } => time_warp(window, knots, sigma, rng),
        }
    }
}

/// Transform lists of one modality, applied in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskTransforms {
    pub classification: Vec<Transform>,
    pub contrastive: Vec<Transform>,
}

impl TaskTransforms {
    /// Tri-axial inertial sensor: random-axis rotation plus warps.
    pub fn inertial() -> Self {
        Self {
            classification: vec![
                Transform::Rotate3d { max_degrees: 30.0 },
                Transform::MagnitudeWarp { knots: 4, sigma: 0.2 },
                Transform::TimeWarp { knots: 4, sigma: 0.2 },
            ],
            contrastive: vec![
                Transform::Rotate3d { max_degrees: 180.0 },
                Transform::MagnitudeWarp { knots: 4, sigma: 0.4 },
                Transform::TimeWarp { knots: 4, sigma: 0.4 },
            ],
        }
    }

    pub fn skeleton_3d() -> Self {
        Self {
            classification: vec![Transform::RotateZ { max_degrees: 30.0 }, Transform::Scale { low: 0.9, high: 1.1 }],
            contrastive: vec![Transform::RotateZ { max_degrees: 180.0 }, Transform::Scale { low: 0.8, high: 1.2 }],
        }
    }

    pub fn skeleton_2d() -> Self {
        Self {
            classification: vec![Transform::HFlip { probability: 0.5 }, Transform::Scale { low: 0.9, high: 1.1 }],
            contrastive: vec![Transform::HFlip { probability: 0.5 }, Transform::Scale { low: 0.8, high: 1.2 }],
        }
    }

    pub fn for_task(&self, task: Task) -> &[Transform] {
        match task {
            Task::Classification => &self.classification,
            Task::Contrastive => &self.contrastive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in self.classification.iter().chain(&self.contrastive) {
            t.validate()?;
        }
        for t in &self.contrastive {
            if let Some(max) = t.rotation_range() {
                if max != 180.0 {
                    return Err(Error::Config(format!(
                        "contrastive rotation range must be the full [-180, 180], got +-{max}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-modality augmentation settings. Modalities without an entry are
/// passed through unchanged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugmentationPolicy {
    pub modalities: BTreeMap<String, TaskTransforms>,
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        for (m, t) in &self.modalities {
            t.validate().map_err(|e| Error::Config(format!("augmentation for `{m}`: {e}")))?;
        }
        Ok(())
    }

    pub fn transforms(&self, modality: &str, task: Task) -> &[Transform] {
        self.modalities.get(modality).map_or(&[], |t| t.for_task(task))
    }

    /// Applies the modality's transforms for `task` in order, drawing fresh
    /// parameters from `rng`.
    pub fn apply(&self, window: ArrayView2<f32>, modality: &str, task: Task, rng: &mut impl Rng) -> Result<Array2<f32>> {
        let mut out = window.to_owned();
        for t in self.transforms(modality, task) {
            out = t.draw(rng).apply(out.view(), rng)?;
        }
        Ok(out)
    }
}
