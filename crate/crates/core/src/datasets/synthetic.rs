//! Synthetic multimodal data with a controllable per-modality noise level.
//!
//! Each class owns a latent signal: `latent_dim` sinusoids whose
//! frequencies fall in class-specific bins. A window starts at a random time so the
//! phase varies from sample to sample, and every modality observes the same
//! latent window through its own fixed linear map plus Gaussian noise.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ModalityInfo, MultimodalDataset, MultimodalSample, SampleKey, Split, SplitDatasets, WindowSample};
use crate::rng::stream_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModality {
    pub id: String,
    pub channels: usize,
    /// Standard deviation of the additive noise.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub window_len: usize,
    pub rate_hz: f64,
    pub latent_dim: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub unlabeled: usize,
    /// Relative amplitude jitter applied per window and latent component.
    pub jitter: f64,
    pub modalities: Vec<SyntheticModality>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            window_len: 64,
            rate_hz: 32.0,
            latent_dim: 3,
            train: 2000,
            valid: 400,
            test: 1000,
            unlabeled: 2000,
            jitter: 0.3,
            modalities: vec![
                SyntheticModality { id: "a".into(), channels: 3, noise: 0.1 },
                SyntheticModality { id: "b".into(), channels: 3, noise: 3.0 },
            ],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("synthetic data needs >= 2 classes, got {}", self.classes)));
        }
        if self.window_len < 2 || self.latent_dim == 0 || !(self.rate_hz > 0.0) {
            return Err(Error::Config("window_len >= 2, latent_dim >= 1 and rate_hz > 0 required".into()));
        }
        if self.modalities.is_empty() || (self.unlabeled > 0 && self.modalities.len() < 2) {
            return Err(Error::Config(
                "synthetic data needs >= 1 modality, and >= 2 when unlabeled samples are requested".into(),
            ));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::Config("train and test sizes must be > 0".into()));
        }
        for m in &self.modalities {
            if m.channels == 0 || !(m.noise >= 0.0) {
                return Err(Error::Config(format!("modality `{}`: channels > 0 and noise >= 0 required", m.id)));
            }
        }
        let mut ids: Vec<&str> = self.modalities.iter().map(|m| m.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.modalities.len() {
            return Err(Error::Config("duplicate synthetic modality id".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub labeled: SplitDatasets,
    /// Empty (but well-formed) when `unlabeled == 0`.
    pub unlabeled: MultimodalDataset,
}

struct ClassSignal {
    freqs: Array1<f64>,
    amps: Array1<f64>,
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    classes: Vec<ClassSignal>,
    maps: Vec<Array2<f64>>,
}

impl Generator<'_> {
    fn latent(&self, class: usize, rng: &mut impl Rng) -> Array2<f64> {
        let cfg = self.cfg;
        let sig = &self.classes[class];
        let t0: f64 = rng.random::<f64>() * 100.0;
        let gains: Vec<f64> = (0..cfg.latent_dim)
            .map(|_| 1.0 + cfg.jitter * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        Array2::from_shape_fn((cfg.window_len, cfg.latent_dim), |(i, d)| {
            let t = t0 + i as f64 / cfg.rate_hz;
            gains[d] * sig.amps[d] * (std::f64::consts::TAU * sig.freqs[d] * t).sin()
        })
    }

    fn sample(&self, split: Split, index: usize, label: Option<usize>, rng: &mut impl Rng) -> MultimodalSample {
        let class = label.unwrap_or_else(|| rng.random_range(0..self.cfg.classes));
        let latent = self.latent(class, rng);
        let key = SampleKey { recording: format!("synthetic-{split}"), start_ms: index as i64 };
        let windows = self
            .cfg
            .modalities
            .iter()
            .zip(&self.maps)
            .map(|(m, map)| {
                let mut x = latent.dot(&map.t());
                let noise = Normal::new(0.0, m.noise).expect("noise validated");
                x.mapv_inplace(|v| v + noise.sample(rng));
                let w = WindowSample {
                    modality_id: m.id.clone(),
                    start_time: index as f64 / 1000.0,
                    data: x.mapv(|v| v as f32),
                    label,
                };
                (m.id.clone(), w)
            })
            .collect::<BTreeMap<_, _>>();
        MultimodalSample { key, subject: Some((index % 8) as u32), label, windows }
    }

    fn dataset(&self, split: Split, n: usize, labeled: bool, seed: u64) -> Result<MultimodalDataset> {
        let mut rng = stream_rng(seed, &format!("synthetic/{split}/{labeled}"));
        let samples = (0..n)
            .map(|i| {
                let label = labeled.then_some(i % self.cfg.classes);
                self.sample(split, i, label, &mut rng)
            })
            .collect();
        let modalities = self
            .cfg
            .modalities
            .iter()
            .map(|m| ModalityInfo {
                id: m.id.clone(),
                channels: m.channels,
                rate_hz: self.cfg.rate_hz,
                window_len: self.cfg.window_len,
            })
            .collect();
        let names = (0..self.cfg.classes).map(|k| format!("class{k}")).collect();
        MultimodalDataset::new(split, labeled, modalities, names, samples)
    }
}

/// Generates labeled train/valid/test splits and an unlabeled pool.
///
/// The class signals and observation maps depend only on `seed`; each split
/// draws its windows from its own random stream.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, "synthetic/classes");
    let nyquist = cfg.rate_hz / 2.0;
    // frequencies at least a few cycles per window and below Nyquist
    let lo = 2.0 * cfg.rate_hz / cfg.window_len as f64;
    let hi = (0.4 * nyquist).max(lo * 1.5);
    // per latent component, every class gets its own frequency bin
    let bin = (hi - lo) / cfg.classes as f64;
    let perms: Vec<Vec<usize>> = (0..cfg.latent_dim)
        .map(|_| {
            let mut p: Vec<usize> = (0..cfg.classes).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let classes = (0..cfg.classes)
        .map(|k| ClassSignal {
            freqs: Array1::from_shape_fn(cfg.latent_dim, |d| lo + bin * (perms[d][k] as f64 + rng.random_range(0.25..0.75))),
            amps: Array1::from_shape_fn(cfg.latent_dim, |_| rng.random_range(0.5..1.5)),
        })
        .collect();
    let mut map_rng = stream_rng(seed, "synthetic/maps");
    let maps = cfg
        .modalities
        .iter()
        .map(|m| {
            let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
            Array2::from_shape_fn((m.channels, cfg.latent_dim), |_| {
                let z: f64 = StandardNormal.sample(&mut map_rng);
                z * scale
            })
        })
        .collect();
    let generator = Generator { cfg, classes, maps };
    // a single modality cannot form an unlabeled dataset, so the empty pool
    // is an empty labeled one
    let unlabeled_flag = cfg.modalities.len() < 2;
    let unlabeled = generator.dataset(Split::Train, cfg.unlabeled, unlabeled_flag, seed)?;
    Ok(SyntheticData {
        labeled: SplitDatasets {
            train: generator.dataset(Split::Train, cfg.train, true, seed)?,
            valid: generator.dataset(Split::Valid, cfg.valid, true, seed)?,
            test: generator.dataset(Split::Test, cfg.test, true, seed)?,
        },
        unlabeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig { train: 40, valid: 8, test: 200, unlabeled: 16, ..Default::default() }
    }

    #[test]
    fn shapes_and_balance() {
        let d = generate_synthetic(&small(), 1).unwrap();
        assert_eq!(d.labeled.train.len(), 40);
        assert_eq!(d.unlabeled.len(), 16);
        assert!(!d.unlabeled.is_labeled());
        let counts: Vec<usize> = d.labeled.train.indices_by_class().iter().map(Vec::len).collect();
        assert_eq!(counts, vec![10; 4]);
        let w = d.labeled.test.window(0, "b").unwrap();
        assert_eq!(w.data.dim(), (64, 3));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small(), 7).unwrap();
        let b = generate_synthetic(&small(), 7).unwrap();
        let c = generate_synthetic(&small(), 8).unwrap();
        let x = |d: &SyntheticData| d.labeled.train.window(3, "a").unwrap().data.clone();
        assert_eq!(x(&a), x(&b));
        assert_ne!(x(&a), x(&c));
    }

    #[test]
    fn modalities_share_the_latent_window() {
        let cfg = SyntheticConfig {
            modalities: vec![
                SyntheticModality { id: "a".into(), channels: 3, noise: 0.0 },
                SyntheticModality { id: "b".into(), channels: 3, noise: 0.0 },
            ],
            ..small()
        };
        let d = generate_synthetic(&cfg, 3).unwrap();
        // noiseless square maps: b = a * M for one fixed M across samples,
        // so least squares on two samples must explain a third exactly
        let ds = &d.labeled.train;
        let get = |i: usize, m: &str| ds.window(i, m).unwrap().data.mapv(f64::from);
        let a = ndarray::concatenate![ndarray::Axis(0), get(0, "a"), get(1, "a")];
        let b = ndarray::concatenate![ndarray::Axis(0), get(0, "b"), get(1, "b")];
        let ata = a.t().dot(&a);
        let atb = a.t().dot(&b);
        let m = solve3(&ata, &atb);
        let resid = (&get(2, "a").dot(&m) - &get(2, "b")).mapv(f64::abs).fold(0.0f64, |x, &y| x.max(y));
        assert!(resid < 1e-3, "residual {resid}");
    }

    fn solve3(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        // Gauss-Jordan on a 3x3 system with several right-hand sides
        let mut aug = ndarray::concatenate![ndarray::Axis(1), a.clone(), b.clone()];
        for c in 0..3 {
            let p = (c..3).max_by(|&i, &j| aug[[i, c]].abs().total_cmp(&aug[[j, c]].abs())).unwrap();
            for k in 0..aug.ncols() {
                aug.swap([c, k], [p, k]);
            }
            let d = aug[[c, c]];
            aug.row_mut(c).mapv_inplace(|v| v / d);
            for r in 0..3 {
                if r != c {
                    let f = aug[[r, c]];
                    let row = aug.row(c).to_owned();
                    aug.row_mut(r).scaled_add(-f, &row);
                }
            }
        }
        aug.slice(ndarray::s![.., 3..]).to_owned()
    }

    #[test]
    fn noisy_modality_is_harder_for_a_simple_classifier() {
        // nearest class centroid on per-channel power spectra
        let d = generate_synthetic(&SyntheticConfig { train: 200, ..small() }, 11).unwrap();
        let acc = |m: &str| {
            let feat = |ds: &MultimodalDataset, i: usize| spectrum(&ds.window(i, m).unwrap().data);
            let train = &d.labeled.train;
            let mut centroids = vec![vec![0.0; 0]; 4];
            for (k, idx) in train.indices_by_class().iter().enumerate() {
                let mut c = vec![0.0; feat(train, idx[0]).len()];
                for &i in idx {
                    for (a, b) in c.iter_mut().zip(feat(train, i)) {
                        *a += b / idx.len() as f64;
                    }
                }
                centroids[k] = c;
            }
            let test = &d.labeled.test;
            let hits = (0..test.len())
                .filter(|&i| {
                    let f = feat(test, i);
                    let pred = (0..4)
                        .min_by(|&a, &b| dist(&f, &centroids[a]).total_cmp(&dist(&f, &centroids[b])))
                        .unwrap();
                    Some(pred) == test.sample(i).label
                })
                .count();
            hits as f64 / test.len() as f64
        };
        let (a, b) = (acc("a"), acc("b"));
        assert!(a > b, "a {a} b {b}");
        assert!(a > 0.5, "a {a}");
    }

    fn spectrum(x: &Array2<f32>) -> Vec<f64> {
        let n = x.nrows();
        let mut out = Vec::new();
        for c in 0..x.ncols() {
            for f in 1..n / 2 {
                let (mut re, mut im) = (0.0, 0.0);
                for t in 0..n {
                    let ph = std::f64::consts::TAU * (f * t) as f64 / n as f64;
                    re += f64::from(x[[t, c]]) * ph.cos();
                    im += f64::from(x[[t, c]]) * ph.sin();
                }
                out.push((re * re + im * im).sqrt());
            }
        }
        out
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_synthetic(&SyntheticConfig { classes: 1, ..small() }, 0).is_err());
        let one = SyntheticConfig {
            modalities: vec![SyntheticModality { id: "a".into(), channels: 2, noise: 0.1 }],
            ..small()
        };
        assert!(matches!(generate_synthetic(&one, 0), Err(Error::Config(_))));
        let ok = generate_synthetic(&SyntheticConfig { unlabeled: 0, ..one }, 0).unwrap();
        assert!(ok.unlabeled.is_empty());
    }
}
