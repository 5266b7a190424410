//! Multimodal windowed datasets.
//!
//! Raw recordings enter as [`SensorStream`]s (one per modality), are
//! resampled onto a uniform grid, optionally skeleton-normalized, and cut
//! into fixed-length windows. Windows of different modalities that start at
//! the same instant share a [`SampleKey`]; a [`MultimodalDataset`] holds, for
//! every key, one window per modality, which is what makes co-temporal
//! positive pairs possible later on.

mod csv_adapter;
mod split;
mod stream;
mod synthetic;
mod uci_har;

pub use csv_adapter::{load_csv_labels, load_csv_recording, load_manifest, load_recordings, CsvSchema, LabelTrack, ManifestEntry};
pub use split::{split_by_subject, window_recording, KeyedWindows, Recording, SplitDatasets, SubjectSplit, WindowingParams};
pub use stream::{normalize_skeleton, resample, resample_span, slide_windows};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData, SyntheticModality};
pub use uci_har::{carve_validation, load_uci_har, UCI_HAR_WINDOW_LEN};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One modality's raw time series.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorStream {
    pub modality_id: String,
    pub rate_hz: f64,
    /// Seconds, strictly increasing.
    pub timestamps: Vec<f64>,
    /// `[time, channels]`
    pub values: Array2<f64>,
    pub channel_names: Vec<String>,
}

impl SensorStream {
    pub fn new(
        modality_id: impl Into<String>,
        rate_hz: f64,
        timestamps: Vec<f64>,
        values: Array2<f64>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let s = Self {
            modality_id: modality_id.into(),
            rate_hz,
            timestamps,
            values,
            channel_names,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0) || !self.rate_hz.is_finite() {
            return Err(Error::Format(format!("{}: rate must be > 0, got {}", self.modality_id, self.rate_hz)));
        }
        if self.timestamps.len() != self.values.nrows() {
            return Err(Error::Format(format!(
                "{}: {} timestamps but {} value rows",
                self.modality_id,
                self.timestamps.len(),
                self.values.nrows()
            )));
        }
        if self.channel_names.len() != self.values.ncols() {
            return Err(Error::Format(format!(
                "{}: {} channel names for {} channels",
                self.modality_id,
                self.channel_names.len(),
                self.values.ncols()
            )));
        }
        if let Some(w) = self.timestamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::Format(format!(
                "{}: timestamps not strictly increasing at row {}",
                self.modality_id,
                w + 1
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn duration(&self) -> f64 {
        match (self.timestamps.first(), self.timestamps.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }
}

/// A fixed-duration multichannel window of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub modality_id: String,
    pub start_time: f64,
    /// `[window_len, channels]`
    pub data: Array2<f32>,
    pub label: Option<usize>,
}

/// Cross-modal alignment key: recording plus window start rounded to the
/// millisecond.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleKey {
    pub recording: String,
    pub start_ms: i64,
}

impl SampleKey {
    pub fn new(recording: impl Into<String>, start_time_s: f64) -> Self {
        Self {
            recording: recording.into(),
            start_ms: (start_time_s * 1000.0).round() as i64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Shape of one modality's windows inside a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityInfo {
    pub id: String,
    pub channels: usize,
    pub rate_hz: f64,
    pub window_len: usize,
}

/// All modalities' windows for one key.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub key: SampleKey,
    pub subject: Option<u32>,
    pub label: Option<usize>,
    pub windows: BTreeMap<String, WindowSample>,
}

/// Time-synchronized windows of several modalities, labeled or not.
///
/// Immutable after construction; every key carries one window for every
/// listed modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    split: Split,
    labeled: bool,
    modalities: Vec<ModalityInfo>,
    class_names: Vec<String>,
    samples: Vec<MultimodalSample>,
    index: BTreeMap<SampleKey, usize>,
}

impl MultimodalDataset {
    pub fn new(
        split: Split,
        labeled: bool,
        mut modalities: Vec<ModalityInfo>,
        class_names: Vec<String>,
        mut samples: Vec<MultimodalSample>,
    ) -> Result<Self> {
        modalities.sort_by(|a, b| a.id.cmp(&b.id));
        if modalities.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Consistency("duplicate modality ids".into()));
        }
        let min_modalities = if labeled { 1 } else { 2 };
        if modalities.len() < min_modalities {
            return Err(Error::Config(format!(
                "{} dataset needs at least {} modalities, got {}",
                if labeled { "labeled" } else { "unlabeled" },
                min_modalities,
                modalities.len()
            )));
        }
        if labeled && class_names.is_empty() {
            return Err(Error::Config("labeled dataset needs class names".into()));
        }
        let mut index = BTreeMap::new();
        for (i, s) in samples.iter_mut().enumerate() {
            if index.insert(s.key.clone(), i).is_some() {
                return Err(Error::Consistency(format!("duplicate sample key {:?}", s.key)));
            }
            match (labeled, s.label) {
                (true, Some(y)) if y < class_names.len() => {}
                (true, Some(y)) => {
                    return Err(Error::Data(format!("label {y} out of range for {} classes", class_names.len())))
                }
                (true, None) => return Err(Error::Consistency(format!("unlabeled sample {:?} in labeled dataset", s.key))),
                (false, None) => {}
                (false, Some(_)) => {
                    return Err(Error::Consistency(format!("labeled sample {:?} in unlabeled dataset", s.key)))
                }
            }
            if s.windows.len() != modalities.len() {
                return Err(Error::Consistency(format!(
                    "sample {:?} has {} modalities, dataset lists {}",
                    s.key,
                    s.windows.len(),
                    modalities.len()
                )));
            }
            for m in &modalities {
                let w = s.windows.get_mut(&m.id).ok_or_else(|| {
                    Error::Consistency(format!("sample {:?} lacks modality {}", s.key, m.id))
                })?;
                if w.data.dim() != (m.window_len, m.channels) {
                    return Err(Error::Shape(format!(
                        "{} window of {:?} has shape {:?}, expected {:?}",
                        m.id,
                        s.key,
                        w.data.dim(),
                        (m.window_len, m.channels)
                    )));
                }
                w.label = s.label;
            }
        }
        Ok(Self {
            split,
            labeled,
            modalities,
            class_names,
            samples,
            index,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn is_labeled(&self) -> bool {
        self.labeled
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn modalities(&self) -> &[ModalityInfo] {
        &self.modalities
    }

    pub fn modality(&self, id: &str) -> Option<&ModalityInfo> {
        self.modalities.iter().find(|m| m.id == id)
    }

    pub fn modality_ids(&self) -> BTreeSet<String> {
        self.modalities.iter().map(|m| m.id.clone()).collect()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &[MultimodalSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &MultimodalSample {
        &self.samples[i]
    }

    pub fn get(&self, key: &SampleKey) -> Option<&MultimodalSample> {
        self.index.get(key).map(|&i| &self.samples[i])
    }

    pub fn window(&self, i: usize, modality: &str) -> Result<&WindowSample> {
        self.samples
            .get(i)
            .and_then(|s| s.windows.get(modality))
            .ok_or_else(|| Error::Internal(format!("no {modality} window at index {i}")))
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subjects(&self) -> BTreeSet<u32> {
        self.samples.iter().filter_map(|s| s.subject).collect()
    }

    /// Sample indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(y) = s.label {
                out[y].push(i);
            }
        }
        out
    }

    /// Windows of `modality` at `indices`, stacked to `[n, window_len, channels]`.
    pub fn stack(&self, modality: &str, indices: &[usize]) -> Result<Array3<f32>> {
        let info = self
            .modality(modality)
            .ok_or_else(|| Error::Data(format!("dataset has no modality {modality}")))?;
        let mut out = Array3::zeros((indices.len(), info.window_len, info.channels));
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), row).assign(&self.window(i, modality)?.data);
        }
        Ok(out)
    }

    /// Copy keeping only `keep` modalities.
    pub fn restrict(&self, keep: &BTreeSet<String>) -> Result<Self> {
        let modalities: Vec<_> = self.modalities.iter().filter(|m| keep.contains(&m.id)).cloned().collect();
        let samples = self
            .samples
            .iter()
            .map(|s| MultimodalSample {
                windows: s.windows.iter().filter(|(k, _)| keep.contains(*k)).map(|(k, v)| (k.clone(), v.clone())).collect(),
                ..s.clone()
            })
            .collect();
        Self::new(self.split, self.labeled, modalities, self.class_names.clone(), samples)
    }

    /// Copy keeping the samples for which `keep` holds.
    pub fn filter(&self, keep: impl Fn(&MultimodalSample) -> bool) -> Result<Self> {
        let samples = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        Self::new(self.split, self.labeled, self.modalities.clone(), self.class_names.clone(), samples)
    }

    /// Same windows with the labels dropped.
    pub fn to_unlabeled(&self) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(|s| MultimodalSample { label: None, ..s.clone() })
            .collect();
        Self::new(self.split, false, self.modalities.clone(), Vec::new(), samples)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Tiny labeled dataset: `n` keys, modalities `a` (3ch) and `b` (2ch),
    /// window length 4, labels cycling over `k` classes.
    pub fn tiny(n: usize, k: usize) -> MultimodalDataset {
        let modalities = vec![
            ModalityInfo { id: "a".into(), channels: 3, rate_hz: 50.0, window_len: 4 },
            ModalityInfo { id: "b".into(), channels: 2, rate_hz: 50.0, window_len: 4 },
        ];
        let samples = (0..n)
            .map(|i| {
                let key = SampleKey { recording: "r".into(), start_ms: i as i64 * 10 };
                let windows = modalities
                    .iter()
                    .map(|m| {
                        let data = Array2::from_elem((4, m.channels), i as f32);
                        (
                            m.id.clone(),
                            WindowSample { modality_id: m.id.clone(), start_time: i as f64 * 0.01, data, label: None },
                        )
                    })
                    .collect();
                MultimodalSample { key, subject: Some((i % 3) as u32), label: Some(i % k), windows }
            })
            .collect();
        let names = (0..k).map(|c| format!("c{c}")).collect();
        MultimodalDataset::new(Split::Train, true, modalities, names, samples).unwrap()
    }
}
