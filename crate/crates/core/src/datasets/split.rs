use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::csv_adapter::LabelTrack;
use super::stream::{normalize_skeleton, resample_span, slide_windows};
use super::{ModalityInfo, MultimodalDataset, MultimodalSample, SampleKey, SensorStream, Split, WindowSample};
use crate::{Error, Result};

/// One session of one subject: time-synchronized streams plus optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub subject: u32,
    pub streams: Vec<SensorStream>,
    pub labels: Option<LabelTrack>,
}

/// How recordings become windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowingParams {
    pub window_s: f64,
    /// Defaults to half the window.
    #[serde(default)]
    pub step_s: Option<f64>,
    /// Target rate per modality; modalities not listed keep their own rate.
    #[serde(default)]
    pub rates: BTreeMap<String, f64>,
    /// Skeleton modalities and their coordinate dimensionality (2 or 3).
    #[serde(default)]
    pub skeleton_dims: BTreeMap<String, usize>,
    /// Raw label values that become classes, in class-index order. When
    /// empty, every raw label not in `exclude_labels` becomes a class.
    #[serde(default)]
    pub classes: Vec<i64>,
    /// Raw labels dropped from labeled datasets (kept in unlabeled ones).
    #[serde(default)]
    pub exclude_labels: Vec<i64>,
}

impl WindowingParams {
    pub fn new(window_s: f64) -> Self {
        Self {
            window_s,
            step_s: None,
            rates: BTreeMap::new(),
            skeleton_dims: BTreeMap::new(),
            classes: Vec::new(),
            exclude_labels: Vec::new(),
        }
    }

    pub fn step(&self) -> f64 {
        self.step_s.unwrap_or(self.window_s / 2.0)
    }
}

/// Windows of all modalities of one recording sharing a key.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyedWindows {
    pub key: SampleKey,
    pub subject: u32,
    pub raw_label: Option<i64>,
    pub windows: BTreeMap<String, WindowSample>,
}

/// Resamples every stream onto a common grid (the overlap of their time
/// spans), normalizes skeletons and cuts aligned windows. Only keys present
/// in every modality are kept.
pub fn window_recording(rec: &Recording, params: &WindowingParams) -> Result<Vec<KeyedWindows>> {
    if rec.streams.is_empty() {
        return Err(Error::Data(format!("recording {} has no streams", rec.id)));
    }
    let start = rec
        .streams
        .iter()
        .filter_map(|s| s.timestamps.first().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let end = rec
        .streams
        .iter()
        .filter_map(|s| s.timestamps.last().copied())
        .fold(f64::INFINITY, f64::min);
    if !(end > start) {
        return Err(Error::Data(format!("recording {}: streams do not overlap in time", rec.id)));
    }
    let mut per_modality: Vec<BTreeMap<SampleKey, WindowSample>> = Vec::new();
    for stream in &rec.streams {
        let mut s = stream.clone();
        if let Some(&dims) = params.skeleton_dims.get(&s.modality_id) {
            s = normalize_skeleton(&s, dims)?;
        }
        let rate = params.rates.get(&s.modality_id).copied().unwrap_or(s.rate_hz);
        let s = resample_span(&s, rate, start, end)?;
        let windows = slide_windows(&s, params.window_s, params.step())?;
        per_modality.push(
            windows
                .into_iter()
                .map(|w| (SampleKey::new(rec.id.clone(), w.start_time), w))
                .collect(),
        );
    }
    let keys: Vec<SampleKey> = per_modality[0]
        .keys()
        .filter(|k| per_modality.iter().all(|m| m.contains_key(k)))
        .cloned()
        .collect();
    Ok(keys
        .into_iter()
        .map(|key| {
            let windows: BTreeMap<String, WindowSample> = per_modality
                .iter_mut()
                .map(|m| {
                    let w = m.remove(&key).expect("key present in every modality");
                    (w.modality_id.clone(), w)
                })
                .collect();
            let t0 = key.start_ms as f64 / 1000.0;
            let raw_label = rec.labels.as_ref().and_then(|l| l.majority(t0, t0 + params.window_s));
            KeyedWindows {
                key,
                subject: rec.subject,
                raw_label,
                windows,
            }
        })
        .collect())
}

/// Disjoint subject sets for the three splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSplit {
    pub train: BTreeSet<u32>,
    #[serde(default)]
    pub valid: BTreeSet<u32>,
    pub test: BTreeSet<u32>,
}

impl SubjectSplit {
    pub fn new(
        train: impl IntoIterator<Item = u32>,
        valid: impl IntoIterator<Item = u32>,
        test: impl IntoIterator<Item = u32>,
    ) -> Result<Self> {
        let s = Self {
            train: train.into_iter().collect(),
            valid: valid.into_iter().collect(),
            test: test.into_iter().collect(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Validation = the last (highest-id) training subject.
    pub fn hold_out_last_train(
        train: impl IntoIterator<Item = u32>,
        test: impl IntoIterator<Item = u32>,
    ) -> Result<Self> {
        let mut train: BTreeSet<u32> = train.into_iter().collect();
        let last = train
            .pop_last()
            .ok_or_else(|| Error::Config("no training subjects to hold out".into()))?;
        if train.is_empty() {
            return Err(Error::Config("holding out the only training subject leaves no training data".into()));
        }
        Self::new(train, [last], test)
    }

    pub fn validate(&self) -> Result<()> {
        for (a, b, name) in [
            (&self.train, &self.valid, "train/valid"),
            (&self.train, &self.test, "train/test"),
            (&self.valid, &self.test, "valid/test"),
        ] {
            if let Some(s) = a.intersection(b).next() {
                return Err(Error::Config(format!("subject {s} appears in both {name} splits")));
            }
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Config("train and test subject sets must be non-empty".into()));
        }
        Ok(())
    }

    pub fn split_of(&self, subject: u32) -> Option<Split> {
        if self.train.contains(&subject) {
            Some(Split::Train)
        } else if self.valid.contains(&subject) {
            Some(Split::Valid)
        } else if self.test.contains(&subject) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDatasets {
    pub train: MultimodalDataset,
    pub valid: MultimodalDataset,
    pub test: MultimodalDataset,
}

/// Windows every recording and routes each window to the split of its
/// subject. Labeled datasets keep only windows whose label maps to a class;
/// unlabeled ones keep every window.
///
/// `require_validation` rejects an empty validation split (needed whenever
/// early stopping is on).
pub fn split_by_subject(
    recordings: &[Recording],
    split: &SubjectSplit,
    params: &WindowingParams,
    labeled: bool,
    class_names: &[String],
    require_validation: bool,
) -> Result<SplitDatasets> {
    split.validate()?;
    if split.valid.is_empty() && require_validation {
        return Err(Error::Config("validation split is empty but early stopping needs it".into()));
    }
    if let Some(r) = recordings.iter().find(|r| split.split_of(r.subject).is_none()) {
        return Err(Error::Config(format!("subject {} (recording {}) is not assigned to any split", r.subject, r.id)));
    }
    let mut windows = Vec::new();
    for rec in recordings {
        windows.extend(window_recording(rec, params)?);
    }
    let classes: Vec<i64> = if !params.classes.is_empty() {
        params.classes.clone()
    } else {
        windows
            .iter()
            .filter_map(|w| w.raw_label)
            .filter(|l| !params.exclude_labels.contains(l))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    };
    if labeled && classes.is_empty() {
        return Err(Error::Data("no labeled windows found".into()));
    }
    let class_of: BTreeMap<i64, usize> = classes
        .iter()
        .filter(|l| !params.exclude_labels.contains(l))
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();
    let names: Vec<String> = if labeled {
        if class_names.is_empty() {
            class_of.keys().map(|l| l.to_string()).collect()
        } else if class_names.len() == class_of.len() {
            class_names.to_vec()
        } else {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                class_names.len(),
                class_of.len()
            )));
        }
    } else {
        Vec::new()
    };

    let modalities: Option<Vec<ModalityInfo>> = windows.first().map(|w| {
        w.windows
            .values()
            .map(|win| {
                let stream = recordings
                    .iter()
                    .flat_map(|r| &r.streams)
                    .find(|s| s.modality_id == win.modality_id)
                    .expect("window comes from a stream");
                ModalityInfo {
                    id: win.modality_id.clone(),
                    channels: win.data.ncols(),
                    rate_hz: params.rates.get(&win.modality_id).copied().unwrap_or(stream.rate_hz),
                    window_len: win.data.nrows(),
                }
            })
            .collect()
    });
    let modalities = modalities.ok_or_else(|| Error::Data("recordings produced no windows".into()))?;

    let mut buckets: BTreeMap<Split, Vec<MultimodalSample>> = BTreeMap::new();
    for w in windows {
        let label = if labeled {
            match w.raw_label.and_then(|l| class_of.get(&l)) {
                Some(&c) => Some(c),
                None => continue,
            }
        } else {
            None
        };
        let split_id = split.split_of(w.subject).expect("checked above");
        buckets.entry(split_id).or_default().push(MultimodalSample {
            key: w.key,
            subject: Some(w.subject),
            label,
            windows: w.windows,
        });
    }
    let mut make = |s: Split| {
        MultimodalDataset::new(s, labeled, modalities.clone(), names.clone(), buckets.remove(&s).unwrap_or_default())
    };
    Ok(SplitDatasets {
        train: make(Split::Train)?,
        valid: make(Split::Valid)?,
        test: make(Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn recording(id: &str, subject: u32, seconds: usize, label_of: impl Fn(usize) -> i64) -> Recording {
        let rate = 10.0;
        let n = seconds * 10;
        let ts: Vec<f64> = (0..n).map(|i| i as f64 / rate).collect();
        let acc = SensorStream::new("acc", rate, ts.clone(), Array2::from_shape_fn((n, 3), |(i, c)| (i + c) as f64), vec!["x".into(), "y".into(), "z".into()]).unwrap();
        // skeleton at 5 Hz, shifted start
        let ts2: Vec<f64> = (0..seconds * 5).map(|i| 0.05 + i as f64 / 5.0).collect();
        let sk = SensorStream::new("skel", 5.0, ts2.clone(), Array2::from_shape_fn((ts2.len(), 6), |(i, c)| (i * c) as f64), (0..6).map(|c| format!("j{c}")).collect()).unwrap();
        let labels = LabelTrack { timestamps: ts.clone(), labels: (0..n).map(|i| label_of(i / 10)).collect() };
        Recording { id: id.into(), subject, streams: vec![acc, sk], labels: Some(labels) }
    }

    fn params() -> WindowingParams {
        let mut p = WindowingParams::new(2.0);
        p.rates.insert("acc".into(), 10.0);
        p.rates.insert("skel".into(), 5.0);
        p.skeleton_dims.insert("skel".into(), 3);
        p.exclude_labels = vec![0];
        p
    }

    #[test]
    fn windows_are_aligned_across_modalities() {
        let rec = recording("r1", 1, 20, |s| (s % 3) as i64);
        let w = window_recording(&rec, &params()).unwrap();
        assert!(!w.is_empty());
        for kw in &w {
            assert_eq!(kw.windows.len(), 2);
            let starts: Vec<i64> = kw.windows.values().map(|x| (x.start_time * 1000.0).round() as i64).collect();
            assert!(starts.iter().all(|&s| s == kw.key.start_ms));
            assert_eq!(kw.windows["acc"].data.dim(), (20, 3));
            assert_eq!(kw.windows["skel"].data.dim(), (10, 6));
        }
        // step defaults to half the window
        assert_eq!(w[1].key.start_ms - w[0].key.start_ms, 1000);
    }

    #[test]
    fn splits_by_subject_without_leakage() {
        let recs: Vec<Recording> = (1..=6).map(|s| recording(&format!("r{s}"), s, 12, |t| (t % 4) as i64)).collect();
        let split = SubjectSplit::hold_out_last_train([1, 2, 3, 4], [5, 6]).unwrap();
        assert_eq!(split.valid, BTreeSet::from([4]));
        let d = split_by_subject(&recs, &split, &params(), true, &[], true).unwrap();
        let subjects = |ds: &MultimodalDataset| ds.subjects();
        assert_eq!(subjects(&d.train), BTreeSet::from([1, 2, 3]));
        assert_eq!(subjects(&d.valid), BTreeSet::from([4]));
        assert_eq!(subjects(&d.test), BTreeSet::from([5, 6]));
        // label 0 excluded from the labeled set, so 3 classes remain
        assert_eq!(d.train.num_classes(), 3);
        let u = split_by_subject(&recs, &split, &params(), false, &[], true).unwrap();
        assert!(u.train.len() > d.train.len());
        assert_eq!(subjects(&u.train), subjects(&d.train));
    }

    #[test]
    fn configuration_errors() {
        assert!(matches!(SubjectSplit::new([1, 2], [2], [3]), Err(Error::Config(_))));
        let recs = vec![recording("r9", 9, 10, |_| 1)];
        let split = SubjectSplit::new([1], [2], [3]).unwrap();
        assert!(matches!(split_by_subject(&recs, &split, &params(), true, &[], true), Err(Error::Config(_))));
        let no_valid = SubjectSplit::new([9], [], [3]).unwrap();
        assert!(matches!(split_by_subject(&recs, &no_valid, &params(), true, &[], true), Err(Error::Config(_))));
        assert!(split_by_subject(&recs, &no_valid, &params(), true, &[], false).is_ok());
    }
}
