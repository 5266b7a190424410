//! UCI-HAR in its standard distribution layout.
//!
//! ```text
//! <root>/
//!   activity_labels.txt            (optional)
//!   train/y_train.txt
//!   train/subject_train.txt
//!   train/Inertial Signals/total_acc_{x,y,z}_train.txt
//!   train/Inertial Signals/body_gyro_{x,y,z}_train.txt
//!   test/...                       (same with _test)
//! ```
//!
//! Every signal file holds one pre-cut window per line (128 samples at
//! 50 Hz). The accelerometer modality uses total acceleration, the
//! gyroscope modality the body angular velocity.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{ModalityInfo, MultimodalDataset, MultimodalSample, SampleKey, Split, WindowSample};
use crate::{Error, Result};

pub const UCI_HAR_WINDOW_LEN: usize = 128;
const RATE_HZ: f64 = 50.0;
const STEP_MS: i64 = 1280;

const DEFAULT_CLASSES: [&str; 6] = [
    "WALKING",
    "WALKING_UPSTAIRS",
    "WALKING_DOWNSTAIRS",
    "SITTING",
    "STANDING",
    "LAYING",
];

const MODALITIES: [(&str, &str); 2] = [("accelerometer", "total_acc"), ("gyroscope", "body_gyro")];

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f32>>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let row: Vec<f32> = line
                .split_whitespace()
                .map(|v| v.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::ingestion(path, format!("line {}: {e}", i + 1)))?;
            if row.len() != UCI_HAR_WINDOW_LEN {
                return Err(Error::ingestion(
                    path,
                    format!("line {} has {} values, expected {UCI_HAR_WINDOW_LEN}", i + 1, row.len()),
                ));
            }
            Ok(row)
        })
        .collect()
}

fn read_ints(path: &Path) -> Result<Vec<i64>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<i64>()
                .map_err(|e| Error::ingestion(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn class_names(root: &Path) -> Result<Vec<String>> {
    let path = root.join("activity_labels.txt");
    if !path.exists() {
        return Ok(DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect());
    }
    let mut named: BTreeMap<i64, String> = BTreeMap::new();
    for line in read_lines(&path)? {
        let mut parts = line.split_whitespace();
        let (Some(id), Some(name)) = (parts.next(), parts.next()) else {
            return Err(Error::ingestion(&path, format!("malformed line `{line}`")));
        };
        let id = id.parse::<i64>().map_err(|e| Error::ingestion(&path, e.to_string()))?;
        named.insert(id, name.to_string());
    }
    Ok(named.into_values().collect())
}

fn load_split(root: &Path, split: Split, names: &[String]) -> Result<MultimodalDataset> {
    let tag = match split {
        Split::Train => "train",
        Split::Test => "test",
        Split::Valid => return Err(Error::Internal("UCI-HAR has no validation files".into())),
    };
    let dir = root.join(tag);
    let labels = read_ints(&dir.join(format!("y_{tag}.txt")))?;
    let subjects = read_ints(&dir.join(format!("subject_{tag}.txt")))?;
    if subjects.len() != labels.len() {
        return Err(Error::Consistency(format!(
            "{tag}: {} subject rows but {} labels",
            subjects.len(),
            labels.len()
        )));
    }
    let mut signals: BTreeMap<&str, Vec<Vec<Vec<f32>>>> = BTreeMap::new();
    for (modality, prefix) in MODALITIES {
        let mut axes = Vec::new();
        for axis in ["x", "y", "z"] {
            let path: PathBuf = dir.join("Inertial Signals").join(format!("{prefix}_{axis}_{tag}.txt"));
            if !path.exists() {
                return Err(Error::ingestion(&path, "missing signal file"));
            }
            let m = read_matrix(&path)?;
            if m.len() != labels.len() {
                return Err(Error::Consistency(format!(
                    "{}: {} windows but {} labels",
                    path.display(),
                    m.len(),
                    labels.len()
                )));
            }
            axes.push(m);
        }
        signals.insert(modality, axes);
    }

    let mut per_subject: BTreeMap<i64, i64> = BTreeMap::new();
    let mut samples = Vec::with_capacity(labels.len());
    for (i, (&y, &subject)) in labels.iter().zip(&subjects).enumerate() {
        if y < 1 || y as usize > names.len() {
            return Err(Error::Data(format!("{tag}: label {y} at row {} out of range", i + 1)));
        }
        let slot = per_subject.entry(subject).or_default();
        let key = SampleKey {
            recording: format!("{tag}-subject{subject}"),
            start_ms: *slot * STEP_MS,
        };
        *slot += 1;
        let windows = signals
            .iter()
            .map(|(&modality, axes)| {
                let data = Array2::from_shape_fn((UCI_HAR_WINDOW_LEN, 3), |(t, c)| axes[c][i][t]);
                let w = WindowSample {
                    modality_id: modality.to_string(),
                    start_time: key.start_ms as f64 / 1000.0,
                    data,
                    label: None,
                };
                (modality.to_string(), w)
            })
            .collect();
        samples.push(MultimodalSample {
            key,
            subject: Some(subject as u32),
            label: Some((y - 1) as usize),
            windows,
        });
    }
    let modalities = MODALITIES
        .iter()
        .map(|(m, _)| ModalityInfo {
            id: m.to_string(),
            channels: 3,
            rate_hz: RATE_HZ,
            window_len: UCI_HAR_WINDOW_LEN,
        })
        .collect();
    MultimodalDataset::new(split, true, modalities, names.to_vec(), samples)
}

/// Loads the official train and test partitions.
pub fn load_uci_har(root: &Path) -> Result<(MultimodalDataset, MultimodalDataset)> {
    if !root.is_dir() {
        return Err(Error::ingestion(root, "dataset root not found"));
    }
    let names = class_names(root)?;
    Ok((load_split(root, Split::Train, &names)?, load_split(root, Split::Test, &names)?))
}

/// Moves whole subjects (highest ids first) from `train` into a validation
/// set until it holds at least `fraction` of the windows.
pub fn carve_validation(train: &MultimodalDataset, fraction: f64) -> Result<(MultimodalDataset, MultimodalDataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("validation fraction must be in [0, 1), got {fraction}")));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for s in train.samples() {
        let subject = s
            .subject
            .ok_or_else(|| Error::Data("validation carving needs subject ids".into()))?;
        *counts.entry(subject).or_default() += 1;
    }
    let target = (fraction * train.len() as f64).ceil() as usize;
    let mut held = std::collections::BTreeSet::new();
    let mut taken = 0;
    for (&subject, &n) in counts.iter().rev() {
        if taken >= target || held.len() + 1 == counts.len() {
            break;
        }
        held.insert(subject);
        taken += n;
    }
    let is_held = |s: &MultimodalSample| s.subject.is_some_and(|x| held.contains(&x));
    let rest = train.filter(|s| !is_held(s))?;
    let valid = train.filter(is_held)?.with_split(Split::Valid);
    Ok((rest, valid))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::fmt::Write as _;

    /// Writes a miniature copy of the distribution layout.
    pub fn write_fixture(root: &Path, train_rows: usize, test_rows: usize) {
        for (tag, rows) in [("train", train_rows), ("test", test_rows)] {
            let dir = root.join(tag).join("Inertial Signals");
            std::fs::create_dir_all(&dir).unwrap();
            let mut y = String::new();
            let mut subj = String::new();
            for r in 0..rows {
                writeln!(y, "{}", r % 6 + 1).unwrap();
                writeln!(subj, "{}", 1 + r / 4).unwrap();
            }
            std::fs::write(root.join(tag).join(format!("y_{tag}.txt")), y).unwrap();
            std::fs::write(root.join(tag).join(format!("subject_{tag}.txt")), subj).unwrap();
            for prefix in ["total_acc", "body_gyro"] {
                for (a, axis) in ["x", "y", "z"].iter().enumerate() {
                    let mut body = String::new();
                    for r in 0..rows {
                        let line: Vec<String> = (0..UCI_HAR_WINDOW_LEN)
                            .map(|t| format!("{:.6e}", (r * 1000 + a * 100 + t) as f32 * 1e-3))
                            .collect();
                        writeln!(body, "  {}", line.join(" ")).unwrap();
                    }
                    std::fs::write(dir.join(format!("{prefix}_{axis}_{tag}.txt")), body).unwrap();
                }
            }
        }
    }

    #[test]
    fn loads_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 12, 7);
        let (train, test) = load_uci_har(dir.path()).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 7);
        assert_eq!(train.num_classes(), 6);
        assert_eq!(train.modality_ids().into_iter().collect::<Vec<_>>(), vec!["accelerometer", "gyroscope"]);
        let lens: Vec<usize> = train
            .samples()
            .iter()
            .flat_map(|s| s.windows.values().map(|w| w.data.nrows()))
            .collect();
        assert!(lens.iter().all(|&l| l == (2.56f64 * 50.0).round() as usize));
        let w = &train.sample(3).windows["accelerometer"];
        assert!((w.data[[5, 1]] - (3 * 1000 + 100 + 5) as f32 * 1e-3).abs() < 1e-6);
        assert_eq!(train.sample(3).label, Some(3));
    }

    #[test]
    fn missing_axis_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 4, 4);
        std::fs::remove_file(dir.path().join("train/Inertial Signals/body_gyro_y_train.txt")).unwrap();
        match load_uci_har(dir.path()) {
            Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("body_gyro_y_train.txt")),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn label_count_mismatch_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 4, 4);
        std::fs::write(dir.path().join("test/y_test.txt"), "1\n2\n3\n").unwrap();
        std::fs::write(dir.path().join("test/subject_test.txt"), "1\n1\n1\n").unwrap();
        assert!(matches!(load_uci_har(dir.path()), Err(Error::Consistency(_))));
    }

    #[test]
    fn validation_takes_whole_subjects() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 40, 4);
        let (train, _) = load_uci_har(dir.path()).unwrap();
        let (rest, valid) = carve_validation(&train, 0.1).unwrap();
        assert_eq!(rest.len() + valid.len(), 40);
        assert!(valid.len() >= 4);
        assert!(rest.subjects().is_disjoint(&valid.subjects()));
        assert_eq!(valid.subjects().into_iter().max(), train.subjects().into_iter().max());
    }
}
