//! Generic CSV recordings.
//!
//! One file per (recording, modality): a header row, a timestamp column in
//! seconds and one column per channel. A manifest CSV lists the files with
//! `path, subject_id, modality_id, rate_hz` and an optional `recording_id`
//! (defaulting to the subject).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::split::Recording;
use super::SensorStream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub modality_id: String,
    /// Nominal rate; estimated from the median timestamp step when absent.
    #[serde(default)]
    pub rate_hz: Option<f64>,
    #[serde(default = "default_timestamp_column")]
    pub timestamp_column: String,
    /// Channel columns in order; all non-excluded columns when absent.
    #[serde(default)]
    pub channels: Option<Vec<String>>,
    /// Columns that are never channels (labels, ids).
    #[serde(default)]
    pub exclude_columns: Vec<String>,
}

fn default_timestamp_column() -> String {
    "timestamp".to_string()
}

impl CsvSchema {
    pub fn new(modality_id: impl Into<String>) -> Self {
        Self {
            modality_id: modality_id.into(),
            rate_hz: None,
            timestamp_column: default_timestamp_column(),
            channels: None,
            exclude_columns: Vec::new(),
        }
    }
}

fn parse_cell(cell: &str) -> f64 {
    let t = cell.trim();
    if t.is_empty() {
        f64::NAN
    } else {
        t.parse::<f64>().unwrap_or(f64::NAN)
    }
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::ingestion(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Format(format!("{}: missing column `{name}`", path.display())))
}

fn check_timestamps(ts: &[f64], path: &Path) -> Result<()> {
    if let Some(i) = ts.iter().position(|t| !t.is_finite()) {
        return Err(Error::Format(format!("{}: non-finite timestamp at data row {}", path.display(), i + 1)));
    }
    if let Some(i) = ts.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::Format(format!(
            "{}: timestamps not strictly increasing at data row {}",
            path.display(),
            i + 2
        )));
    }
    Ok(())
}

/// Fills non-finite entries of one channel by linear interpolation between
/// the nearest finite neighbours; leading/trailing gaps take the nearest
/// finite value.
fn interpolate_gaps(ts: &[f64], col: &mut [f64]) -> bool {
    let finite: Vec<usize> = (0..col.len()).filter(|&i| col[i].is_finite()).collect();
    if finite.is_empty() {
        return false;
    }
    for i in 0..col.len() {
        if col[i].is_finite() {
            continue;
        }
        let p = finite.partition_point(|&f| f < i);
        let left = p.checked_sub(1).map(|k| finite[k]);
        let right = finite.get(p).copied();
        col[i] = match (left, right) {
            (Some(l), Some(r)) => {
                let w = (ts[i] - ts[l]) / (ts[r] - ts[l]);
                col[l] + w * (col[r] - col[l])
            }
            (Some(l), None) => col[l],
            (None, Some(r)) => col[r],
            (None, None) => unreachable!(),
        };
    }
    true
}

fn median_step(ts: &[f64]) -> Option<f64> {
    let mut d: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    Some(d[d.len() / 2])
}

/// Reads one modality of one recording.
pub fn load_csv_recording(path: &Path, schema: &CsvSchema) -> Result<SensorStream> {
    let (header, rows) = read_table(path)?;
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let t_col = column(&header, &schema.timestamp_column, path)?;
    let channel_names: Vec<String> = match &schema.channels {
        Some(c) => c.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, h)| *i != t_col && !schema.exclude_columns.contains(h))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if channel_names.is_empty() {
        return Err(Error::Format(format!("{}: no channel columns", path.display())));
    }
    let idx: Vec<usize> = channel_names.iter().map(|c| column(&header, c, path)).collect::<Result<_>>()?;
    let ts: Vec<f64> = rows.iter().map(|r| parse_cell(&r[t_col])).collect();
    check_timestamps(&ts, path)?;
    let mut values = Array2::<f64>::zeros((rows.len(), idx.len()));
    for (i, r) in rows.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            values[[i, c]] = parse_cell(&r[j]);
        }
    }
    for (c, name) in channel_names.iter().enumerate() {
        let mut col = values.column(c).to_vec();
        if !interpolate_gaps(&ts, &mut col) {
            return Err(Error::Format(format!("{}: column `{name}` has no finite values", path.display())));
        }
        values.column_mut(c).assign(&ndarray::Array1::from(col));
    }
    let rate = match schema.rate_hz {
        Some(r) => r,
        None => median_step(&ts).map(|d| 1.0 / d).unwrap_or(1.0),
    };
    SensorStream::new(schema.modality_id.clone(), rate, ts, values, channel_names)
}

/// Integer activity labels over time.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTrack {
    pub timestamps: Vec<f64>,
    pub labels: Vec<i64>,
}

impl LabelTrack {
    /// Most frequent label among samples in `[start, end)`; ties go to the
    /// smaller label.
    pub fn majority(&self, start: f64, end: f64) -> Option<i64> {
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        let lo = self.timestamps.partition_point(|&t| t < start - 1e-9);
        for (t, l) in self.timestamps[lo..].iter().zip(&self.labels[lo..]) {
            if *t >= end - 1e-9 {
                break;
            }
            *counts.entry(*l).or_default() += 1;
        }
        counts.into_iter().fold(None, |best: Option<(i64, usize)>, (l, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((l, c)),
        })
        .map(|(l, _)| l)
    }
}

pub fn load_csv_labels(path: &Path, timestamp_column: &str, label_column: &str) -> Result<LabelTrack> {
    let (header, rows) = read_table(path)?;
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let t = column(&header, timestamp_column, path)?;
    let l = column(&header, label_column, path)?;
    let timestamps: Vec<f64> = rows.iter().map(|r| parse_cell(&r[t])).collect();
    check_timestamps(&timestamps, path)?;
    let labels = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let v = parse_cell(&r[l]);
            if v.is_finite() && v.fract() == 0.0 {
                Ok(v as i64)
            } else {
                Err(Error::Format(format!("{}: bad label `{}` at data row {}", path.display(), r[l], i + 1)))
            }
        })
        .collect::<Result<_>>()?;
    Ok(LabelTrack { timestamps, labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub subject_id: u32,
    pub modality_id: String,
    pub rate_hz: f64,
    #[serde(default)]
    pub recording_id: Option<String>,
}

/// Reads the sidecar manifest; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::ingestion(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for row in reader.deserialize::<ManifestEntry>() {
        let mut e = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
        if !(e.rate_hz > 0.0) {
            return Err(Error::Format(format!("{}: rate_hz must be > 0 for {}", path.display(), e.path.display())));
        }
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: manifest lists no files", path.display())));
    }
    Ok(out)
}

/// Loads every file of a manifest and groups them into recordings.
///
/// With `label_column`, the column is excluded from channels and the label
/// track of a recording is taken from the first of its files (in manifest
/// order) that has it.
pub fn load_recordings(manifest: &Path, timestamp_column: &str, label_column: Option<&str>) -> Result<Vec<Recording>> {
    let entries = load_manifest(manifest)?;
    let mut grouped: BTreeMap<String, Vec<ManifestEntry>> = BTreeMap::new();
    for e in entries {
        let id = e.recording_id.clone().unwrap_or_else(|| format!("subject{}", e.subject_id));
        grouped.entry(id).or_default().push(e);
    }
    let mut out = Vec::new();
    for (id, files) in grouped {
        let subject = files[0].subject_id;
        if files.iter().any(|f| f.subject_id != subject) {
            return Err(Error::Consistency(format!("recording {id} mixes subjects")));
        }
        let mut streams = Vec::new();
        let mut labels = None;
        for f in &files {
            if !f.path.exists() {
                return Err(Error::ingestion(&f.path, "file not found"));
            }
            let schema = CsvSchema {
                rate_hz: Some(f.rate_hz),
                timestamp_column: timestamp_column.to_string(),
                exclude_columns: label_column.map(|l| vec![l.to_string()]).unwrap_or_default(),
                ..CsvSchema::new(f.modality_id.clone())
            };
            streams.push(load_csv_recording(&f.path, &schema)?);
            if let (None, Some(col)) = (&labels, label_column) {
                let (header, _) = read_table(&f.path)?;
                if header.iter().any(|h| h == col) {
                    labels = Some(load_csv_labels(&f.path, timestamp_column, col)?);
                }
            }
        }
        let distinct: std::collections::BTreeSet<_> = streams.iter().map(|s| &s.modality_id).collect();
        if distinct.len() != streams.len() {
            return Err(Error::Consistency(format!("recording {id} lists a modality twice")));
        }
        out.push(Recording { id, subject, streams, labels });
    }
    Ok(out)
}
