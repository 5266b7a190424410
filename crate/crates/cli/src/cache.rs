//! Prepared datasets on disk, keyed by a content hash of the raw data and
//! the dataset section of the config.
//!
//! Layout of one entry: `<root>/<hash>/<part>.json` (metadata, keys, labels)
//! and `<part>.bin` (little-endian `f32` windows, sample by sample, modality
//! by modality). `manifest.json` is written last and marks the entry
//! complete.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;

use vfusion_core::datasets::{
    carve_validation, generate_synthetic, load_recordings, load_uci_har, split_by_subject, ModalityInfo,
    MultimodalDataset, MultimodalSample, SampleKey, Split, SubjectSplit, WindowSample,
};
use vfusion_core::{Error, Result};

use crate::config::{DatasetConfig, UnlabeledSource};

pub const CACHE_ENV: &str = "VFUSION_CACHE_DIR";
const FORMAT: &str = "vfusion-cache-1";

/// Datasets of one experiment, ready for training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub hash: String,
    pub train: MultimodalDataset,
    pub valid: MultimodalDataset,
    pub test: MultimodalDataset,
    pub unlabeled: Option<MultimodalDataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format: String,
    pub hash: String,
    pub dataset: DatasetConfig,
    pub counts: BTreeMap<String, usize>,
}

/// `$VFUSION_CACHE_DIR`, else `<out_dir>/cache`.
pub fn cache_root(out_dir: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| out_dir.join("cache"))
}

fn hash_file(h: &mut Sha256, path: &Path) -> Result<()> {
    let mut f = File::open(path).map_err(|e| Error::Ingestion { path: path.into(), reason: e.to_string() })?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(())
}

/// Raw files an adapter reads, in a stable order.
fn raw_files(dataset: &DatasetConfig) -> Result<Vec<PathBuf>> {
    match dataset {
        DatasetConfig::Synthetic { .. } => Ok(Vec::new()),
        DatasetConfig::UciHar { root, .. } => {
            if !root.is_dir() {
                return Err(Error::Ingestion { path: root.clone(), reason: "dataset root not found".into() });
            }
            let mut files = Vec::new();
            for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
                let entry = entry.map_err(|e| Error::Ingestion { path: root.clone(), reason: e.to_string() })?;
                if entry.file_type().is_file() && entry.path().extension().is_some_and(|x| x == "txt") {
                    files.push(entry.into_path());
                }
            }
            Ok(files)
        }
        DatasetConfig::Csv { manifest, unlabeled_manifest, .. } => {
            let mut files = Vec::new();
            for m in std::iter::once(manifest).chain(unlabeled_manifest) {
                files.push(m.clone());
                files.extend(vfusion_core::datasets::load_manifest(m)?.into_iter().map(|e| e.path));
            }
            Ok(files)
        }
    }
}

/// Content hash of the raw data plus the preprocessing parameters.
pub fn content_hash(dataset: &DatasetConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(FORMAT.as_bytes());
    h.update(serde_json::to_vec(dataset)?);
    for f in raw_files(dataset)? {
        h.update(f.to_string_lossy().as_bytes());
        hash_file(&mut h, &f)?;
    }
    Ok(format!("{:x}", h.finalize()))
}

fn build(dataset: &DatasetConfig, hash: String) -> Result<Prepared> {
    match dataset {
        DatasetConfig::Synthetic { seed, params } => {
            let d = generate_synthetic(params, *seed)?;
            let unlabeled = (!d.unlabeled.is_empty()).then_some(d.unlabeled);
            Ok(Prepared { hash, train: d.labeled.train, valid: d.labeled.valid, test: d.labeled.test, unlabeled })
        }
        DatasetConfig::UciHar { root, valid_fraction } => {
            let (train, test) = load_uci_har(root)?;
            let (train, valid) = carve_validation(&train, *valid_fraction)?;
            Ok(Prepared { hash, train, valid, test, unlabeled: None })
        }
        DatasetConfig::Csv {
            manifest,
            timestamp_column,
            label_column,
            windowing,
            split,
            class_names,
            unlabeled,
            unlabeled_manifest,
        } => {
            let split = if split.valid.is_empty() {
                SubjectSplit::hold_out_last_train(split.train.iter().copied(), split.test.iter().copied())?
            } else {
                split.clone()
            };
            let recordings = load_recordings(manifest, timestamp_column, Some(label_column))?;
            let labeled = split_by_subject(&recordings, &split, windowing, true, class_names, true)?;
            let pool = match unlabeled {
                UnlabeledSource::None => None,
                UnlabeledSource::Train => Some(split_by_subject(&recordings, &split, windowing, false, &[], false)?.train),
                UnlabeledSource::Manifest => {
                    let path = unlabeled_manifest.as_ref().expect("validated");
                    let extra = load_recordings(path, timestamp_column, None)?;
                    Some(split_by_subject(&extra, &split, windowing, false, &[], false)?.train)
                }
            };
            Ok(Prepared { hash, train: labeled.train, valid: labeled.valid, test: labeled.test, unlabeled: pool })
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StoredSample {
    key: SampleKey,
    subject: Option<u32>,
    label: Option<usize>,
    start_time: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredDataset {
    split: Split,
    labeled: bool,
    modalities: Vec<ModalityInfo>,
    class_names: Vec<String>,
    samples: Vec<StoredSample>,
}

fn write_dataset(ds: &MultimodalDataset, dir: &Path, part: &str) -> Result<()> {
    let meta = StoredDataset {
        split: ds.split(),
        labeled: ds.is_labeled(),
        modalities: ds.modalities().to_vec(),
        class_names: ds.class_names().to_vec(),
        samples: ds
            .samples()
            .iter()
            .map(|s| StoredSample {
                key: s.key.clone(),
                subject: s.subject,
                label: s.label,
                start_time: s.windows.iter().map(|(m, w)| (m.clone(), w.start_time)).collect(),
            })
            .collect(),
    };
    serde_json::to_writer(BufWriter::new(File::create(dir.join(format!("{part}.json")))?), &meta)?;
    let mut bin = BufWriter::new(File::create(dir.join(format!("{part}.bin")))?);
    for s in ds.samples() {
        for m in ds.modalities() {
            for v in s.windows[&m.id].data.iter() {
                bin.write_all(&v.to_le_bytes())?;
            }
        }
    }
    bin.flush()?;
    Ok(())
}

fn read_dataset(dir: &Path, part: &str) -> Result<MultimodalDataset> {
    let json = dir.join(format!("{part}.json"));
    let file = File::open(&json).map_err(|e| Error::Ingestion { path: json.clone(), reason: e.to_string() })?;
    let meta: StoredDataset = serde_json::from_reader(BufReader::new(file))?;
    let bin = dir.join(format!("{part}.bin"));
    let bytes = std::fs::read(&bin).map_err(|e| Error::Ingestion { path: bin.clone(), reason: e.to_string() })?;
    let per_sample: usize = meta.modalities.iter().map(|m| m.window_len * m.channels).sum();
    if bytes.len() != 4 * per_sample * meta.samples.len() {
        return Err(Error::Consistency(format!("{} has {} bytes, expected {}", bin.display(), bytes.len(), 4 * per_sample * meta.samples.len())));
    }
    let mut values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let mut samples = Vec::with_capacity(meta.samples.len());
    for s in meta.samples {
        let mut windows = BTreeMap::new();
        for m in &meta.modalities {
            let data: Vec<f32> = values.by_ref().take(m.window_len * m.channels).collect();
            let start_time = *s
                .start_time
                .get(&m.id)
                .ok_or_else(|| Error::Consistency(format!("{}: sample {:?} lacks modality {}", json.display(), s.key, m.id)))?;
            let data = Array2::from_shape_vec((m.window_len, m.channels), data).map_err(|e| Error::Shape(e.to_string()))?;
            windows.insert(m.id.clone(), WindowSample { modality_id: m.id.clone(), start_time, data, label: s.label });
        }
        samples.push(MultimodalSample { key: s.key, subject: s.subject, label: s.label, windows });
    }
    MultimodalDataset::new(meta.split, meta.labeled, meta.modalities, meta.class_names, samples)
}

fn parts(p: &Prepared) -> Vec<(&'static str, &MultimodalDataset)> {
    let mut v = vec![("train", &p.train), ("valid", &p.valid), ("test", &p.test)];
    if let Some(u) = &p.unlabeled {
        v.push(("unlabeled", u));
    }
    v
}

/// Builds and stores the datasets unless an entry with the same hash
/// exists. Returns the entry directory and whether it was created.
pub fn prepare(dataset: &DatasetConfig, root: &Path) -> Result<(PathBuf, CacheManifest, bool)> {
    let hash = content_hash(dataset)?;
    let dir = root.join(&hash);
    let manifest_path = dir.join("manifest.json");
    if let Ok(bytes) = std::fs::read(&manifest_path) {
        let manifest: CacheManifest = serde_json::from_slice(&bytes)?;
        if manifest.hash == hash && manifest.format == FORMAT {
            info!(hash = %hash, "cache hit");
            return Ok((dir, manifest, false));
        }
    }
    let prepared = build(dataset, hash.clone())?;
    std::fs::create_dir_all(&dir)?;
    let mut counts = BTreeMap::new();
    for (name, ds) in parts(&prepared) {
        write_dataset(ds, &dir, name)?;
        counts.insert(name.to_string(), ds.len());
    }
    let manifest = CacheManifest { format: FORMAT.into(), hash, dataset: dataset.clone(), counts };
    std::fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    info!(dir = %dir.display(), "cache written");
    Ok((dir, manifest, true))
}

/// Prepares if needed, then loads the entry.
pub fn load(dataset: &DatasetConfig, root: &Path) -> Result<Prepared> {
    let (dir, manifest, _) = prepare(dataset, root)?;
    let unlabeled = if manifest.counts.contains_key("unlabeled") { Some(read_dataset(&dir, "unlabeled")?) } else { None };
    Ok(Prepared {
        hash: manifest.hash,
        train: read_dataset(&dir, "train")?,
        valid: read_dataset(&dir, "valid")?,
        test: read_dataset(&dir, "test")?,
        unlabeled,
    })
}
