//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vfusion_core::augmentation::AugmentationPolicy;
use vfusion_core::datasets::{SubjectSplit, SyntheticConfig, WindowingParams};
use vfusion_core::model::ModalityGraph;
use vfusion_core::nn::ExtractorConfig;
use vfusion_core::objectives::LossConfig;
use vfusion_core::training::{TrainConfig, TrainSettings};

use crate::CliError;

/// Where the unlabeled pool of a CSV dataset comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlabeledSource {
    /// The labeled training set also feeds the contrastive loss.
    #[default]
    None,
    /// Every window of the training subjects, including excluded labels.
    Train,
    /// Windows of the training subjects in `unlabeled_manifest`.
    Manifest,
}

fn default_valid_fraction() -> f64 {
    0.1
}

fn default_timestamp_column() -> String {
    "timestamp".into()
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "adapter", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        params: SyntheticConfig,
    },
    UciHar {
        root: PathBuf,
        /// Share of training windows moved (by whole subjects) to validation.
        #[serde(default = "default_valid_fraction")]
        valid_fraction: f64,
    },
    Csv {
        manifest: PathBuf,
        #[serde(default = "default_timestamp_column")]
        timestamp_column: String,
        label_column: String,
        windowing: WindowingParams,
        /// An empty `valid` set holds out the last training subject.
        split: SubjectSplit,
        #[serde(default)]
        class_names: Vec<String>,
        #[serde(default)]
        unlabeled: UnlabeledSource,
        #[serde(default)]
        unlabeled_manifest: Option<PathBuf>,
    },
}

impl DatasetConfig {
    /// Resolves relative paths against `base`.
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetConfig::Synthetic { .. } => {}
            DatasetConfig::UciHar { root, .. } => fix(root),
            DatasetConfig::Csv { manifest, unlabeled_manifest, .. } => {
                fix(manifest);
                if let Some(p) = unlabeled_manifest {
                    fix(p);
                }
            }
        }
    }

    fn validate(&self) -> vfusion_core::Result<()> {
        use vfusion_core::Error;
        match self {
            DatasetConfig::Synthetic { params, .. } => params.validate(),
            DatasetConfig::UciHar { valid_fraction, .. } => {
                if (0.0..1.0).contains(valid_fraction) && *valid_fraction > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("valid_fraction must be in (0, 1), got {valid_fraction}")))
                }
            }
            DatasetConfig::Csv { windowing, unlabeled, unlabeled_manifest, .. } => {
                if !(windowing.window_s > 0.0) || windowing.step_s.is_some_and(|s| !(s > 0.0)) {
                    return Err(Error::Config("window_s and step_s must be > 0".into()));
                }
                match (unlabeled, unlabeled_manifest) {
                    (UnlabeledSource::Manifest, None) => {
                        Err(Error::Config("unlabeled = \"manifest\" needs unlabeled_manifest".into()))
                    }
                    (UnlabeledSource::None | UnlabeledSource::Train, Some(_)) => {
                        Err(Error::Config("unlabeled_manifest is only read with unlabeled = \"manifest\"".into()))
                    }
                    _ => Ok(()),
                }
            }
        }
    }
}

/// Loss settings plus the loss-set ablations of late-fusion graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub temperature: f64,
    pub two_view: bool,
    pub epsilon: f64,
    /// Drop the inputs of late-fusion nodes from both loss sets.
    pub exclude_fusion_inputs: bool,
    /// Drop late-fusion nodes from both loss sets.
    pub exclude_fused: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            temperature: l.temperature,
            two_view: l.two_view,
            epsilon: l.epsilon,
            exclude_fusion_inputs: false,
            exclude_fused: false,
        }
    }
}

impl LossSection {
    pub fn loss(&self) -> LossConfig {
        LossConfig { temperature: self.temperature, two_view: self.two_view, epsilon: self.epsilon }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Experiment name; runs go to `<out_dir>/<name>/<seed>/`.
    pub name: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub graph: ModalityGraph,
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.resolve(base);
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok((cfg, text))
    }

    /// Schema check with the path of the offending field, then semantic
    /// validation of every section.
    pub fn parse(text: &str) -> Result<Self, String> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().to_string();
            if path == "." { msg } else { format!("at `{path}`: {msg}") }
        })?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    fn validate(&self) -> vfusion_core::Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(vfusion_core::Error::Config(format!("name `{}` is not a valid directory name", self.name)));
        }
        self.dataset.validate()?;
        self.graph()?;
        self.extractor.validate()?;
        self.settings().loss.validate()?;
        self.augmentation.validate()?;
        self.train.validate()
    }

    /// The graph with the loss ablations applied.
    pub fn graph(&self) -> vfusion_core::Result<ModalityGraph> {
        self.graph.ablate(self.loss.exclude_fusion_inputs, self.loss.exclude_fused)
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings { train: self.train.clone(), loss: self.loss.loss(), augmentation: self.augmentation.clone() }
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }
}
