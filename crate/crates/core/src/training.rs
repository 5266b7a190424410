//! Joint training loop, plateau schedule and multi-seed experiments.
//!
//! Every step draws one batch, computes the classification loss of all
//! classification nodes on the labeled part and the multi-view contrastive
//! loss of all contrastive nodes on the contrastive part, accumulates the
//! gradients of both and takes a single Adam step over every parameter.
//! After each epoch the model is scored on the validation set; the best
//! scoring model is kept.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::augmentation::AugmentationPolicy;
use crate::datasets::MultimodalDataset;
use crate::evaluation::{evaluate, NodeMetrics, Summary};
use crate::model::{Checkpoint, ModalityGraph, Model};
use crate::nn::{Adam, ExtractorConfig, Module};
use crate::objectives::{classification_loss_with_grad, multiview_contrastive_with_grad, total_loss, LossConfig};
use crate::sampling::{materialize, produce, Batch, BatchComposer, BatchSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate on a plateau.
    pub lr_decay_factor: f64,
    /// Non-improving epochs before each learning-rate decay.
    pub decay_patience: usize,
    /// Non-improving epochs before training stops.
    pub stop_patience: usize,
    pub max_epochs: usize,
    /// Overrides the default epoch length of one pass over the labeled set.
    pub steps_per_epoch: Option<usize>,
    pub seeds: Vec<u64>,
    /// Batch-building threads; 0 builds batches on the training thread.
    pub workers: usize,
    /// Batches each worker may build ahead.
    pub prefetch: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            lr_decay_factor: 0.1,
            decay_patience: 15,
            stop_patience: 30,
            max_epochs: 500,
            steps_per_epoch: None,
            seeds: vec![0, 1, 2],
            workers: 0,
            prefetch: 2,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch_size, max_epochs and eval_batch_size must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!("lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor)));
        }
        if self.decay_patience == 0 || self.stop_patience < self.decay_patience {
            return Err(Error::Config(format!(
                "need 0 < decay_patience ({}) <= stop_patience ({})",
                self.decay_patience, self.stop_patience
            )));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be > 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlateauSignal {
    Improved,
    Wait,
    Decay,
    Stop,
}

/// Counts epochs since the best score. Decay fires every `decay_patience`
/// non-improving epochs, stop once `stop_patience` is reached. Only a strict
/// increase counts as an improvement.
#[derive(Debug, Clone)]
pub struct PlateauTracker {
    decay_patience: usize,
    stop_patience: usize,
    best: Option<f64>,
    since_best: usize,
}

impl PlateauTracker {
    pub fn new(decay_patience: usize, stop_patience: usize) -> Self {
        Self { decay_patience, stop_patience, best: None, since_best: 0 }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn since_best(&self) -> usize {
        self.since_best
    }

    pub fn observe(&mut self, score: f64) -> PlateauSignal {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.since_best = 0;
            return PlateauSignal::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.stop_patience {
            PlateauSignal::Stop
        } else if self.since_best.is_multiple_of(self.decay_patience) {
            PlateauSignal::Decay
        } else {
            PlateauSignal::Wait
        }
    }
}

/// Learning rate driven by a [`PlateauTracker`].
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    tracker: PlateauTracker,
    lr: f64,
    factor: f64,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            tracker: PlateauTracker::new(cfg.decay_patience, cfg.stop_patience),
            lr: cfg.learning_rate,
            factor: cfg.lr_decay_factor,
        }
    }

    /// Learning rate for the next epoch.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn observe(&mut self, score: f64) -> PlateauSignal {
        let signal = self.tracker.observe(score);
        if signal == PlateauSignal::Decay {
            self.lr *= self.factor;
        }
        signal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub cls_loss: f64,
    pub ctr_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub cls_loss: f64,
    pub ctr_loss: f64,
    pub valid_f1: BTreeMap<String, f64>,
    pub monitored: f64,
    pub signal: PlateauSignal,
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub seed: u64,
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
}

/// Datasets a run trains on. `unlabeled` is ignored when the graph has no
/// contrastive nodes; without it the contrastive loss reuses the labeled
/// part of each batch.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub labeled: &'a MultimodalDataset,
    pub unlabeled: Option<&'a MultimodalDataset>,
    pub valid: &'a MultimodalDataset,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationPolicy,
}

/// Modalities each task of `graph` reads.
pub fn batch_spec(graph: &ModalityGraph) -> Result<BatchSpec> {
    Ok(BatchSpec {
        classification: graph.required_modalities(&graph.classification)?,
        contrastive: graph.required_modalities(&graph.contrastive)?,
    })
}

fn widen(x: &Array2<f32>) -> Array2<f64> {
    x.mapv(f64::from)
}

fn narrow(x: &Array2<f64>) -> Array2<f32> {
    x.mapv(|v| v as f32)
}

/// Forward, loss and backward of one batch. Parameter gradients are reset
/// first and hold the gradient of the total loss afterwards; the optimizer
/// step is left to the caller. Returns `(L_cls, L_ctr)`.
pub fn accumulate_gradients(model: &mut Model, batch: &Batch, loss: &LossConfig) -> Result<(f64, f64)> {
    let graph = model.graph().clone();
    model.zero_grad();

    let (z, cache) = model.forward_features(&graph.classification, &batch.classification)?;
    let mut scores = Vec::with_capacity(graph.classification.len());
    let mut head_caches = Vec::with_capacity(graph.classification.len());
    for n in &graph.classification {
        let (s, c) = model.head_forward(n, &z[n])?;
        scores.push(widen(&s));
        head_caches.push(c);
    }
    let views: Vec<ArrayView2<f64>> = scores.iter().map(|s| s.view()).collect();
    let (cls, score_grads) = classification_loss_with_grad(&views, &batch.labels)?;
    let mut dz = BTreeMap::new();
    for ((n, c), g) in graph.classification.iter().zip(&head_caches).zip(&score_grads) {
        dz.insert(n.clone(), model.head_backward(n, c, &narrow(g))?);
    }
    model.backward_features(&cache, &dz)?;

    let mut ctr = 0.0;
    if !graph.contrastive.is_empty() {
        let (z, cache) = model.forward_features(&graph.contrastive, &batch.contrastive)?;
        let feats: Vec<Array2<f64>> = graph.contrastive.iter().map(|n| widen(&z[n])).collect();
        let views: Vec<ArrayView2<f64>> = feats.iter().map(|f| f.view()).collect();
        let (value, grads) = multiview_contrastive_with_grad(&views, loss)?;
        ctr = value;
        let dz = graph.contrastive.iter().zip(&grads).map(|(n, g)| (n.clone(), narrow(g))).collect();
        model.backward_features(&cache, &dz)?;
    }
    total_loss(cls, ctr).map_err(|_| {
        Error::NonFinite(format!("step {}: non-finite loss (cls = {cls}, ctr = {ctr})", batch.step))
    })?;
    Ok((cls, ctr))
}

/// Validation F1 of every classification node and their mean.
pub fn validation_score(model: &Model, valid: &MultimodalDataset, batch_size: usize) -> Result<(BTreeMap<String, f64>, f64)> {
    let metrics = evaluate(model, valid, &model.graph().classification, batch_size)?;
    let per_node: BTreeMap<String, f64> = metrics.iter().map(|m| (m.node.clone(), m.f1)).collect();
    let mean = per_node.values().sum::<f64>() / per_node.len() as f64;
    Ok((per_node, mean))
}

fn check_data(graph: &ModalityGraph, data: &TrainData<'_>) -> Result<()> {
    if data.valid.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    if !data.labeled.is_labeled() || !data.valid.is_labeled() {
        return Err(Error::Config("training and validation sets must be labeled".into()));
    }
    for ds in [data.labeled, data.valid] {
        if ds.num_classes() != graph.num_classes {
            return Err(Error::Config(format!(
                "graph has {} classes but a dataset has {}",
                graph.num_classes,
                ds.num_classes()
            )));
        }
    }
    let spec = batch_spec(graph)?;
    let check = |ds: &MultimodalDataset, needed: &std::collections::BTreeSet<String>, what: &str| -> Result<()> {
        for m in needed {
            if ds.modality(m).is_none() {
                return Err(Error::Config(format!("{what} set lacks modality `{m}`")));
            }
        }
        Ok(())
    };
    check(data.labeled, &spec.classification, "labeled")?;
    check(data.valid, &spec.classification, "validation")?;
    if !graph.contrastive.is_empty() {
        check(data.unlabeled.unwrap_or(data.labeled), &spec.contrastive, "contrastive")?;
    }
    Ok(())
}

/// Trains `model` until the plateau rule stops it (or `max_epochs`) and
/// returns the best validation checkpoint.
pub fn train(mut model: Model, data: TrainData<'_>, settings: &TrainSettings, seed: u64) -> Result<TrainedRun> {
    let cfg = &settings.train;
    cfg.validate()?;
    settings.loss.validate()?;
    settings.augmentation.validate()?;
    let graph = model.graph().clone();
    check_data(&graph, &data)?;
    let unlabeled = if graph.contrastive.is_empty() { None } else { data.unlabeled };
    let spec = batch_spec(&graph)?;
    let mut composer = BatchComposer::new(data.labeled, unlabeled, cfg.batch_size, seed)?;
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or_else(|| composer.steps_per_epoch());

    let mut opt = Adam::new(cfg.learning_rate);
    let mut schedule = PlateauSchedule::new(cfg);
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut epochs = Vec::new();
    let mut steps = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let plans: Vec<_> = (0..steps_per_epoch).map(|_| composer.next_plan()).collect();
        let (mut cls_sum, mut ctr_sum) = (0.0, 0.0);
        let make = |p: &_| materialize(p, data.labeled, unlabeled, &spec, &settings.augmentation, seed);
        produce(plans, cfg.workers, cfg.prefetch, make, |batch| {
            let (cls, ctr) = accumulate_gradients(&mut model, &batch, &settings.loss)?;
            opt.step(&mut model);
            cls_sum += cls;
            ctr_sum += ctr;
            steps.push(StepRecord { step: batch.step, cls_loss: cls, ctr_loss: ctr, total: cls + ctr });
            Ok(true)
        })?;

        let (valid_f1, monitored) = validation_score(&model, data.valid, cfg.eval_batch_size)?;
        let signal = schedule.observe(monitored);
        let record = EpochRecord {
            epoch,
            lr: opt.lr,
            cls_loss: cls_sum / steps_per_epoch as f64,
            ctr_loss: ctr_sum / steps_per_epoch as f64,
            valid_f1,
            monitored,
            signal,
        };
        info!(
            seed,
            epoch,
            lr = record.lr,
            cls = record.cls_loss,
            ctr = record.ctr_loss,
            valid = monitored,
            "epoch done"
        );
        epochs.push(record);
        match signal {
            PlateauSignal::Improved => best = (model.clone(), epoch, monitored),
            PlateauSignal::Decay => {
                opt.lr = schedule.lr();
                debug!(seed, epoch, lr = opt.lr, "learning rate decayed");
            }
            PlateauSignal::Stop => {
                info!(seed, epoch, best_epoch = best.1, "early stop");
                break;
            }
            PlateauSignal::Wait => {}
        }
    }
    let (model, best_epoch, best_score) = best;
    Ok(TrainedRun { seed, model, epochs, steps, best_epoch, best_score })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(&model.checkpoint())?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    Model::from_checkpoint(&ckpt)
}

/// Per-epoch curves as CSV: epoch, lr, losses, validation F1 per node,
/// monitored score.
pub fn write_epochs_csv(epochs: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let nodes: Vec<String> = epochs.first().map(|e| e.valid_f1.keys().cloned().collect()).unwrap_or_default();
    let mut header = vec!["epoch".to_string(), "lr".into(), "cls_loss".into(), "ctr_loss".into()];
    header.extend(nodes.iter().map(|n| format!("valid_f1_{n}")));
    header.push("monitored".into());
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for e in epochs {
        let mut row = vec![e.epoch.to_string(), e.lr.to_string(), e.cls_loss.to_string(), e.ctr_loss.to_string()];
        row.extend(nodes.iter().map(|n| e.valid_f1.get(n).map_or(String::new(), f64::to_string)));
        row.push(e.monitored.to_string());
        w.write_record(&row).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Test results of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub epochs_run: usize,
    pub test: Vec<NodeMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAggregate {
    pub f1: Summary,
    pub accuracy: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunSummary>,
    pub nodes: BTreeMap<String, NodeAggregate>,
}

/// Mean and standard deviation over runs of each node's test metrics.
pub fn aggregate(runs: &[RunSummary]) -> ExperimentReport {
    let mut f1: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in runs {
        for m in &r.test {
            f1.entry(m.node.clone()).or_default().push(m.f1);
            acc.entry(m.node.clone()).or_default().push(m.accuracy);
        }
    }
    let nodes = f1
        .iter()
        .map(|(n, v)| {
            let agg = NodeAggregate {
                f1: Summary::of(v).expect("non-empty"),
                accuracy: Summary::of(&acc[n]).expect("non-empty"),
            };
            (n.clone(), agg)
        })
        .collect();
    ExperimentReport { runs: runs.to_vec(), nodes }
}

pub fn summarize_run(run: &TrainedRun, test: &MultimodalDataset, batch_size: usize) -> Result<RunSummary> {
    let nodes = run.model.graph().inference_nodes().to_vec();
    Ok(RunSummary {
        seed: run.seed,
        best_epoch: run.best_epoch,
        best_valid: run.best_score,
        epochs_run: run.epochs.len(),
        test: evaluate(&run.model, test, &nodes, batch_size)?,
    })
}

/// Trains once per configured seed and evaluates every inference node of
/// each best checkpoint on `test`.
pub fn run_experiment(
    graph: &ModalityGraph,
    extractor: &ExtractorConfig,
    data: TrainData<'_>,
    test: &MultimodalDataset,
    settings: &TrainSettings,
) -> Result<ExperimentReport> {
    settings.train.validate()?;
    let mut runs = Vec::new();
    for &seed in &settings.train.seeds {
        let model = Model::build(graph, extractor, seed)?;
        let run = train(model, data, settings, seed)?;
        runs.push(summarize_run(&run, test, settings.train.eval_batch_size)?);
    }
    Ok(aggregate(&runs))
}
