//! Classification metrics and per-node test evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::datasets::MultimodalDataset;
use crate::model::Model;
use crate::objectives::argmax_rows;
use crate::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!("{} labels but {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::Data(format!("class index out of range for K={classes}: ({t}, {p})")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// F1 of class `k`; 0 when the class has neither support nor predictions.
    pub fn class_f1(&self, k: usize) -> f64 {
        let tp = self.counts[k][k] as f64;
        let predicted: u64 = self.counts.iter().map(|row| row[k]).sum();
        let support: u64 = self.counts[k].iter().sum();
        let denom = (predicted + support) as f64;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("accuracy of an empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.classes()).map(|k| cm.counts[k][k]).sum();
    Ok(trace as f64 / total as f64)
}

pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.classes();
    if k < 2 {
        return Err(Error::Parameter(format!("macro F1 needs >= 2 classes, got {k}")));
    }
    Ok((0..k).map(|c| cm.class_f1(c)).sum::<f64>() / k as f64)
}

pub fn binary_f1(cm: &ConfusionMatrix, positive: usize) -> Result<f64> {
    if positive >= cm.classes() {
        return Err(Error::Parameter(format!("positive class {positive} out of range")));
    }
    Ok(cm.class_f1(positive))
}

/// The F1 reported for a task: binary F1 of class 1 for two classes,
/// macro F1 otherwise.
pub fn task_f1(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.classes() == 2 {
        binary_f1(cm, 1)
    } else {
        macro_f1(cm)
    }
}

/// Read access to evaluation windows. Implemented by datasets; tests wrap it
/// to record which modalities are touched.
pub trait WindowSource {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> Option<usize>;
    /// Windows of `modality` at `indices` as `[n, window_len, channels]`.
    fn stack(&self, modality: &str, indices: &[usize]) -> Result<Array3<f32>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl WindowSource for MultimodalDataset {
    fn len(&self) -> usize {
        MultimodalDataset::len(self)
    }

    fn label(&self, i: usize) -> Option<usize> {
        self.sample(i).label
    }

    fn stack(&self, modality: &str, indices: &[usize]) -> Result<Array3<f32>> {
        MultimodalDataset::stack(self, modality, indices)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: String,
    pub accuracy: f64,
    /// Binary F1 (positive class 1) for two classes, macro F1 otherwise.
    pub f1: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub samples: usize,
}

impl NodeMetrics {
    pub fn from_confusion(node: &str, confusion: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            node: node.to_string(),
            accuracy: accuracy(&confusion)?,
            f1: task_f1(&confusion)?,
            macro_f1: macro_f1(&confusion)?,
            samples: confusion.total() as usize,
            confusion,
        })
    }
}

/// Predicted classes of `node` for every window of `source`, in inference
/// mode and without augmentation. Only the modalities the node depends on
/// are read.
pub fn predict(model: &Model, source: &dyn WindowSource, node: &str, batch_size: usize) -> Result<Vec<usize>> {
    let modalities = model.graph().required_modalities(&[node])?;
    let mut out = Vec::with_capacity(source.len());
    let indices: Vec<usize> = (0..source.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let data: BTreeMap<String, Array3<f32>> = modalities
            .iter()
            .map(|m| Ok((m.clone(), source.stack(m, chunk)?)))
            .collect::<Result<_>>()?;
        let scores = model.predict_scores(node, &data)?;
        out.extend(argmax_rows(&scores.view()));
    }
    Ok(out)
}

/// Metrics of each node on a labeled window source.
pub fn evaluate(model: &Model, source: &dyn WindowSource, nodes: &[String], batch_size: usize) -> Result<Vec<NodeMetrics>> {
    if source.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let truth: Vec<usize> = (0..source.len())
        .map(|i| source.label(i).ok_or_else(|| Error::Data(format!("evaluation sample {i} has no label"))))
        .collect::<Result<_>>()?;
    let known: BTreeSet<&str> = model.graph().classification.iter().map(String::as_str).collect();
    nodes
        .iter()
        .map(|node| {
            if !known.contains(node.as_str()) {
                return Err(Error::Graph(format!(
                    "`{node}` is not a classification node; valid nodes: {}",
                    model.graph().classification.join(", ")
                )));
            }
            let predicted = predict(model, source, node, batch_size)?;
            let cm = ConfusionMatrix::from_predictions(&truth, &predicted, model.graph().num_classes)?;
            NodeMetrics::from_confusion(node, cm)
        })
        .collect()
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: String,
    pub modality: String,
    /// Column name to cell; `None` renders as absent.
    pub cells: BTreeMap<String, Option<Summary>>,
}

/// Plain-text table with rows `(dataset, modality)` and the given columns.
pub fn render_table(columns: &[String], rows: &[TableRow]) -> String {
    let cell = |c: &Option<Summary>| match c {
        Some(s) if s.n > 1 => format!("{:.4} ± {:.4}", s.mean, s.std),
        Some(s) => format!("{:.4}", s.mean),
        None => "absent".to_string(),
    };
    let mut grid: Vec<Vec<String>> = vec![["dataset", "modality"].iter().map(|s| s.to_string()).chain(columns.iter().cloned()).collect()];
    for r in rows {
        let mut line = vec![r.dataset.clone(), r.modality.clone()];
        line.extend(columns.iter().map(|c| r.cells.get(c).map_or("-".to_string(), cell)));
        grid.push(line);
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|j| grid.iter().map(|row| row[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in grid.iter().enumerate() {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{afvf_graph, random_inputs, tiny_cfg};
    use crate::rng::stream_rng;
    use rand::Rng;
    use std::cell::RefCell;

    fn cm(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        ConfusionMatrix { counts }
    }

    #[test]
    fn metric_examples() {
        let diag = cm(vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]);
        assert_eq!(macro_f1(&diag).unwrap(), 1.0);
        assert_eq!(accuracy(&diag).unwrap(), 1.0);
        let two = cm(vec![vec![8, 2], vec![2, 8]]);
        assert!((macro_f1(&two).unwrap() - 0.8).abs() < 1e-12);
        assert!((binary_f1(&two, 1).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(binary_f1(&cm(vec![vec![0, 0], vec![0, 10]]), 1).unwrap(), 1.0);
        assert_eq!(binary_f1(&cm(vec![vec![4, 0], vec![3, 0]]), 1).unwrap(), 0.0);
        assert_eq!(accuracy(&cm(vec![vec![1, 1], vec![1, 1]])).unwrap(), 0.5);
        assert!(accuracy(&ConfusionMatrix::new(3)).is_err());
        // zero-support, never-predicted class scores 0
        let missing = cm(vec![vec![4, 0, 0], vec![0, 4, 0], vec![0, 0, 0]]);
        assert!((macro_f1(&missing).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_matches_precision_recall_recomputation() {
        let mut rng = stream_rng(4, "cm");
        for _ in 0..100 {
            let m = cm((0..3).map(|_| (0..3).map(|_| rng.random_range(0..20u64)).collect()).collect());
            let mut f1s = Vec::new();
            for k in 0..3 {
                let tp = m.counts[k][k] as f64;
                let fp: f64 = (0..3).filter(|&i| i != k).map(|i| m.counts[i][k] as f64).sum();
                let fn_: f64 = (0..3).filter(|&j| j != k).map(|j| m.counts[k][j] as f64).sum();
                let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                f1s.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
            }
            let expected = f1s.iter().sum::<f64>() / 3.0;
            assert!((macro_f1(&m).unwrap() - expected).abs() < 1e-12);
            assert!((binary_f1(&m, 2).unwrap() - f1s[2]).abs() < 1e-12);
            // relabeling classes consistently leaves the metrics unchanged
            let perm = [2usize, 0, 1];
            let mut q = ConfusionMatrix::new(3);
            for i in 0..3 {
                for j in 0..3 {
                    q.counts[perm[i]][perm[j]] = m.counts[i][j];
                }
            }
            assert!((macro_f1(&q).unwrap() - macro_f1(&m).unwrap()).abs() < 1e-12);
            assert_eq!(accuracy(&q).ok(), accuracy(&m).ok());
        }
    }

    /// Labeled windows that log every modality read.
    struct Recording {
        data: BTreeMap<String, Array3<f32>>,
        labels: Vec<usize>,
        reads: RefCell<BTreeSet<String>>,
    }

    impl WindowSource for Recording {
        fn len(&self) -> usize {
            self.labels.len()
        }
        fn label(&self, i: usize) -> Option<usize> {
            Some(self.labels[i])
        }
        fn stack(&self, modality: &str, indices: &[usize]) -> Result<Array3<f32>> {
            self.reads.borrow_mut().insert(modality.to_string());
            Ok(self.data[modality].select(ndarray::Axis(0), indices))
        }
    }

    #[test]
    fn evaluation_reads_only_needed_modalities() {
        let mut g = afvf_graph();
        g.sources.push(crate::model::tests::source("c", 2, 50.0, 16));
        g.classification.push("c".into());
        let model = Model::build(&g, &tiny_cfg(), 0).unwrap();
        let src = Recording { data: random_inputs(&g, 7, 3), labels: (0..7).map(|i| i % 3).collect(), reads: RefCell::default() };
        let m = evaluate(&model, &src, &["ab".to_string()], 3).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(*src.reads.borrow(), ["a".to_string(), "b".to_string()].into());
        assert_eq!(m[0].samples, 7);
        // reported numbers are reproducible from the stored matrix
        assert_eq!(m[0].accuracy, accuracy(&m[0].confusion).unwrap());
        assert_eq!(m[0].f1, macro_f1(&m[0].confusion).unwrap());
        src.reads.borrow_mut().clear();
        evaluate(&model, &src, &["b".to_string()], 3).unwrap();
        assert_eq!(*src.reads.borrow(), ["b".to_string()].into());
        let all: Vec<String> = ["a", "b", "ab"].iter().map(|s| s.to_string()).collect();
        assert_eq!(evaluate(&model, &src, &all, 4).unwrap().len(), 3);
        assert!(matches!(evaluate(&model, &src, &["nope".to_string()], 4), Err(Error::Graph(_))));
    }

    #[test]
    fn evaluation_is_deterministic_and_batch_independent() {
        let g = afvf_graph();
        let model = Model::build(&g, &tiny_cfg(), 1).unwrap();
        let src = Recording { data: random_inputs(&g, 9, 5), labels: (0..9).map(|i| i % 3).collect(), reads: RefCell::default() };
        let a = predict(&model, &src, "ab", 2).unwrap();
        let b = predict(&model, &src, "ab", 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn summaries_and_table() {
        let s = Summary::of(&[0.70, 0.72, 0.74]).unwrap();
        assert!((s.mean - 0.72).abs() < 1e-12);
        assert!((s.std - 0.02).abs() < 1e-12);
        assert_eq!(Summary::of(&[0.5]).unwrap().std, 0.0);
        assert!(Summary::of(&[]).is_none());
        let cols = vec!["single".to_string(), "virtual fusion".to_string()];
        let rows = vec![TableRow {
            dataset: "synthetic".into(),
            modality: "b".into(),
            cells: [("single".to_string(), Some(s)), ("virtual fusion".to_string(), None)].into(),
        }];
        let t = render_table(&cols, &rows);
        assert!(t.contains("0.7200 ± 0.0200"));
        assert!(t.contains("absent"));
        assert_eq!(t.lines().count(), 3);
    }
}
