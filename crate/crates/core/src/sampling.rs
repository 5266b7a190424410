//! Batch composition for joint supervised and contrastive training.
//!
//! Sampling is split in two stages. A [`BatchComposer`] draws the sample
//! indices of every step from seeded streams (cheap and strictly
//! sequential). [`materialize`] turns one plan into augmented tensors and
//! depends only on the plan and the step number, so it can run on worker
//! threads without changing the result.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;

use ndarray::{Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{AugmentationPolicy, Task};
use crate::datasets::{MultimodalDataset, SampleKey};
use crate::rng::{indexed_rng, stream_rng};
use crate::{Error, Result};

/// Infinite stream of indices into a labeled dataset: a class is chosen
/// uniformly, then a sample uniformly within it (with replacement).
#[derive(Debug, Clone)]
pub struct BalancedLabelSampler {
    by_class: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl BalancedLabelSampler {
    pub fn new(dataset: &MultimodalDataset, seed: u64) -> Result<Self> {
        if !dataset.is_labeled() {
            return Err(Error::Config("balanced sampling needs a labeled dataset".into()));
        }
        let by_class = dataset.indices_by_class();
        if let Some(k) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!(
                "class `{}` has no training samples",
                dataset.class_names()[k]
            )));
        }
        Ok(Self { by_class, rng: stream_rng(seed, "sample/labeled") })
    }

    pub fn next_index(&mut self) -> usize {
        let k = self.rng.random_range(0..self.by_class.len());
        let members = &self.by_class[k];
        members[self.rng.random_range(0..members.len())]
    }
}

impl Iterator for BalancedLabelSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.next_index())
    }
}

/// Uniform draws over an unlabeled dataset.
#[derive(Debug, Clone)]
pub struct UniformSampler {
    len: usize,
    rng: ChaCha8Rng,
}

impl UniformSampler {
    pub fn new(dataset: &MultimodalDataset, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Config("unlabeled dataset is empty".into()));
        }
        Ok(Self { len: dataset.len(), rng: stream_rng(seed, "sample/unlabeled") })
    }

    pub fn next_index(&mut self) -> usize {
        self.rng.random_range(0..self.len)
    }
}

/// Indices drawn for one training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub step: u64,
    pub labeled: Vec<usize>,
    /// Empty when the labeled part also serves the contrastive loss.
    pub unlabeled: Vec<usize>,
}

fn draw_distinct(n: usize, available: usize, mut next: impl FnMut() -> usize) -> Vec<usize> {
    debug_assert!(n <= available);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let i = next();
        if seen.insert(i) {
            out.push(i);
        }
    }
    out
}

/// Draws batch plans. With an unlabeled dataset each batch is half labeled
/// (class-balanced) and half unlabeled; without one the whole batch is
/// labeled. No sample appears twice within one part.
#[derive(Debug, Clone)]
pub struct BatchComposer {
    labeled: BalancedLabelSampler,
    unlabeled: Option<UniformSampler>,
    labeled_len: usize,
    unlabeled_len: usize,
    labeled_part: usize,
    unlabeled_part: usize,
    step: u64,
}

impl BatchComposer {
    pub fn new(
        labeled: &MultimodalDataset,
        unlabeled: Option<&MultimodalDataset>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be > 0".into()));
        }
        let (labeled_part, unlabeled_part) = match unlabeled {
            Some(_) if !batch_size.is_multiple_of(2) => {
                return Err(Error::Config(format!(
                    "batch size must be even when labeled and unlabeled data are mixed, got {batch_size}"
                )))
            }
            Some(_) => (batch_size / 2, batch_size / 2),
            None => (batch_size, 0),
        };
        let unlabeled_len = unlabeled.map_or(0, MultimodalDataset::len);
        if labeled.len() < labeled_part || unlabeled_len < unlabeled_part {
            return Err(Error::Config(format!(
                "a batch needs {labeled_part} distinct labeled and {unlabeled_part} distinct unlabeled samples, \
                 datasets have {} and {unlabeled_len}",
                labeled.len()
            )));
        }
        Ok(Self {
            labeled: BalancedLabelSampler::new(labeled, seed)?,
            unlabeled: unlabeled.map(|u| UniformSampler::new(u, seed)).transpose()?,
            labeled_len: labeled.len(),
            unlabeled_len,
            labeled_part,
            unlabeled_part,
            step: 0,
        })
    }

    pub fn labeled_part(&self) -> usize {
        self.labeled_part
    }

    pub fn unlabeled_part(&self) -> usize {
        self.unlabeled_part
    }

    /// Steps per epoch: enough draws to cover the labeled dataset once.
    pub fn steps_per_epoch(&self) -> usize {
        self.labeled_len.div_ceil(self.labeled_part)
    }

    pub fn next_plan(&mut self) -> BatchPlan {
        let labeled = draw_distinct(self.labeled_part, self.labeled_len, || self.labeled.next_index());
        let unlabeled = match self.unlabeled.as_mut() {
            Some(u) => draw_distinct(self.unlabeled_part, self.unlabeled_len, || u.next_index()),
            None => Vec::new(),
        };
        let plan = BatchPlan { step: self.step, labeled, unlabeled };
        self.step += 1;
        plan
    }
}

/// Modalities each task needs in a batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchSpec {
    pub classification: BTreeSet<String>,
    pub contrastive: BTreeSet<String>,
}

/// Augmented tensors for one step, each `[n, window_len, channels]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub step: u64,
    pub labels: Vec<usize>,
    pub labeled_keys: Vec<SampleKey>,
    /// Keys behind the contrastive tensors: the unlabeled part, or the
    /// labeled part when there is no unlabeled data.
    pub contrastive_keys: Vec<SampleKey>,
    pub classification: BTreeMap<String, Array3<f32>>,
    pub contrastive: BTreeMap<String, Array3<f32>>,
}

impl Batch {
    pub fn labeled_len(&self) -> usize {
        self.labels.len()
    }

    pub fn contrastive_len(&self) -> usize {
        self.contrastive_keys.len()
    }
}

fn augmented(
    dataset: &MultimodalDataset,
    indices: &[usize],
    modality: &str,
    task: Task,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Result<Array3<f32>> {
    let mut x = dataset.stack(modality, indices)?;
    if policy.transforms(modality, task).is_empty() {
        return Ok(x);
    }
    for mut w in x.axis_iter_mut(Axis(0)) {
        let out = policy.apply(w.view(), modality, task, rng)?;
        w.assign(&out);
    }
    Ok(x)
}

/// Stacks and augments the windows of one plan.
///
/// Each task gets its own augmented copy, drawn from a stream keyed by task
/// and step, so one task's augmentations never depend on whether the other
/// task is present.
pub fn materialize(
    plan: &BatchPlan,
    labeled: &MultimodalDataset,
    unlabeled: Option<&MultimodalDataset>,
    spec: &BatchSpec,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<Batch> {
    let labels = plan
        .labeled
        .iter()
        .map(|&i| labeled.sample(i).label.ok_or_else(|| Error::Internal(format!("labeled sample {i} has no label"))))
        .collect::<Result<Vec<_>>>()?;
    let labeled_keys: Vec<SampleKey> = plan.labeled.iter().map(|&i| labeled.sample(i).key.clone()).collect();

    let mut rng = indexed_rng(seed, "augment/classification", plan.step);
    let classification = spec
        .classification
        .iter()
        .map(|m| Ok((m.clone(), augmented(labeled, &plan.labeled, m, Task::Classification, policy, &mut rng)?)))
        .collect::<Result<_>>()?;

    let (ctr_data, ctr_indices) = match unlabeled {
        Some(u) if !plan.unlabeled.is_empty() => (u, &plan.unlabeled),
        _ => (labeled, &plan.labeled),
    };
    let contrastive_keys = if spec.contrastive.is_empty() {
        Vec::new()
    } else {
        ctr_indices.iter().map(|&i| ctr_data.sample(i).key.clone()).collect()
    };
    let mut rng = indexed_rng(seed, "augment/contrastive", plan.step);
    let contrastive = spec
        .contrastive
        .iter()
        .map(|m| Ok((m.clone(), augmented(ctr_data, ctr_indices, m, Task::Contrastive, policy, &mut rng)?)))
        .collect::<Result<_>>()?;

    Ok(Batch { step: plan.step, labels, labeled_keys, contrastive_keys, classification, contrastive })
}

/// Builds `plans.len()` items with `make` and hands them to `consume` in
/// plan order.
///
/// With `workers == 0` everything runs on the calling thread. Otherwise
/// worker `w` builds items `w, w + workers, ...` and sends them over its own
/// bounded channel, so the output order (and content) matches the inline
/// mode. Returning `false` from `consume` stops production early.
pub fn produce<P, T, E>(
    plans: Vec<P>,
    workers: usize,
    capacity: usize,
    make: impl Fn(&P) -> std::result::Result<T, E> + Sync,
    mut consume: impl FnMut(T) -> std::result::Result<bool, E>,
) -> std::result::Result<(), E>
where
    P: Sync,
    T: Send,
    E: Send,
{
    if workers == 0 {
        for p in &plans {
            if !consume(make(p)?)? {
                break;
            }
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let mut receivers = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = mpsc::sync_channel(capacity.max(1));
            receivers.push(rx);
            let plans = &plans;
            let make = &make;
            scope.spawn(move || {
                for p in plans.iter().skip(w).step_by(workers) {
                    if tx.send(make(p)).is_err() {
                        break;
                    }
                }
            });
        }
        let result = (|| {
            for i in 0..plans.len() {
                let item = receivers[i % workers].recv().expect("worker exited before finishing");
                if !consume(item?)? {
                    break;
                }
            }
            Ok(())
        })();
        // dropping the receivers unblocks workers still sending
        drop(receivers);
        result
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::TaskTransforms;
    use crate::datasets::fixtures::tiny;

    fn skewed() -> MultimodalDataset {
        // 90 samples of class 0 and 10 of class 1
        let ds = tiny(100, 10);
        let relabeled: Vec<_> = ds
            .samples()
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.label = Some(usize::from(s.label == Some(9)));
                s
            })
            .collect();
        MultimodalDataset::new(ds.split(), true, ds.modalities().to_vec(), vec!["A".into(), "B".into()], relabeled).unwrap()
    }

    #[test]
    fn balanced_frequencies() {
        let ds = skewed();
        assert_eq!(ds.indices_by_class()[1].len(), 10);
        let mut s = BalancedLabelSampler::new(&ds, 3).unwrap();
        let n = 10_000;
        let ones = (0..n).filter(|_| ds.sample(s.next_index()).label == Some(1)).count();
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn single_class_and_determinism() {
        let ds = tiny(5, 1);
        let s = BalancedLabelSampler::new(&ds, 0).unwrap();
        assert!(s.take(50).all(|i| ds.sample(i).label == Some(0)));
        let ds = tiny(30, 3);
        let a: Vec<usize> = BalancedLabelSampler::new(&ds, 8).unwrap().take(40).collect();
        let b: Vec<usize> = BalancedLabelSampler::new(&ds, 8).unwrap().take(40).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_class_is_a_config_error() {
        let ds = tiny(4, 2);
        let only_zero = MultimodalDataset::new(
            ds.split(),
            true,
            ds.modalities().to_vec(),
            ds.class_names().to_vec(),
            ds.samples().iter().filter(|s| s.label == Some(0)).cloned().collect(),
        )
        .unwrap();
        assert!(matches!(BalancedLabelSampler::new(&only_zero, 0), Err(Error::Config(_))));
    }

    #[test]
    fn batch_composition() {
        let lbl = tiny(40, 4);
        let ulb = tiny(60, 2).to_unlabeled().unwrap();
        let mut c = BatchComposer::new(&lbl, Some(&ulb), 32, 1).unwrap();
        assert_eq!(c.steps_per_epoch(), 3);
        for _ in 0..20 {
            let p = c.next_plan();
            assert_eq!((p.labeled.len(), p.unlabeled.len()), (16, 16));
            assert_eq!(p.labeled.iter().collect::<BTreeSet<_>>().len(), 16);
            assert_eq!(p.unlabeled.iter().collect::<BTreeSet<_>>().len(), 16);
        }
        let mut solo = BatchComposer::new(&lbl, None, 32, 1).unwrap();
        let p = solo.next_plan();
        assert_eq!((p.labeled.len(), p.unlabeled.len()), (32, 0));
        assert!(matches!(BatchComposer::new(&lbl, Some(&ulb), 31, 1), Err(Error::Config(_))));
        assert!(BatchComposer::new(&lbl, None, 31, 1).is_ok());
        assert!(matches!(BatchComposer::new(&tiny(8, 2), None, 32, 1), Err(Error::Config(_))));
    }

    #[test]
    fn materialized_parts_are_aligned() {
        let lbl = tiny(40, 4);
        let ulb = tiny(60, 2).to_unlabeled().unwrap();
        let spec = BatchSpec {
            classification: ["a".to_string()].into(),
            contrastive: ["a".to_string(), "b".to_string()].into(),
        };
        let mut c = BatchComposer::new(&lbl, Some(&ulb), 8, 2).unwrap();
        let plan = c.next_plan();
        let b = materialize(&plan, &lbl, Some(&ulb), &spec, &AugmentationPolicy::default(), 2).unwrap();
        assert_eq!(b.classification["a"].dim(), (4, 4, 3));
        assert_eq!(b.contrastive["b"].dim(), (4, 4, 2));
        // tiny() fills every window of key i with the value i, so co-temporal
        // rows agree across modalities
        for (row, key) in b.contrastive_keys.iter().enumerate() {
            let i = (key.start_ms / 10) as f32;
            assert_eq!(b.contrastive["a"][[row, 0, 0]], i);
            assert_eq!(b.contrastive["b"][[row, 3, 1]], i);
        }
        for (row, &i) in plan.labeled.iter().enumerate() {
            assert_eq!(b.labels[row], i % 4);
            assert_eq!(b.classification["a"][[row, 2, 2]], i as f32);
        }
        // without unlabeled data the contrastive part reuses the labeled keys
        let plan = BatchComposer::new(&lbl, None, 8, 2).unwrap().next_plan();
        let b = materialize(&plan, &lbl, None, &spec, &AugmentationPolicy::default(), 2).unwrap();
        assert_eq!(b.contrastive_keys, b.labeled_keys);
    }

    #[test]
    fn augmentation_streams_are_per_task() {
        let lbl = tiny(40, 4);
        let policy = AugmentationPolicy {
            modalities: [("a".to_string(), TaskTransforms::inertial())].into_iter().collect(),
        };
        let plan = BatchComposer::new(&lbl, None, 8, 2).unwrap().next_plan();
        let cls_only = BatchSpec { classification: ["a".to_string()].into(), contrastive: BTreeSet::new() };
        let both = BatchSpec { contrastive: ["a".to_string(), "b".to_string()].into(), ..cls_only.clone() };
        let x = materialize(&plan, &lbl, None, &cls_only, &policy, 4).unwrap();
        let y = materialize(&plan, &lbl, None, &both, &policy, 4).unwrap();
        assert_eq!(x.classification["a"], y.classification["a"]);
        assert_ne!(y.classification["a"], y.contrastive["a"]);
    }

    #[test]
    fn threaded_production_matches_inline() {
        let plans: Vec<u64> = (0..50).collect();
        let make = |p: &u64| -> std::result::Result<u64, String> {
            let mut r = indexed_rng(1, "x", *p);
            Ok(r.random::<u64>())
        };
        let collect = |workers| {
            let mut out = Vec::new();
            produce(plans.clone(), workers, 2, make, |v| {
                out.push(v);
                Ok::<_, String>(true)
            })
            .unwrap();
            out
        };
        let inline = collect(0);
        assert_eq!(inline.len(), 50);
        assert_eq!(collect(1), inline);
        assert_eq!(collect(3), inline);
        // early stop
        let mut seen = 0;
        produce(plans.clone(), 2, 1, make, |_| {
            seen += 1;
            Ok::<_, String>(seen < 5)
        })
        .unwrap();
        assert_eq!(seen, 5);
        // errors propagate
        let err = produce(plans, 2, 1, |p| if *p == 7 { Err("boom".to_string()) } else { Ok(*p) }, |_| Ok(true));
        assert_eq!(err, Err("boom".to_string()));
    }
}
