//! Declarative modality graph and the model built from it.
//!
//! A graph names source nodes (one per sensor modality) and fused nodes
//! (early: channel concatenation before one extractor; late: concatenation
//! of extractor outputs, a linear projection back to the feature dimension
//! and a ReLU). Three node sets decide what is trained and evaluated:
//! `contrastive` nodes enter the multi-view contrastive loss,
//! `classification` nodes get a linear head, and `inference` nodes are the
//! ones reported at test time.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::{
    join, relu, relu_backward, ExtractorConfig, Linear, LinearCache, Module, Param, ParamVisitor, ResNet1d,
    ResNetCache, StateVisitor, TensorData,
};
use crate::rng::stream_rng;
use crate::{Error, Result};

fn default_kind() -> String {
    "generic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceNode {
    pub name: String,
    /// Dataset modality id; defaults to the node name.
    #[serde(default)]
    pub modality: Option<String>,
    pub channels: usize,
    pub rate_hz: f64,
    pub window_len: usize,
    /// Data semantics tag (`inertial`, `skeleton3d`, ...). Early fusion only
    /// combines sources with the same tag.
    #[serde(default = "default_kind")]
    pub kind: String,
}

impl SourceNode {
    pub fn modality_id(&self) -> &str {
        self.modality.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Early,
    Late,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusedNode {
    pub name: String,
    pub kind: FusionKind,
    /// Source node names, in concatenation order.
    pub inputs: Vec<String>,
}

fn default_feature_dim() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityGraph {
    pub sources: Vec<SourceNode>,
    #[serde(default)]
    pub fused: Vec<FusedNode>,
    #[serde(default)]
    pub contrastive: Vec<String>,
    pub classification: Vec<String>,
    /// Defaults to every classification node when empty.
    #[serde(default)]
    pub inference: Vec<String>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    pub num_classes: usize,
}

/// What a node's features are computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeRef<'a> {
    Source(&'a SourceNode),
    Fused(&'a FusedNode),
}

impl ModalityGraph {
    pub fn node(&self, name: &str) -> Option<NodeRef<'_>> {
        self.sources
            .iter()
            .find(|s| s.name == name)
            .map(NodeRef::Source)
            .or_else(|| self.fused.iter().find(|f| f.name == name).map(NodeRef::Fused))
    }

    pub fn node_names(&self) -> Vec<&str> {
        self.sources.iter().map(|s| s.name.as_str()).chain(self.fused.iter().map(|f| f.name.as_str())).collect()
    }

    fn source(&self, name: &str) -> Result<&SourceNode> {
        self.sources
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Graph(format!("`{name}` is not a source node")))
    }

    pub fn inference_nodes(&self) -> &[String] {
        if self.inference.is_empty() {
            &self.classification
        } else {
            &self.inference
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Graph("graph has no source nodes".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Graph("feature_dim must be > 0".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Graph(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        let names = self.node_names();
        let unique: BTreeSet<&str> = names.iter().copied().collect();
        if unique.len() != names.len() {
            return Err(Error::Graph("node names must be unique".into()));
        }
        let modalities: BTreeSet<&str> = self.sources.iter().map(SourceNode::modality_id).collect();
        if modalities.len() != self.sources.len() {
            return Err(Error::Graph("two source nodes read the same modality".into()));
        }
        for s in &self.sources {
            if s.channels == 0 || s.window_len == 0 || !(s.rate_hz > 0.0) {
                return Err(Error::Graph(format!("source `{}` needs channels, window_len and rate_hz > 0", s.name)));
            }
        }
        for f in &self.fused {
            if f.inputs.len() < 2 {
                return Err(Error::Graph(format!("fused node `{}` needs >= 2 inputs, got {}", f.name, f.inputs.len())));
            }
            let inputs: Vec<&SourceNode> = f.inputs.iter().map(|i| self.source(i)).collect::<Result<_>>()?;
            if inputs.iter().map(|s| &s.name).collect::<BTreeSet<_>>().len() != inputs.len() {
                return Err(Error::Graph(format!("fused node `{}` repeats an input", f.name)));
            }
            if f.kind == FusionKind::Early {
                let first = inputs[0];
                for other in &inputs[1..] {
                    if other.rate_hz != first.rate_hz || other.window_len != first.window_len {
                        return Err(Error::Graph(format!(
                            "early fusion `{}`: `{}` ({} Hz, {} samples) and `{}` ({} Hz, {} samples) differ in rate or window length",
                            f.name, first.name, first.rate_hz, first.window_len, other.name, other.rate_hz, other.window_len
                        )));
                    }
                    if other.kind != first.kind {
                        return Err(Error::Graph(format!(
                            "early fusion `{}`: `{}` is {} data but `{}` is {}",
                            f.name, first.name, first.kind, other.name, other.kind
                        )));
                    }
                }
            }
        }
        let check_set = |label: &str, set: &[String]| -> Result<()> {
            for n in set {
                if self.node(n).is_none() {
                    return Err(Error::Graph(format!("{label} set names unknown node `{n}`")));
                }
            }
            if set.iter().collect::<BTreeSet<_>>().len() != set.len() {
                return Err(Error::Graph(format!("{label} set lists a node twice")));
            }
            Ok(())
        };
        check_set("contrastive", &self.contrastive)?;
        check_set("classification", &self.classification)?;
        check_set("inference", &self.inference)?;
        if self.contrastive.len() == 1 {
            return Err(Error::Graph("contrastive set needs >= 2 nodes (or none)".into()));
        }
        if self.classification.is_empty() {
            return Err(Error::Graph("classification set is empty".into()));
        }
        if let Some(n) = self.inference.iter().find(|n| !self.classification.contains(n)) {
            return Err(Error::Graph(format!("inference node `{n}` has no classifier head")));
        }
        Ok(())
    }

    /// Nodes whose features feed a loss: the classification and contrastive sets.
    pub fn loss_nodes(&self) -> BTreeSet<&str> {
        self.classification.iter().chain(&self.contrastive).map(String::as_str).collect()
    }

    /// Nodes that own an extractor, in declaration order: sources used by a
    /// loss directly or through a late-fusion node, and early-fusion nodes
    /// used by a loss.
    pub fn extractor_nodes(&self) -> Vec<&str> {
        let used = self.loss_nodes();
        let mut via_late = BTreeSet::new();
        for f in &self.fused {
            if f.kind == FusionKind::Late && used.contains(f.name.as_str()) {
                via_late.extend(f.inputs.iter().map(String::as_str));
            }
        }
        let sources = self
            .sources
            .iter()
            .map(|s| s.name.as_str())
            .filter(|n| used.contains(n) || via_late.contains(n));
        let early = self
            .fused
            .iter()
            .filter(|f| f.kind == FusionKind::Early && used.contains(f.name.as_str()))
            .map(|f| f.name.as_str());
        sources.chain(early).collect()
    }

    pub fn projector_nodes(&self) -> Vec<&str> {
        let used = self.loss_nodes();
        self.fused
            .iter()
            .filter(|f| f.kind == FusionKind::Late && used.contains(f.name.as_str()))
            .map(|f| f.name.as_str())
            .collect()
    }

    /// Copy with late-fusion inputs and/or late-fusion nodes removed from
    /// both loss sets. Extractors of the inputs are still built when the
    /// fused node remains.
    pub fn ablate(&self, exclude_fusion_inputs: bool, exclude_fused: bool) -> Result<Self> {
        let late: Vec<&FusedNode> = self.fused.iter().filter(|f| f.kind == FusionKind::Late).collect();
        let drop: BTreeSet<&str> = late
            .iter()
            .flat_map(|f| {
                let inputs = f.inputs.iter().map(String::as_str).filter(move |_| exclude_fusion_inputs);
                let node = std::iter::once(f.name.as_str()).filter(move |_| exclude_fused);
                inputs.chain(node)
            })
            .collect();
        let keep = |v: &[String]| v.iter().filter(|n| !drop.contains(n.as_str())).cloned().collect::<Vec<_>>();
        let mut g = self.clone();
        g.contrastive = keep(&self.contrastive);
        g.classification = keep(&self.classification);
        if g.contrastive.len() == 1 {
            g.contrastive.clear();
        }
        g.validate()?;
        Ok(g)
    }

    /// Dataset modalities read when computing the features of `nodes`.
    pub fn required_modalities<S: AsRef<str>>(&self, nodes: &[S]) -> Result<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        for n in nodes {
            match self.node(n.as_ref()) {
                Some(NodeRef::Source(s)) => {
                    out.insert(s.modality_id().to_string());
                }
                Some(NodeRef::Fused(f)) => {
                    for i in &f.inputs {
                        out.insert(self.source(i)?.modality_id().to_string());
                    }
                }
                None => return Err(Error::Graph(format!("unknown node `{}`", n.as_ref()))),
            }
        }
        Ok(out)
    }
}

/// Channel-wise concatenation of `[B, L, C_i]` windows in the given order.
pub fn fuse_early(windows: &[ArrayView3<f32>]) -> Result<Array3<f32>> {
    let first = windows.first().ok_or_else(|| Error::Shape("early fusion of zero inputs".into()))?;
    let (b, l, _) = first.dim();
    if let Some(w) = windows.iter().find(|w| w.dim().0 != b || w.dim().1 != l) {
        return Err(Error::Shape(format!("early fusion inputs [{b}, {l}, _] and {:?} disagree", w.dim())));
    }
    Ok(concatenate(Axis(2), windows).expect("shapes checked"))
}

/// Concatenates `[B, D]` features, projects them with `projector` and
/// applies ReLU.
pub fn fuse_late(features: &[ArrayView2<f32>], projector: &Linear) -> Result<Array2<f32>> {
    let concat = concat_features(features)?;
    if concat.ncols() != projector.in_features() {
        return Err(Error::Shape(format!(
            "late fusion: concatenated dim {} but projector expects {}",
            concat.ncols(),
            projector.in_features()
        )));
    }
    let mut z = projector.forward(&concat).0;
    relu(&mut z);
    Ok(z)
}

fn concat_features(features: &[ArrayView2<f32>]) -> Result<Array2<f32>> {
    let first = features.first().ok_or_else(|| Error::Shape("late fusion of zero inputs".into()))?;
    if let Some(f) = features.iter().find(|f| f.dim() != first.dim()) {
        return Err(Error::Shape(format!("late fusion inputs {:?} and {:?} disagree", first.dim(), f.dim())));
    }
    Ok(concatenate(Axis(1), features).expect("shapes checked"))
}

/// `[B, L, C]` to the extractor layout `[C, B, L]`.
fn to_channel_major(x: &Array3<f32>) -> Array3<f32> {
    x.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

/// Everything a checkpoint needs to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub graph: ModalityGraph,
    pub extractor: ExtractorConfig,
    pub tensors: BTreeMap<String, TensorData>,
}

#[derive(Debug, Clone)]
pub struct Model {
    graph: ModalityGraph,
    extractor_cfg: ExtractorConfig,
    extractors: BTreeMap<String, ResNet1d>,
    projectors: BTreeMap<String, Linear>,
    heads: BTreeMap<String, Linear>,
}

/// Intermediate values of one training-mode forward over a node set.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    extractors: BTreeMap<String, ResNetCache>,
    projectors: BTreeMap<String, (LinearCache, Array2<f32>)>,
}

impl Model {
    /// Builds one extractor per extractor node, one projector per used late
    /// fusion node and one head per classification node. Every component
    /// draws its initial weights from its own stream of `seed`.
    pub fn build(graph: &ModalityGraph, extractor: &ExtractorConfig, seed: u64) -> Result<Self> {
        graph.validate()?;
        extractor.validate()?;
        let d = graph.feature_dim;
        let mut extractors = BTreeMap::new();
        for name in graph.extractor_nodes() {
            let channels = match graph.node(name) {
                Some(NodeRef::Source(s)) => s.channels,
                Some(NodeRef::Fused(f)) => f.inputs.iter().map(|i| graph.source(i).map(|s| s.channels)).sum::<Result<usize>>()?,
                None => unreachable!("validated"),
            };
            let mut rng = stream_rng(seed, &format!("init/extractor/{name}"));
            extractors.insert(name.to_string(), ResNet1d::new(channels, extractor, d, &mut rng));
        }
        let mut projectors = BTreeMap::new();
        for name in graph.projector_nodes() {
            let Some(NodeRef::Fused(f)) = graph.node(name) else { unreachable!("projector on a fused node") };
            let mut rng = stream_rng(seed, &format!("init/projector/{name}"));
            projectors.insert(name.to_string(), Linear::new(f.inputs.len() * d, d, &mut rng));
        }
        let mut heads = BTreeMap::new();
        for name in &graph.classification {
            let mut rng = stream_rng(seed, &format!("init/head/{name}"));
            heads.insert(name.clone(), Linear::new(d, graph.num_classes, &mut rng));
        }
        Ok(Self { graph: graph.clone(), extractor_cfg: extractor.clone(), extractors, projectors, heads })
    }

    pub fn graph(&self) -> &ModalityGraph {
        &self.graph
    }

    pub fn extractor_config(&self) -> &ExtractorConfig {
        &self.extractor_cfg
    }

    pub fn num_extractors(&self) -> usize {
        self.extractors.len()
    }

    pub fn num_projectors(&self) -> usize {
        self.projectors.len()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn extractor_names(&self) -> impl Iterator<Item = &str> {
        self.extractors.keys().map(String::as_str)
    }

    pub fn projector_mut(&mut self, node: &str) -> Option<&mut Linear> {
        self.projectors.get_mut(node)
    }

    pub fn head(&self, node: &str) -> Option<&Linear> {
        self.heads.get(node)
    }

    fn input_for(&self, extractor: &str, data: &BTreeMap<String, Array3<f32>>) -> Result<Array3<f32>> {
        let fetch = |s: &SourceNode| -> Result<&Array3<f32>> {
            let x = data
                .get(s.modality_id())
                .ok_or_else(|| Error::Shape(format!("no input for modality `{}`", s.modality_id())))?;
            let (_, l, c) = x.dim();
            if l != s.window_len || c != s.channels {
                return Err(Error::Shape(format!(
                    "node `{}` expects windows [{}, {}], got [{l}, {c}]",
                    s.name, s.window_len, s.channels
                )));
            }
            Ok(x)
        };
        match self.graph.node(extractor) {
            Some(NodeRef::Source(s)) => Ok(to_channel_major(fetch(s)?)),
            Some(NodeRef::Fused(f)) => {
                let parts: Vec<&Array3<f32>> =
                    f.inputs.iter().map(|i| fetch(self.graph.source(i)?)).collect::<Result<_>>()?;
                let views: Vec<ArrayView3<f32>> = parts.iter().map(|a| a.view()).collect();
                Ok(to_channel_major(&fuse_early(&views)?))
            }
            None => Err(Error::Graph(format!("unknown node `{extractor}`"))),
        }
    }

    /// Extractors needed for the features of `nodes`.
    fn extractors_for(&self, nodes: &[String]) -> Result<Vec<String>> {
        let mut out = BTreeSet::new();
        for n in nodes {
            match self.graph.node(n) {
                Some(NodeRef::Fused(f)) if f.kind == FusionKind::Late => out.extend(f.inputs.iter().cloned()),
                Some(_) => {
                    out.insert(n.clone());
                }
                None => return Err(Error::Graph(format!("unknown node `{n}`"))),
            }
        }
        match out.iter().find(|n| !self.extractors.contains_key(*n)) {
            Some(n) => Err(Error::Graph(format!("node `{n}` has no extractor in this model"))),
            None => Ok(out.into_iter().collect()),
        }
    }

    /// Training-mode features of `nodes`, each `[B, D]`. `data` maps
    /// modality ids to `[B, L, C]` windows.
    pub fn forward_features(
        &mut self,
        nodes: &[String],
        data: &BTreeMap<String, Array3<f32>>,
    ) -> Result<(BTreeMap<String, Array2<f32>>, ForwardCache)> {
        let mut z = BTreeMap::new();
        let mut extractor_caches = BTreeMap::new();
        for name in self.extractors_for(nodes)? {
            let x = self.input_for(&name, data)?;
            let (f, cache) = self.extractors.get_mut(&name).expect("checked").forward(&x, true);
            z.insert(name.clone(), f);
            extractor_caches.insert(name, cache);
        }
        let mut projector_caches = BTreeMap::new();
        for n in nodes {
            if let Some(NodeRef::Fused(f)) = self.graph.node(n) {
                if f.kind == FusionKind::Late {
                    let views: Vec<ArrayView2<f32>> = f.inputs.iter().map(|i| z[i].view()).collect();
                    let concat = concat_features(&views)?;
                    let (mut out, cache) = self.projectors[n].forward(&concat);
                    relu(&mut out);
                    projector_caches.insert(n.clone(), (cache, out.clone()));
                    z.insert(n.clone(), out);
                }
            }
        }
        let features = nodes.iter().map(|n| (n.clone(), z[n].clone())).collect();
        Ok((features, ForwardCache { extractors: extractor_caches, projectors: projector_caches }))
    }

    /// Accumulates parameter gradients given `dL/dz` for the nodes of a
    /// [`Model::forward_features`] call.
    pub fn backward_features(&mut self, cache: &ForwardCache, grads: &BTreeMap<String, Array2<f32>>) -> Result<()> {
        let mut extractor_grads: BTreeMap<String, Array2<f32>> = BTreeMap::new();
        let mut add = |name: &str, g: Array2<f32>| match extractor_grads.get_mut(name) {
            Some(acc) => *acc += &g,
            None => {
                extractor_grads.insert(name.to_string(), g);
            }
        };
        for (n, g) in grads {
            match cache.projectors.get(n) {
                Some((lin_cache, out)) => {
                    let Some(NodeRef::Fused(f)) = self.graph.node(n) else { unreachable!("projector node") };
                    let mut d = g.clone();
                    relu_backward(out, &mut d);
                    let dconcat = self.projectors.get_mut(n).expect("cached").backward(lin_cache, &d);
                    let dim = self.graph.feature_dim;
                    for (k, input) in f.inputs.iter().enumerate() {
                        add(input, dconcat.slice(s![.., k * dim..(k + 1) * dim]).to_owned());
                    }
                }
                None => add(n, g.clone()),
            }
        }
        for (name, g) in &extractor_grads {
            let c = cache
                .extractors
                .get(name)
                .ok_or_else(|| Error::Internal(format!("gradient for `{name}` without a forward cache")))?;
            self.extractors.get_mut(name).expect("cached").backward(c, g);
        }
        Ok(())
    }

    pub fn head_forward(&self, node: &str, z: &Array2<f32>) -> Result<(Array2<f32>, LinearCache)> {
        let head = self.heads.get(node).ok_or_else(|| Error::Graph(format!("node `{node}` has no classifier head")))?;
        Ok(head.forward(z))
    }

    pub fn head_backward(&mut self, node: &str, cache: &LinearCache, dscores: &Array2<f32>) -> Result<Array2<f32>> {
        let head = self.heads.get_mut(node).ok_or_else(|| Error::Graph(format!("node `{node}` has no classifier head")))?;
        Ok(head.backward(cache, dscores))
    }

    /// Inference-mode feature of one node.
    pub fn extract(&self, node: &str, data: &BTreeMap<String, Array3<f32>>) -> Result<Array2<f32>> {
        match self.graph.node(node) {
            Some(NodeRef::Fused(f)) if f.kind == FusionKind::Late => {
                let parts: Vec<Array2<f32>> = f.inputs.iter().map(|i| self.extract(i, data)).collect::<Result<_>>()?;
                let views: Vec<ArrayView2<f32>> = parts.iter().map(|p| p.view()).collect();
                let projector = self
                    .projectors
                    .get(node)
                    .ok_or_else(|| Error::Graph(format!("node `{node}` has no projector in this model")))?;
                fuse_late(&views, projector)
            }
            Some(_) => {
                let net = self
                    .extractors
                    .get(node)
                    .ok_or_else(|| Error::Graph(format!("node `{node}` has no extractor in this model")))?;
                Ok(net.infer(&self.input_for(node, data)?))
            }
            None => Err(Error::Graph(format!("unknown node `{node}`"))),
        }
    }

    /// Raw class scores `[B, K]` of a classification node.
    pub fn classify(&self, node: &str, z: &Array2<f32>) -> Result<Array2<f32>> {
        let head = self.heads.get(node).ok_or_else(|| Error::Graph(format!("node `{node}` has no classifier head")))?;
        if z.ncols() != head.in_features() {
            return Err(Error::Shape(format!("head of `{node}` expects {} features, got {}", head.in_features(), z.ncols())));
        }
        Ok(head.forward(z).0)
    }

    pub fn predict_scores(&self, node: &str, data: &BTreeMap<String, Array3<f32>>) -> Result<Array2<f32>> {
        self.classify(node, &self.extract(node, data)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        struct Collect(BTreeMap<String, TensorData>);
        impl StateVisitor for Collect {
            fn tensor(&mut self, name: &str, t: &ndarray::ArrayD<f32>) {
                self.0.insert(name.to_string(), TensorData::from_array(t));
            }
        }
        let mut c = Collect(BTreeMap::new());
        self.visit("", &mut c);
        Checkpoint { graph: self.graph.clone(), extractor: self.extractor_cfg.clone(), tensors: c.0 }
    }

    /// Rebuilds a model and overwrites every tensor from the checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::build(&ckpt.graph, &ckpt.extractor, 0)?;
        struct Load<'a> {
            tensors: &'a BTreeMap<String, TensorData>,
            seen: usize,
            error: Option<Error>,
        }
        impl Load<'_> {
            fn fill(&mut self, name: &str, target: &mut ndarray::ArrayD<f32>) {
                match self.tensors.get(name) {
                    Some(t) if t.shape == target.shape() => {
                        target.iter_mut().zip(&t.data).for_each(|(a, b)| *a = *b);
                        self.seen += 1;
                    }
                    Some(t) => {
                        self.error.get_or_insert(Error::Format(format!(
                            "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                            t.shape,
                            target.shape()
                        )));
                    }
                    None => {
                        self.error.get_or_insert(Error::Format(format!("checkpoint lacks tensor `{name}`")));
                    }
                }
            }
        }
        impl ParamVisitor for Load<'_> {
            fn param(&mut self, name: &str, p: &mut Param) {
                self.fill(name, &mut p.value);
            }
            fn buffer(&mut self, name: &str, b: &mut ndarray::ArrayD<f32>) {
                self.fill(name, b);
            }
        }
        let mut load = Load { tensors: &ckpt.tensors, seen: 0, error: None };
        model.visit_mut("", &mut load);
        if let Some(e) = load.error {
            return Err(e);
        }
        if load.seen != ckpt.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors but the model uses {}",
                ckpt.tensors.len(),
                load.seen
            )));
        }
        Ok(model)
    }
}

impl Module for Model {
    fn visit_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (n, e) in &mut self.extractors {
            e.visit_mut(&join(prefix, &format!("extractor/{n}")), v);
        }
        for (n, p) in &mut self.projectors {
            p.visit_mut(&join(prefix, &format!("projector/{n}")), v);
        }
        for (n, h) in &mut self.heads {
            h.visit_mut(&join(prefix, &format!("head/{n}")), v);
        }
    }

    fn visit(&self, prefix: &str, v: &mut dyn StateVisitor) {
        for (n, e) in &self.extractors {
            e.visit(&join(prefix, &format!("extractor/{n}")), v);
        }
        for (n, p) in &self.projectors {
            p.visit(&join(prefix, &format!("projector/{n}")), v);
        }
        for (n, h) in &self.heads {
            h.visit(&join(prefix, &format!("head/{n}")), v);
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    pub fn source(name: &str, channels: usize, rate: f64, len: usize) -> SourceNode {
        SourceNode { name: name.into(), modality: None, channels, rate_hz: rate, window_len: len, kind: "inertial".into() }
    }

    pub fn tiny_cfg() -> ExtractorConfig {
        ExtractorConfig { stem_kernel: 3, block_kernel: 3, widths: vec![4, 6], blocks_per_stage: 1 }
    }

    /// Two sources and a late-fusion node, everything classified and contrasted.
    pub fn afvf_graph() -> ModalityGraph {
        ModalityGraph {
            sources: vec![source("a", 3, 50.0, 16), source("b", 2, 50.0, 16)],
            fused: vec![FusedNode { name: "ab".into(), kind: FusionKind::Late, inputs: vec!["a".into(), "b".into()] }],
            contrastive: vec!["a".into(), "b".into(), "ab".into()],
            classification: vec!["a".into(), "b".into(), "ab".into()],
            inference: vec![],
            feature_dim: 8,
            num_classes: 3,
        }
    }

    pub fn random_inputs(graph: &ModalityGraph, b: usize, seed: u64) -> BTreeMap<String, Array3<f32>> {
        let mut rng = stream_rng(seed, "inputs");
        graph
            .sources
            .iter()
            .map(|s| {
                let x = Array::from_shape_simple_fn((b, s.window_len, s.channels), || rng.random_range(-1.0f32..1.0));
                (s.modality_id().to_string(), x)
            })
            .collect()
    }

    #[test]
    fn ablation_switches() {
        let mut g = afvf_graph();
        g.inference = vec!["ab".into()];
        let no_inputs = g.ablate(true, false).unwrap();
        assert_eq!(no_inputs.classification, vec!["ab".to_string()]);
        assert!(no_inputs.contrastive.is_empty());
        let m = Model::build(&no_inputs, &tiny_cfg(), 0).unwrap();
        assert_eq!((m.num_extractors(), m.num_projectors(), m.num_heads()), (2, 1, 1));

        assert!(matches!(g.ablate(false, true), Err(Error::Graph(_))));
        g.inference = vec!["a".into()];
        let no_fused = g.ablate(false, true).unwrap();
        assert_eq!(no_fused.contrastive, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(Model::build(&no_fused, &tiny_cfg(), 0).unwrap().num_projectors(), 0);
        assert_eq!(g.ablate(false, false).unwrap(), g);
    }

    #[test]
    fn afvf_component_counts() {
        let m = Model::build(&afvf_graph(), &tiny_cfg(), 0).unwrap();
        assert_eq!((m.num_extractors(), m.num_projectors(), m.num_heads()), (2, 1, 3));
    }

    #[test]
    fn early_and_late_variants_of_fusing_two_of_three() {
        let sources = vec![source("a", 3, 50.0, 16), source("b", 3, 50.0, 16), source("c", 3, 50.0, 16)];
        let mut g = ModalityGraph {
            sources,
            fused: vec![FusedNode { name: "ab".into(), kind: FusionKind::Early, inputs: vec!["a".into(), "b".into()] }],
            contrastive: vec!["ab".into(), "c".into()],
            classification: vec!["ab".into(), "c".into()],
            inference: vec![],
            feature_dim: 8,
            num_classes: 2,
        };
        let early = Model::build(&g, &tiny_cfg(), 0).unwrap();
        assert_eq!((early.num_extractors(), early.num_projectors()), (2, 0));
        assert_eq!(early.extractors["ab"].in_channels(), 6);
        g.fused[0].kind = FusionKind::Late;
        let late = Model::build(&g, &tiny_cfg(), 0).unwrap();
        assert_eq!((late.num_extractors(), late.num_projectors()), (3, 1));
    }

    #[test]
    fn single_source_graph() {
        let g = ModalityGraph {
            sources: vec![source("a", 3, 50.0, 16)],
            fused: vec![],
            contrastive: vec![],
            classification: vec!["a".into()],
            inference: vec![],
            feature_dim: 8,
            num_classes: 2,
        };
        let m = Model::build(&g, &tiny_cfg(), 0).unwrap();
        assert_eq!((m.num_extractors(), m.num_projectors(), m.num_heads()), (1, 0, 1));
    }

    #[test]
    fn graph_errors() {
        let mut g = afvf_graph();
        g.sources[1] = source("b", 3, 20.0, 16);
        g.fused[0].kind = FusionKind::Early;
        assert!(matches!(g.validate(), Err(Error::Graph(_))));
        let mut g = afvf_graph();
        g.fused[0].inputs.pop();
        assert!(matches!(g.validate(), Err(Error::Graph(_))));
        let mut g = afvf_graph();
        g.contrastive = vec!["a".into()];
        assert!(g.validate().is_err());
        let mut g = afvf_graph();
        g.inference = vec!["zz".into()];
        assert!(g.validate().is_err());
        let mut g = afvf_graph();
        g.fused[0].kind = FusionKind::Early;
        g.sources[1].kind = "skeleton3d".into();
        assert!(g.validate().is_err());
    }

    #[test]
    fn fuse_early_shapes() {
        let a = Array3::<f32>::ones((2, 5, 3));
        let b = Array3::<f32>::zeros((2, 5, 3));
        let f = fuse_early(&[a.view(), b.view()]).unwrap();
        assert_eq!(f.dim(), (2, 5, 6));
        assert_eq!(f[[1, 4, 2]], 1.0);
        assert_eq!(f[[1, 4, 3]], 0.0);
        assert_eq!(fuse_early(&[a.view()]).unwrap(), a);
        assert!(fuse_early(&[a.view(), Array3::<f32>::zeros((2, 4, 3)).view()]).is_err());
    }

    #[test]
    fn fuse_late_identity_projector() {
        let mut rng = stream_rng(1, "late");
        let z1 = Array2::from_shape_simple_fn((3, 8), || rng.random_range(0.0f32..1.0));
        let z2 = Array2::from_shape_simple_fn((3, 8), || rng.random_range(0.0f32..1.0));
        let mut proj = Linear::new(16, 8, &mut rng);
        proj.weight.value.fill(0.0);
        proj.bias.value.fill(0.0);
        for i in 0..8 {
            proj.weight.value[[i, i]] = 1.0;
        }
        assert_eq!(fuse_late(&[z1.view(), z2.view()], &proj).unwrap(), z1);
        let z3 = z1.clone();
        let p3 = Linear::new(24, 8, &mut rng);
        let out = fuse_late(&[z1.view(), z2.view(), z3.view()], &p3).unwrap();
        assert_eq!(out.dim(), (3, 8));
        assert!(out.iter().all(|v| *v >= 0.0));
        assert!(fuse_late(&[z1.view(), z2.view()], &p3).is_err());
    }

    #[test]
    fn extract_contracts() {
        let g = afvf_graph();
        let m = Model::build(&g, &tiny_cfg(), 3).unwrap();
        let data = random_inputs(&g, 5, 0);
        for node in ["a", "b", "ab"] {
            let z = m.extract(node, &data).unwrap();
            assert_eq!(z.dim(), (5, 8));
            assert!(z.iter().all(|v| *v >= 0.0 && v.is_finite()));
            // batched and one-at-a-time inference agree
            for i in 0..5 {
                let single: BTreeMap<String, Array3<f32>> =
                    data.iter().map(|(k, v)| (k.clone(), v.slice(s![i..i + 1, .., ..]).to_owned())).collect();
                let zi = m.extract(node, &single).unwrap();
                for (x, y) in zi.row(0).iter().zip(z.row(i)) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
        let zeros: BTreeMap<String, Array3<f32>> = data.iter().map(|(k, v)| (k.clone(), Array3::zeros(v.dim()))).collect();
        assert!(m.extract("ab", &zeros).unwrap().iter().all(|v| v.is_finite() && *v >= 0.0));
        let mut bad = data.clone();
        bad.insert("a".into(), Array3::zeros((5, 16, 2)));
        assert!(matches!(m.extract("a", &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn classify_is_shift_consistent() {
        let g = afvf_graph();
        let m = Model::build(&g, &tiny_cfg(), 3).unwrap();
        let data = random_inputs(&g, 4, 1);
        let s = m.predict_scores("ab", &data).unwrap();
        assert_eq!(s.dim(), (4, 3));
        assert!(s.iter().all(|v| v.is_finite()));
        let shifted = &s + 7.5;
        assert_eq!(crate::objectives::argmax_rows(&s.view()), crate::objectives::argmax_rows(&shifted.view()));
        assert!(m.classify("zz", &Array2::zeros((1, 8))).is_err());
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        let g = afvf_graph();
        let mut m = Model::build(&g, &tiny_cfg(), 5).unwrap();
        let data = random_inputs(&g, 6, 2);
        let (z, cache) = m.forward_features(&g.classification, &data).unwrap();
        let mut grads = BTreeMap::new();
        for (n, f) in &z {
            let (scores, hc) = m.head_forward(n, f).unwrap();
            let d = m.head_backward(n, &hc, &Array2::ones(scores.dim())).unwrap();
            grads.insert(n.clone(), d + 0.1);
        }
        m.backward_features(&cache, &grads).unwrap();
        struct Check(Vec<String>);
        impl ParamVisitor for Check {
            fn param(&mut self, name: &str, p: &mut Param) {
                if p.grad.iter().all(|g| *g == 0.0) {
                    self.0.push(name.to_string());
                }
            }
        }
        let mut c = Check(Vec::new());
        m.visit_mut("", &mut c);
        assert!(c.0.is_empty(), "no gradient: {:?}", c.0);
    }

    #[test]
    fn late_fusion_gradient_matches_finite_differences() {
        let g = afvf_graph();
        let mut m = Model::build(&g, &tiny_cfg(), 9).unwrap();
        let data = random_inputs(&g, 3, 4);
        let nodes = vec!["ab".to_string()];
        let coef = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f32 * 0.37).sin());
        let objective = |m: &mut Model| -> f64 {
            let (z, _) = m.clone().forward_features(&nodes, &data).unwrap();
            z["ab"].iter().zip(coef.iter()).map(|(a, b)| f64::from(a * b)).sum()
        };
        let (_, cache) = m.clone().forward_features(&nodes, &data).unwrap();
        m.backward_features(&cache, &[("ab".to_string(), coef.clone())].into()).unwrap();
        let h = 1e-2f32;
        let analytic = m.projectors["ab"].weight.grad.clone();
        for idx in [[0usize, 0], [3, 9], [7, 15]] {
            let mut p = m.clone();
            p.projectors.get_mut("ab").unwrap().weight.value[idx] += h;
            let mut q = m.clone();
            q.projectors.get_mut("ab").unwrap().weight.value[idx] -= h;
            let fd = (objective(&mut p) - objective(&mut q)) / (2.0 * f64::from(h));
            assert!((fd - f64::from(analytic[idx])).abs() < 1e-2 * fd.abs().max(1.0), "{fd} vs {}", analytic[idx]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = afvf_graph();
        let m = Model::build(&g, &tiny_cfg(), 11).unwrap();
        let json = serde_json::to_string(&m.checkpoint()).unwrap();
        let back = Model::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        let data = random_inputs(&g, 4, 6);
        for n in ["a", "b", "ab"] {
            assert_eq!(m.predict_scores(n, &data).unwrap(), back.predict_scores(n, &data).unwrap());
        }
        assert_eq!(back.checkpoint(), m.checkpoint());
        let mut ck = m.checkpoint();
        ck.tensors.remove("head/a.bias");
        assert!(matches!(Model::from_checkpoint(&ck), Err(Error::Format(_))));
    }

    #[test]
    fn required_modalities_of_fused_node() {
        let g = afvf_graph();
        assert_eq!(g.required_modalities(&["ab"]).unwrap(), ["a".to_string(), "b".to_string()].into());
        assert_eq!(g.required_modalities(&["b"]).unwrap(), ["b".to_string()].into());
    }
}
