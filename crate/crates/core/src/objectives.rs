//! Loss functions of the joint objective.
//!
//! All losses work in `f64` on `[batch, dim]` matrices and come in two
//! flavours: a value-only function and a `*_with_grad` function returning the
//! analytic gradient with respect to every input matrix. Features produced by
//! the extractors are `f32`; the training engine widens them before calling
//! in here.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Softmax temperature of NT-Xent.
    pub temperature: f64,
    /// Sum both directions of every pair instead of the single anchored one.
    pub two_view: bool,
    /// Added to vector norms inside the cosine similarity.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            two_view: false,
            epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Parameter(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn row_norms(z: &ArrayView2<f64>) -> Vec<f64> {
    z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

fn normalized_rows(z: &ArrayView2<f64>, norms: &[f64], eps: f64) -> Array2<f64> {
    let mut out = z.to_owned();
    for (mut row, n) in out.rows_mut().into_iter().zip(norms) {
        row /= n + eps;
    }
    out
}

/// `s[i, j] = cos(a_i, b_j)` with `eps` added to both norms.
pub fn cosine_similarity_matrix(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    eps: f64,
) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "feature dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let ua = normalized_rows(a, &row_norms(a), eps);
    let ub = normalized_rows(b, &row_norms(b), eps);
    Ok(ua.dot(&ub.t()))
}

fn check_pair(z1: &ArrayView2<f64>, z2: &ArrayView2<f64>, tau: f64) -> Result<()> {
    if z1.dim() != z2.dim() {
        return Err(Error::Shape(format!(
            "view shapes differ: {:?} vs {:?}",
            z1.dim(),
            z2.dim()
        )));
    }
    if z1.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// Row-wise log-softmax of `logits`.
fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// NT-Xent between two aligned views, anchored on `z1`.
///
/// Row `i` of both matrices is a positive pair; every other row of `z2` is a
/// negative for anchor `z1[i]`. Returns the mean over anchors.
pub fn ntxent_pair(z1: &ArrayView2<f64>, z2: &ArrayView2<f64>, tau: f64, eps: f64) -> Result<f64> {
    check_pair(z1, z2, tau)?;
    let sim = cosine_similarity_matrix(z1, z2, eps)?;
    let logp = log_softmax_rows(&(sim / tau));
    let b = z1.nrows();
    Ok(-(0..b).map(|i| logp[[i, i]]).sum::<f64>() / b as f64)
}

/// Gradient of `u = a / (|a| + eps)` pulled back to `a`.
fn pull_back_normalization(a: &ArrayView2<f64>, norms: &[f64], gu: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut ga = Array2::zeros(a.dim());
    for (i, &n) in norms.iter().enumerate() {
        let d = n + eps;
        let row_a = a.row(i);
        let row_g = gu.row(i);
        let mut out = ga.row_mut(i);
        out.assign(&(&row_g / d));
        if n > 0.0 {
            let proj = row_a.dot(&row_g) / (n * d * d);
            out.scaled_add(-proj, &row_a);
        }
    }
    ga
}

/// [`ntxent_pair`] plus its gradients with respect to `z1` and `z2`.
pub fn ntxent_pair_with_grad(
    z1: &ArrayView2<f64>,
    z2: &ArrayView2<f64>,
    tau: f64,
    eps: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_pair(z1, z2, tau)?;
    let b = z1.nrows();
    let n1 = row_norms(z1);
    let n2 = row_norms(z2);
    let u1 = normalized_rows(z1, &n1, eps);
    let u2 = normalized_rows(z2, &n2, eps);
    let sim = u1.dot(&u2.t());
    let logp = log_softmax_rows(&(sim / tau));
    let loss = -(0..b).map(|i| logp[[i, i]]).sum::<f64>() / b as f64;

    // dL/ds_ij = (p_ij - [i == j]) / (tau * B)
    let mut gs = logp.mapv(f64::exp);
    for i in 0..b {
        gs[[i, i]] -= 1.0;
    }
    gs /= tau * b as f64;

    let gu1 = gs.dot(&u2);
    let gu2 = gs.t().dot(&u1);
    let g1 = pull_back_normalization(z1, &n1, &gu1, eps);
    let g2 = pull_back_normalization(z2, &n2, &gu2, eps);
    Ok((loss, g1, g2))
}

fn check_views(views: &[ArrayView2<f64>]) -> Result<()> {
    if views.len() < 2 {
        return Err(Error::Config(format!(
            "contrastive loss needs at least 2 views, got {}",
            views.len()
        )));
    }
    let dim = views[0].dim();
    if let Some(v) = views.iter().find(|v| v.dim() != dim) {
        return Err(Error::Shape(format!(
            "view shapes differ: {:?} vs {:?}",
            dim,
            v.dim()
        )));
    }
    Ok(())
}

fn pair_count(m: usize) -> f64 {
    (m * (m - 1) / 2) as f64
}

/// Multi-view contrastive loss: NT-Xent averaged over all unordered pairs of
/// views, the earlier view in `views` being the anchor. With
/// `cfg.two_view` each pair contributes both directions.
pub fn multiview_contrastive(views: &[ArrayView2<f64>], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    check_views(views)?;
    let mut total = 0.0;
    for a in 0..views.len() {
        for b in a + 1..views.len() {
            total += ntxent_pair(&views[a], &views[b], cfg.temperature, cfg.epsilon)?;
            if cfg.two_view {
                total += ntxent_pair(&views[b], &views[a], cfg.temperature, cfg.epsilon)?;
            }
        }
    }
    Ok(total / pair_count(views.len()))
}

/// [`multiview_contrastive`] plus one gradient matrix per view.
pub fn multiview_contrastive_with_grad(
    views: &[ArrayView2<f64>],
    cfg: &LossConfig,
) -> Result<(f64, Vec<Array2<f64>>)> {
    cfg.validate()?;
    check_views(views)?;
    let scale = 1.0 / pair_count(views.len());
    let mut grads: Vec<Array2<f64>> = views.iter().map(|v| Array2::zeros(v.dim())).collect();
    let mut total = 0.0;
    let accumulate = |anchor: usize, other: usize, grads: &mut Vec<Array2<f64>>| -> Result<f64> {
        let (l, ga, go) =
            ntxent_pair_with_grad(&views[anchor], &views[other], cfg.temperature, cfg.epsilon)?;
        grads[anchor].scaled_add(scale, &ga);
        grads[other].scaled_add(scale, &go);
        Ok(l)
    };
    for a in 0..views.len() {
        for b in a + 1..views.len() {
            total += accumulate(a, b, &mut grads)?;
            if cfg.two_view {
                total += accumulate(b, a, &mut grads)?;
            }
        }
    }
    Ok((total * scale, grads))
}

fn check_scores(scores: &[ArrayView2<f64>], labels: &[usize]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Config("classification loss needs at least one node".into()));
    }
    let k = scores[0].ncols();
    for s in scores {
        if s.nrows() != labels.len() || s.ncols() != k {
            return Err(Error::Shape(format!(
                "scores {:?} do not match {} labels x {} classes",
                s.dim(),
                labels.len(),
                k
            )));
        }
    }
    if labels.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {y} out of range for {k} classes")));
    }
    Ok(k)
}

/// Cross entropy averaged over the batch, then over the classified nodes.
pub fn classification_loss(scores: &[ArrayView2<f64>], labels: &[usize]) -> Result<f64> {
    check_scores(scores, labels)?;
    let mut total = 0.0;
    for s in scores {
        let logp = log_softmax_rows(&s.to_owned());
        total -= labels.iter().enumerate().map(|(i, &y)| logp[[i, y]]).sum::<f64>() / labels.len() as f64;
    }
    Ok(total / scores.len() as f64)
}

/// [`classification_loss`] plus the gradient for each node's scores.
pub fn classification_loss_with_grad(
    scores: &[ArrayView2<f64>],
    labels: &[usize],
) -> Result<(f64, Vec<Array2<f64>>)> {
    check_scores(scores, labels)?;
    let scale = 1.0 / (scores.len() * labels.len()) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    for s in scores {
        let logp = log_softmax_rows(&s.to_owned());
        let mut g = logp.mapv(f64::exp);
        for (i, &y) in labels.iter().enumerate() {
            total -= logp[[i, y]];
            g[[i, y]] -= 1.0;
        }
        g *= scale;
        grads.push(g);
    }
    Ok((total * scale, grads))
}

/// Unweighted sum of the two objectives.
pub fn total_loss(cls: f64, ctr: f64) -> Result<f64> {
    if !cls.is_finite() || !ctr.is_finite() {
        return Err(Error::NonFinite(format!("cls = {cls}, ctr = {ctr}")));
    }
    Ok(cls + ctr)
}

/// Argmax per row; ties resolve to the lowest index.
pub fn argmax_rows(scores: &ArrayView2<f32>) -> Vec<usize> {
    scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
