//! Loss functions, in plain-value form and as graph nodes.

use crate::error::{invalid_arg, Result};
use crate::nn::graph::{bce_value, Graph};
use crate::nn::tensor::sq_dist;
use crate::nn::{NodeId, Real};

/// Default triplet margin.
pub const MARGIN: f64 = 0.1;
/// Probabilities are clamped to `[DELTA, 1 - DELTA]` inside cross-entropy.
pub const DELTA: f64 = 1e-7;

/// `max(0, |a - p| - |a - n| + margin)` with plain Euclidean distances.
pub fn triplet_margin_loss<F: Real>(anchor: &[F], pos: &[F], neg: &[F], margin: F) -> Result<F> {
    if anchor.len() != pos.len() || anchor.len() != neg.len() {
        return invalid_arg("triplet vectors differ in dimension");
    }
    if !(margin > F::zero()) {
        return invalid_arg("triplet margin must be positive");
    }
    let d_pos = sq_dist(anchor, pos).sqrt();
    let d_neg = sq_dist(anchor, neg).sqrt();
    Ok((d_pos - d_neg + margin).max(F::zero()))
}

/// Mean triplet loss over aligned rows of three `[N, m]` nodes.
pub fn triplet_graph<F: Real>(g: &mut Graph<F>, anchor: NodeId, pos: NodeId, neg: NodeId, margin: F) -> NodeId {
    let dp = g.sub(anchor, pos);
    let dp = g.row_norm(dp);
    let dn = g.sub(anchor, neg);
    let dn = g.row_norm(dn);
    let diff = g.sub(dp, dn);
    let shifted = g.add_scalar(diff, margin);
    let hinge = g.relu(shifted);
    g.mean(hinge)
}

/// Binary cross-entropy of one query answer.
pub fn bce_query_loss(p: f64, label: bool) -> f64 {
    bce_value(p, if label { 1.0 } else { 0.0 }, DELTA)
}

/// Per-class weights for one image: positives get `n_neg / n`, negatives
/// `n_pos / n`. An image with only one kind of label gets weight one
/// everywhere.
pub fn multilabel_weights<F: Real>(labels: &[F]) -> Vec<F> {
    let n = labels.len();
    let n_pos = labels.iter().filter(|&&y| y > F::from_f64_lossy(0.5)).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return vec![F::one(); n];
    }
    let total = F::from_usize(n).expect("count fits");
    let w_pos = F::from_usize(n_neg).expect("count fits") / total;
    let w_neg = F::from_usize(n_pos).expect("count fits") / total;
    labels
        .iter()
        .map(|&y| if y > F::from_f64_lossy(0.5) { w_pos } else { w_neg })
        .collect()
}

/// `sum_c w_c * BCE(p_c, y_c)` for one image, with the weights above.
pub fn weighted_multilabel_bce(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() {
        return invalid_arg(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        ));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return invalid_arg("labels must be 0 or 1");
    }
    let w = multilabel_weights(labels);
    Ok(probs
        .iter()
        .zip(labels)
        .zip(&w)
        .map(|((&p, &y), &w)| w * bce_value(p, y, DELTA))
        .sum())
}

/// Weighted cross-entropy of a `[N*C, 1]` or `[N, C]` probability node
/// laid out image-major, summed over classes and averaged over images.
pub fn multilabel_bce_graph<F: Real>(
    g: &mut Graph<F>,
    probs: NodeId,
    labels: &[F],
    n_classes: usize,
    weighted: bool,
) -> NodeId {
    let weights: Vec<F> = if weighted {
        labels.chunks(n_classes).flat_map(multilabel_weights).collect()
    } else {
        vec![F::one(); labels.len()]
    };
    let per_entry = g.bce(probs, labels, &weights, F::from_f64_lossy(DELTA));
    let total = g.sum(per_entry);
    let images = labels.len() / n_classes.max(1);
    g.scale(total, F::one() / F::from_usize(images.max(1)).expect("count fits"))
}

/// Mean unweighted cross-entropy of a probability node against 0/1 labels.
pub fn bce_graph<F: Real>(g: &mut Graph<F>, probs: NodeId, labels: &[F]) -> NodeId {
    let ones = vec![F::one(); labels.len()];
    let per = g.bce(probs, labels, &ones, F::from_f64_lossy(DELTA));
    g.mean(per)
}
