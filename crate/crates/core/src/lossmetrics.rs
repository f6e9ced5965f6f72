//! Training losses (BCE with soft targets, soft and hinge pairwise ranking)
//! and the GAP@n evaluation metric.
//!
//! The `*_with_grad` kernels return the loss together with its exact
//! gradient with respect to the raw prediction tensor; the compute-graph
//! loss nodes call straight into them so the graph and the standalone
//! functions can never disagree.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::diffcore::{PairScope, Tensor};
use crate::error::{Error, Result};

/// Clamp bound for probabilities inside the BCE logs.
pub const BCE_EPS: f64 = 1e-7;

/// Per-video ranked predictions, scores descending.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionList {
    pub video_id: String,
    /// (label index, score) pairs, sorted by score descending.
    pub items: Vec<(u32, f64)>,
}

/// Video id -> set of positive label indices.
pub type GroundTruth = BTreeMap<String, BTreeSet<u32>>;

// ---------------------------------------------------------------------------
// Binary cross-entropy

/// Mean binary cross-entropy with soft targets.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(bce_with_grad(pred, target)?.0)
}

pub(crate) fn bce_with_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::input(format!(
            "bce: prediction shape {:?} does not match target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for i in 0..pred.len() {
        let t = target.data()[i];
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::input(format!("bce: target {t} outside [0,1]")));
        }
        let p = pred.data()[i];
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        // Exact gradient of the clamped forward: zero where the clamp is active.
        if p > BCE_EPS && p < 1.0 - BCE_EPS {
            grad.data_mut()[i] = -(t / pc - (1.0 - t) / (1.0 - pc)) / n;
        }
    }
    Ok((loss / n, grad))
}

// ---------------------------------------------------------------------------
// Pairwise ranking losses

/// Soft pairwise ranking loss: mean over selected (positive, negative)
/// score pairs of `ln(1 + exp(n - p + 1))`.
///
/// Per sample, only its `top_k_neg` highest-scored negatives enter the
/// pool; with [`PairScope::Batch`] every positive in the batch is paired
/// with every pooled negative in the batch.
pub fn soft_rank_loss(
    scores: &Tensor,
    labels: &Tensor,
    top_k_neg: usize,
    scope: PairScope,
) -> Result<f64> {
    Ok(soft_rank_with_grad(scores, labels, top_k_neg, scope)?.0)
}

/// Hinge ranking loss: mean over selected pairs of `max(0, margin - (p - n))`.
pub fn hinge_rank_loss(
    scores: &Tensor,
    labels: &Tensor,
    margin: f64,
    top_k_neg: usize,
    scope: PairScope,
) -> Result<f64> {
    Ok(hinge_rank_with_grad(scores, labels, margin, top_k_neg, scope)?.0)
}

/// Flat index of every positive, and per-sample selected negatives.
struct RankPairs {
    positives: Vec<Vec<usize>>, // per sample
    negatives: Vec<Vec<usize>>, // per sample, top-k by score
}

fn select_rank_pairs(scores: &Tensor, labels: &Tensor, top_k_neg: usize) -> Result<RankPairs> {
    if scores.shape() != labels.shape() {
        return Err(Error::input(format!(
            "ranking loss: score shape {:?} does not match label shape {:?}",
            scores.shape(),
            labels.shape()
        )));
    }
    if scores.rank() != 2 {
        return Err(Error::input(
            "ranking loss expects a [batch, labels] tensor",
        ));
    }
    let (b, l) = (scores.shape()[0], scores.shape()[1]);
    let mut positives = Vec::with_capacity(b);
    let mut negatives = Vec::with_capacity(b);
    for r in 0..b {
        let mut pos = Vec::new();
        let mut neg: Vec<usize> = Vec::new();
        for c in 0..l {
            let idx = r * l + c;
            let lab = labels.data()[idx];
            if lab == 1.0 {
                pos.push(idx);
            } else if lab == 0.0 {
                neg.push(idx);
            } else {
                return Err(Error::input(format!(
                    "ranking loss requires binary labels, got {lab}"
                )));
            }
        }
        // Highest-scored negatives first; ties broken by label index for
        // determinism.
        neg.sort_by(|&a, &bb| {
            scores.data()[bb]
                .partial_cmp(&scores.data()[a])
                .expect("finite scores")
                .then(a.cmp(&bb))
        });
        neg.truncate(top_k_neg);
        positives.push(pos);
        negatives.push(neg);
    }
    Ok(RankPairs {
        positives,
        negatives,
    })
}

fn rank_loss_impl(
    scores: &Tensor,
    labels: &Tensor,
    top_k_neg: usize,
    scope: PairScope,
    mut pair_fn: impl FnMut(f64, f64) -> (f64, f64), // (loss, dloss/d(n - p))
) -> Result<(f64, Tensor)> {
    let pairs = select_rank_pairs(scores, labels, top_k_neg)?;
    let mut grad = Tensor::zeros(scores.shape());
    let mut total = 0.0;
    let mut count = 0usize;
    let mut terms: Vec<(usize, usize, f64)> = Vec::new(); // (pos idx, neg idx, d)

    match scope {
        PairScope::Batch => {
            let all_pos: Vec<usize> = pairs.positives.iter().flatten().copied().collect();
            let all_neg: Vec<usize> = pairs.negatives.iter().flatten().copied().collect();
            if all_pos.is_empty() {
                return Err(Error::input("ranking loss: no positive entries in batch"));
            }
            if all_neg.is_empty() {
                return Err(Error::input("ranking loss: no negative entries in batch"));
            }
            for &p in &all_pos {
                for &n in &all_neg {
                    let (loss, d) = pair_fn(scores.data()[p], scores.data()[n]);
                    total += loss;
                    terms.push((p, n, d));
                }
            }
            count = all_pos.len() * all_neg.len();
        }
        PairScope::PerSample => {
            for (pos, neg) in pairs.positives.iter().zip(&pairs.negatives) {
                if pos.is_empty() {
                    return Err(Error::input(
                        "ranking loss: a sample has no positive entries",
                    ));
                }
                if neg.is_empty() {
                    return Err(Error::input(
                        "ranking loss: a sample has no negative entries",
                    ));
                }
                for &p in pos {
                    for &n in neg {
                        let (loss, d) = pair_fn(scores.data()[p], scores.data()[n]);
                        total += loss;
                        terms.push((p, n, d));
                        count += 1;
                    }
                }
            }
        }
    }

    let scale = 1.0 / count as f64;
    for (p, n, d) in terms {
        grad.data_mut()[n] += d * scale;
        grad.data_mut()[p] -= d * scale;
    }
    Ok((total * scale, grad))
}

pub(crate) fn soft_rank_with_grad(
    scores: &Tensor,
    labels: &Tensor,
    top_k_neg: usize,
    scope: PairScope,
) -> Result<(f64, Tensor)> {
    rank_loss_impl(scores, labels, top_k_neg, scope, |p, n| {
        let x = n - p + 1.0;
        // ln(1 + e^x), stable for large |x|; derivative is sigmoid(x).
        let loss = if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        };
        (loss, crate::diffcore::sigmoid(x))
    })
}

pub(crate) fn hinge_rank_with_grad(
    scores: &Tensor,
    labels: &Tensor,
    margin: f64,
    top_k_neg: usize,
    scope: PairScope,
) -> Result<(f64, Tensor)> {
    rank_loss_impl(scores, labels, top_k_neg, scope, |p, n| {
        let u = margin - (p - n);
        if u > 0.0 {
            (u, 1.0)
        } else {
            (0.0, 0.0)
        }
    })
}

// ---------------------------------------------------------------------------
// GAP@n

/// Global average precision at n.
///
/// All retained predictions are pooled across videos, sorted by score
/// descending (ties by ascending video id then label index), and scanned
/// once; the precision-weighted hits are normalized by the total number
/// of positive (video, label) pairs in the ground truth.
pub fn gap_at_n(predictions: &[PredictionList], truth: &GroundTruth, n: usize) -> Result<f64> {
    let m: usize = truth.values().map(BTreeSet::len).sum();
    if m == 0 {
        return Err(Error::input("gap_at_n: ground truth has no positive pairs"));
    }

    struct Entry<'a> {
        score: f64,
        video: &'a str,
        label: u32,
        rel: bool,
    }

    let mut pool: Vec<Entry> = Vec::new();
    let mut seen: HashSet<(&str, u32)> = HashSet::new();
    for pl in predictions {
        for &(label, score) in pl.items.iter().take(n) {
            if !score.is_finite() {
                return Err(Error::input(format!(
                    "gap_at_n: non-finite score for video '{}'",
                    pl.video_id
                )));
            }
            if !seen.insert((pl.video_id.as_str(), label)) {
                return Err(Error::input(format!(
                    "gap_at_n: duplicate (video, label) pair ('{}', {label})",
                    pl.video_id
                )));
            }
            let rel = truth
                .get(&pl.video_id)
                .map(|s| s.contains(&label))
                .unwrap_or(false);
            pool.push(Entry {
                score,
                video: &pl.video_id,
                label,
                rel,
            });
        }
    }

    pool.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.video.cmp(b.video))
            .then_with(|| a.label.cmp(&b.label))
    });

    let mut correct = 0usize;
    let mut sum = 0.0;
    for (i, e) in pool.iter().enumerate() {
        if e.rel {
            correct += 1;
            sum += correct as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / m as f64)
}

/// Top-n entries of a dense score row as a ranked prediction list.
/// Ties are broken toward the smaller label index.
pub fn top_n_of_row(row: &[f64], n: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<u32> = (0..row.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        row[b as usize]
            .partial_cmp(&row[a as usize])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    idx.truncate(n);
    idx.into_iter().map(|i| (i, row[i as usize])).collect()
}

#[cfg(test)]
mod tests;
