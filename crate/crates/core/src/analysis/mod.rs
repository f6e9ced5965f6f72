//! Error analysis: per-(video, label) TP/FP/FN taxonomy, per-label
//! precision/recall/F1 reports, frequency buckets, and per-group accuracy.
//!
//! Definitions (strict comparisons, vacuous universals hold):
//! a positive label is TP when its score exceeds every scored negative of
//! its video, otherwise FN; a negative label appearing in the video's
//! top 20 ranked predictions is FP when its score exceeds at least one
//! positive's score.


use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lossmetrics::{GroundTruth, PredictionList};
use crate::par;

/// How many ranked predictions per video are eligible as FP candidates.
pub const FP_CANDIDATE_RANKS: usize = 20;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum PairClass {
    TruePositive,
    FalsePositive,
    FalseNegative,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LabelCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl LabelCounts {
    pub fn active(&self) -> bool {
        self.true_pos + self.false_pos + self.false_neg > 0
    }
}

/// Classified (video, label) pairs plus derived per-label counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTaxonomy {
    /// (video id, label, class) in video order, positives before the
    /// video's false positives, each group by ascending label.
    pub assignments: Vec<(String, u32, PairClass)>,
    pub label_counts: BTreeMap<u32, LabelCounts>,
}

/// Classify every positive of every truth video and every top-20 negative.
///
/// Every positive label must carry a score in the video's prediction list;
/// a missing score is an input error.
pub fn error_taxonomy(
    predictions: &[PredictionList],
    truth: &GroundTruth,
) -> Result<ErrorTaxonomy> {
    let by_id: BTreeMap<&str, &PredictionList> = predictions
        .iter()
        .map(|p| (p.video_id.as_str(), p))
        .collect();

    let videos: Vec<(&String, &std::collections::BTreeSet<u32>)> = truth.iter().collect();
    let per_video = par::try_map_indices(
        videos.len(),
        |vi| -> Result<Vec<(String, u32, PairClass)>> {
            let (video_id, positives) = videos[vi];
            let pl = by_id
                .get(video_id.as_str())
                .ok_or_else(|| Error::input(format!("no predictions for video '{video_id}'")))?;
            let scores: BTreeMap<u32, f64> = pl.items.iter().copied().collect();

            let mut pos_scores = Vec::with_capacity(positives.len());
            for &label in positives {
                let s = scores.get(&label).copied().ok_or_else(|| {
                    Error::input(format!(
                        "missing score for positive label {label} of video '{video_id}'"
                    ))
                })?;
                pos_scores.push((label, s));
            }
            let min_pos = pos_scores
                .iter()
                .map(|&(_, s)| s)
                .fold(f64::INFINITY, f64::min);
            let max_neg = pl
                .items
                .iter()
                .filter(|(l, _)| !positives.contains(l))
                .map(|&(_, s)| s)
                .fold(f64::NEG_INFINITY, f64::max);

            let mut rows: Vec<(String, u32, PairClass)> = Vec::new();
            for &(label, score) in &pos_scores {
                let class = if score > max_neg || max_neg == f64::NEG_INFINITY {
                    PairClass::TruePositive
                } else {
                    PairClass::FalseNegative
                };
                rows.push((video_id.clone(), label, class));
            }
            if !positives.is_empty() {
                for &(label, score) in pl.items.iter().take(FP_CANDIDATE_RANKS) {
                    if !positives.contains(&label) && score > min_pos {
                        rows.push((video_id.clone(), label, PairClass::FalsePositive));
                    }
                }
            }
            Ok(rows)
        },
    )?;

    let mut assignments = Vec::new();
    let mut label_counts: BTreeMap<u32, LabelCounts> = BTreeMap::new();
    for rows in per_video {
        for (video, label, class) in rows {
            let counts = label_counts.entry(label).or_default();
            match class {
                PairClass::TruePositive => counts.true_pos += 1,
                PairClass::FalsePositive => counts.false_pos += 1,
                PairClass::FalseNegative => counts.false_neg += 1,
            }
            assignments.push((video, label, class));
        }
    }
    Ok(ErrorTaxonomy {
        assignments,
        label_counts,
    })
}

// ---------------------------------------------------------------------------
// per-label report

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LabelReport {
    pub label: u32,
    pub counts: LabelCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub train_count: usize,
    /// Power-of-two frequency bucket: 0 for no samples, otherwise b such
    /// that 2^(b-1) <= train_count < 2^b.
    pub bucket: u32,
    /// True when every metric denominator was zero.
    pub degenerate: bool,
}

pub fn frequency_bucket(count: usize) -> u32 {
    if count == 0 {
        0
    } else {
        usize::BITS - count.leading_zeros()
    }
}

/// One row per label in 0..vocabulary, flagged when the label never
/// occurred as a positive or a prediction.
pub fn per_label_report(
    taxonomy: &ErrorTaxonomy,
    train_counts: &BTreeMap<u32, usize>,
    vocabulary_size: u32,
) -> Vec<LabelReport> {
    (0..vocabulary_size)
        .map(|label| {
            let counts = taxonomy
                .label_counts
                .get(&label)
                .copied()
                .unwrap_or_default();
            let p_den = counts.true_pos + counts.false_pos;
            let r_den = counts.true_pos + counts.false_neg;
            let precision = if p_den > 0 {
                counts.true_pos as f64 / p_den as f64
            } else {
                0.0
            };
            let recall = if r_den > 0 {
                counts.true_pos as f64 / r_den as f64
            } else {
                0.0
            };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            let train_count = train_counts.get(&label).copied().unwrap_or(0);
            LabelReport {
                label,
                counts,
                precision,
                recall,
                f1,
                train_count,
                bucket: frequency_bucket(train_count),
                degenerate: p_den == 0 && r_den == 0,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// groups

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupReport {
    pub group: String,
    /// Unweighted mean F1 over the group's active labels.
    pub mean_f1: f64,
    /// Number of active labels contributing to the mean.
    pub label_count: usize,
    /// Total positive training examples over all the group's labels.
    pub positive_count: usize,
}

/// Per-group mean F1 over active labels; unmapped labels fall into
/// "unknown"; groups with no active labels are omitted.
pub fn group_accuracy(reports: &[LabelReport], groups: &BTreeMap<u32, String>) -> Vec<GroupReport> {
    let mut agg: BTreeMap<&str, (f64, usize, usize)> = BTreeMap::new();
    for r in reports {
        let group = groups
            .get(&r.label)
            .map(String::as_str)
            .unwrap_or("unknown");
        let entry = agg.entry(group).or_insert((0.0, 0, 0));
        entry.2 += r.train_count;
        if r.counts.active() {
            entry.0 += r.f1;
            entry.1 += 1;
        }
    }
    agg.into_iter()
        .filter(|(_, (_, n, _))| *n > 0)
        .map(|(group, (sum, n, pos))| GroupReport {
            group: group.to_string(),
            mean_f1: sum / n as f64,
            label_count: n,
            positive_count: pos,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// plot tables

/// 2-D histogram of (precision, recall) over active labels; `bins` cells
/// per axis, upper edges inclusive in the last bin.
pub fn heatmap_grid(reports: &[LabelReport], bins: usize) -> Vec<Vec<usize>> {
    let mut grid = vec![vec![0usize; bins]; bins];
    for r in reports.iter().filter(|r| r.counts.active()) {
        let pi = ((r.precision * bins as f64) as usize).min(bins - 1);
        let ri = ((r.recall * bins as f64) as usize).min(bins - 1);
        grid[pi][ri] += 1;
    }
    grid
}

pub fn heatmap_tsv(grid: &[Vec<usize>]) -> String {
    use std::fmt::Write as _;
    let bins = grid.len();
    let mut out = String::from("precision_bin");
    for r in 0..bins {
        let _ = write!(out, "\trecall_{r}");
    }
    out.push('\n');
    for (p, row) in grid.iter().enumerate() {
        let _ = write!(out, "{p}");
        for v in row {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

/// Rows of (bucket, range, active label count, mean F1) per frequency
/// bucket that contains at least one label.
pub fn f1_by_count_tsv(reports: &[LabelReport]) -> String {
    use std::fmt::Write as _;
    let mut agg: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.counts.active()) {
        let e = agg.entry(r.bucket).or_insert((0.0, 0));
        e.0 += r.f1;
        e.1 += 1;
    }
    let mut out = String::from("bucket\tmin_count\tmax_count\tlabels\tmean_f1\n");
    for (bucket, (sum, n)) in agg {
        let (lo, hi) = if bucket == 0 {
            (0u64, 0u64)
        } else {
            (1u64 << (bucket - 1), (1u64 << bucket) - 1)
        };
        let _ = writeln!(out, "{bucket}\t{lo}\t{hi}\t{n}\t{}", sum / n as f64);
    }
    out
}

pub fn groups_tsv(groups: &[GroupReport]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("group\tmean_f1\tlabels\tpositive_examples\n");
    for g in groups {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            g.group, g.mean_f1, g.label_count, g.positive_count
        );
    }
    out
}

/// Positive-label training counts of a dataset (noisy labels).
pub fn train_counts(dataset: &crate::dataio::Dataset) -> BTreeMap<u32, usize> {
    let mut counts = BTreeMap::new();
    for r in &dataset.records {
        for &l in &r.noisy_labels {
            *counts.entry(l).or_insert(0) += 1;
        }
    }
    counts
}
