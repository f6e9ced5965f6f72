//! Dataset model, portable binary feature format, synthetic noisy-label
//! generator, fold splitting, and prediction file I/O.

mod format;
mod synthetic;
mod textio;


pub use format::{load_dataset, write_dataset};
pub use synthetic::{generate_synthetic, FrameGenConfig, GenConfig, SyntheticDataset};
pub use textio::{
    read_folds, read_group_map, read_predictions, read_soft_labels, write_folds, write_predictions,
    write_soft_labels,
};

use std::collections::{BTreeMap, BTreeSet};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::lossmetrics::GroundTruth;
use crate::rng::Rng;

/// One example: video/audio feature vectors, an optional frame sequence,
/// the observed (noisy) label set, and — for synthetic data — the clean
/// label set the noise was applied to.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub video_feat: Vec<f64>,
    pub audio_feat: Vec<f64>,
    /// T x (D_v + D_a); leading D_v columns are the video modality.
    pub frames: Option<Tensor>,
    pub noisy_labels: BTreeSet<u32>,
    pub clean_labels: Option<BTreeSet<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary_size: u32,
    pub d_v: usize,
    pub d_a: usize,
    pub records: Vec<VideoRecord>,
    /// Optional label -> group ("vertical") map.
    pub groups: Option<BTreeMap<u32, String>>,
}

impl Dataset {
    /// Check the structural invariants: unique ids, uniform dims, labels
    /// within the vocabulary, finite features, uniform frame presence.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let frames_present = self.records.first().map(|r| r.frames.is_some());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::input(format!("duplicate record id '{}'", r.id)));
            }
            if r.video_feat.len() != self.d_v {
                return Err(Error::input(format!(
                    "record '{}': video dim {} != {}",
                    r.id,
                    r.video_feat.len(),
                    self.d_v
                )));
            }
            if r.audio_feat.len() != self.d_a {
                return Err(Error::input(format!(
                    "record '{}': audio dim {} != {}",
                    r.id,
                    r.audio_feat.len(),
                    self.d_a
                )));
            }
            if r.frames.is_some() != frames_present.unwrap_or(false) {
                return Err(Error::input(format!(
                    "record '{}': frame presence differs from the rest of the dataset",
                    r.id
                )));
            }
            if let Some(f) = &r.frames {
                if f.rank() != 2 || f.last_dim() != self.d_v + self.d_a {
                    return Err(Error::input(format!(
                        "record '{}': frames must be T x {}, got {:?}",
                        r.id,
                        self.d_v + self.d_a,
                        f.shape()
                    )));
                }
                if !f.all_finite() {
                    return Err(Error::input(format!(
                        "record '{}': non-finite frames",
                        r.id
                    )));
                }
            }
            if r.video_feat
                .iter()
                .chain(&r.audio_feat)
                .any(|v| !v.is_finite())
            {
                return Err(Error::input(format!(
                    "record '{}': non-finite features",
                    r.id
                )));
            }
            for set in [Some(&r.noisy_labels), r.clean_labels.as_ref()]
                .into_iter()
                .flatten()
            {
                if let Some(&l) = set.iter().next_back() {
                    if l >= self.vocabulary_size {
                        return Err(Error::input(format!(
                            "record '{}': label {l} outside vocabulary {}",
                            r.id, self.vocabulary_size
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn has_frames(&self) -> bool {
        self.records
            .first()
            .map(|r| r.frames.is_some())
            .unwrap_or(false)
    }

    /// Ground truth built from noisy labels (videos with none are skipped).
    pub fn noisy_truth(&self) -> GroundTruth {
        self.records
            .iter()
            .filter(|r| !r.noisy_labels.is_empty())
            .map(|r| (r.id.clone(), r.noisy_labels.clone()))
            .collect()
    }

    /// Ground truth built from clean labels where present.
    pub fn clean_truth(&self) -> GroundTruth {
        self.records
            .iter()
            .filter_map(|r| {
                r.clean_labels
                    .as_ref()
                    .filter(|s| !s.is_empty())
                    .map(|s| (r.id.clone(), s.clone()))
            })
            .collect()
    }
}

/// Synthetic label corruption: each true positive is dropped independently
/// with probability `fn_rate`; Poisson(`fp_rate`) spurious labels are drawn
/// uniformly from the non-positives. `seed` feeds the corruption stream
/// only, so the same underlying data can be re-noised.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseConfig {
    pub fn_rate: f64,
    pub fp_rate: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fn_rate) {
            return Err(Error::input(format!(
                "fn_rate {} outside [0,1]",
                self.fn_rate
            )));
        }
        if self.fp_rate < 0.0 || !self.fp_rate.is_finite() {
            return Err(Error::input(format!(
                "fp_rate {} must be >= 0",
                self.fp_rate
            )));
        }
        Ok(())
    }
}

/// Deterministic partition of record ids into k disjoint folds whose sizes
/// differ by at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Record indices per fold, in dataset record order.
    pub fn fold_indices(&self, dataset: &Dataset) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, r) in dataset.records.iter().enumerate() {
            let f = self.fold_of(&r.id).ok_or_else(|| {
                Error::input(format!("record '{}' missing from fold split", r.id))
            })?;
            out[f].push(i);
        }
        Ok(out)
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.assignment.len() != dataset.records.len() {
            return Err(Error::input(format!(
                "fold split covers {} ids, dataset has {} records",
                self.assignment.len(),
                dataset.records.len()
            )));
        }
        let mut sizes = vec![0usize; self.k];
        for r in &dataset.records {
            match self.fold_of(&r.id) {
                Some(f) if f < self.k => sizes[f] += 1,
                Some(f) => {
                    return Err(Error::input(format!("fold index {f} out of range")));
                }
                None => {
                    return Err(Error::input(format!("record '{}' not assigned", r.id)));
                }
            }
        }
        let (min, max) = (
            sizes.iter().copied().min().unwrap_or(0),
            sizes.iter().copied().max().unwrap_or(0),
        );
        if max - min > 1 {
            return Err(Error::input(format!("fold sizes unbalanced: {sizes:?}")));
        }
        Ok(())
    }
}

/// Seeded shuffle then round-robin assignment.
pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::input(format!("need at least 2 folds, got {k}")));
    }
    if dataset.records.len() < k {
        return Err(Error::input(format!(
            "cannot split {} records into {k} folds",
            dataset.records.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.records.len()).collect();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut order);
    let assignment = order
        .iter()
        .enumerate()
        .map(|(pos, &rec)| (dataset.records[rec].id.clone(), pos % k))
        .collect();
    Ok(FoldSplit { k, assignment })
}
