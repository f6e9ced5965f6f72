//! Frame-sequence condensation: per-dimension statistics, per-video
//! centering, scene segmentation by cosine distance, a global k-means
//! centroid vocabulary, unique-centroid subsampling, and pad/truncate.

mod kmeans;


pub use kmeans::{kmeans_fit, nearest_centroids, nearest_centroids_seq, CentroidVocabulary};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Per-dimension summary statistics of a frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub median: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mode: Vec<f64>,
    pub length: usize,
}

fn check_frames(frames: &Tensor) -> Result<(usize, usize)> {
    if frames.rank() != 2 {
        return Err(Error::input(format!(
            "expected a T x D frame matrix, got shape {:?}",
            frames.shape()
        )));
    }
    Ok((frames.shape()[0], frames.shape()[1]))
}

/// Population statistics per dimension. The median is the lower middle
/// element for even T. The mode counts values quantized to the nearest
/// 1/255 step (ties toward the smaller bin) and reports the smallest
/// original value in the winning bin, so a constant shift of the input
/// shifts the mode exactly.
pub fn frame_statistics(frames: &Tensor) -> Result<FrameStats> {
    let (t, d) = check_frames(frames)?;
    let mut stats = FrameStats {
        mean: vec![0.0; d],
        std: vec![0.0; d],
        median: vec![0.0; d],
        min: vec![0.0; d],
        max: vec![0.0; d],
        mode: vec![0.0; d],
        length: t,
    };
    let mut column = vec![0.0; t];
    for dim in 0..d {
        for (row, c) in column.iter_mut().enumerate() {
            *c = frames.get2(row, dim);
        }
        let mean = column.iter().sum::<f64>() / t as f64;
        let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        stats.mean[dim] = mean;
        stats.std[dim] = var.sqrt();

        let mut sorted = column.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite frames"));
        stats.min[dim] = sorted[0];
        stats.max[dim] = sorted[t - 1];
        stats.median[dim] = sorted[(t - 1) / 2];

        // Quantized mode: bin index -> (count, smallest original value).
        let mut bins: std::collections::BTreeMap<i64, (usize, f64)> =
            std::collections::BTreeMap::new();
        for &v in &sorted {
            let bin = (v * 255.0).round() as i64;
            let entry = bins.entry(bin).or_insert((0, v));
            entry.0 += 1;
            if v < entry.1 {
                entry.1 = v;
            }
        }
        let mut best_bin = i64::MAX;
        let mut best_count = 0usize;
        for (&bin, &(count, _)) in &bins {
            if count > best_count || (count == best_count && bin < best_bin) {
                best_count = count;
                best_bin = bin;
            }
        }
        stats.mode[dim] = bins[&best_bin].1;
    }
    Ok(stats)
}

/// Concatenated statistics vector: mean, std, median, min, max, mode per
/// dimension plus the frame count, i.e. 6 D + 1 values.
pub fn frame_stat_features(frames: &Tensor) -> Result<Vec<f64>> {
    let stats = frame_statistics(frames)?;
    let mut out = Vec::with_capacity(6 * stats.mean.len() + 1);
    out.extend_from_slice(&stats.mean);
    out.extend_from_slice(&stats.std);
    out.extend_from_slice(&stats.median);
    out.extend_from_slice(&stats.min);
    out.extend_from_slice(&stats.max);
    out.extend_from_slice(&stats.mode);
    out.push(stats.length as f64);
    Ok(out)
}

/// Subtract the per-video mean frame from every frame.
pub fn center_frames(frames: &Tensor) -> Result<Tensor> {
    let (t, d) = check_frames(frames)?;
    let mut mean = vec![0.0; d];
    for row in 0..t {
        for dim in 0..d {
            mean[dim] += frames.get2(row, dim);
        }
    }
    for m in mean.iter_mut() {
        *m /= t as f64;
    }
    let mut out = frames.clone();
    for row in 0..t {
        for dim in 0..d {
            let v = out.get2(row, dim) - mean[dim];
            out.set2(row, dim, v);
        }
    }
    Ok(out)
}

/// Scene starts: frame indices where the cosine distance to the previous
/// frame exceeds the threshold. Always contains 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSegmentation {
    pub boundaries: Vec<usize>,
    pub threshold: f64,
}

impl SceneSegmentation {
    pub fn scene_count(&self) -> usize {
        self.boundaries.len()
    }

    /// (start, end) half-open ranges per scene.
    pub fn ranges(&self, total_frames: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.boundaries.len());
        for (i, &start) in self.boundaries.iter().enumerate() {
            let end = self.boundaries.get(i + 1).copied().unwrap_or(total_frames);
            out.push((start, end));
        }
        out
    }
}

/// Cosine distance `1 - a.b / (|a||b|)`; zero-norm frames count as distance 0.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Threshold the cosine distances between neighbouring frames.
pub fn segment_scenes(frames: &Tensor, tau: f64) -> Result<SceneSegmentation> {
    let (t, d) = check_frames(frames)?;
    if !(tau > 0.0 && tau <= 2.0) {
        return Err(Error::input(format!("tau {tau} outside (0, 2]")));
    }
    let mut boundaries = vec![0usize];
    for frame in 1..t {
        let prev = &frames.data()[(frame - 1) * d..frame * d];
        let cur = &frames.data()[frame * d..(frame + 1) * d];
        if cosine_distance(prev, cur) > tau {
            boundaries.push(frame);
        }
    }
    Ok(SceneSegmentation {
        boundaries,
        threshold: tau,
    })
}

/// Which frame stands in for a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneRepresentative {
    /// Per-scene mean vector (robust to within-scene noise).
    Mean,
    /// First frame of the scene.
    First,
}

/// One representative frame per scene, in scene order.
pub fn scene_representatives(
    frames: &Tensor,
    segmentation: &SceneSegmentation,
    representative: SceneRepresentative,
) -> Result<Tensor> {
    let (t, d) = check_frames(frames)?;
    let ranges = segmentation.ranges(t);
    let mut data = Vec::with_capacity(ranges.len() * d);
    for (start, end) in ranges {
        if start >= t || end > t || start >= end {
            return Err(Error::input(format!(
                "segmentation range {start}..{end} invalid for {t} frames"
            )));
        }
        match representative {
            SceneRepresentative::First => {
                data.extend_from_slice(&frames.data()[start * d..(start + 1) * d]);
            }
            SceneRepresentative::Mean => {
                let mut mean = vec![0.0; d];
                for row in start..end {
                    for dim in 0..d {
                        mean[dim] += frames.get2(row, dim);
                    }
                }
                let len = (end - start) as f64;
                for m in mean.iter_mut() {
                    *m /= len;
                }
                data.extend_from_slice(&mean);
            }
        }
    }
    Tensor::new(vec![segmentation.scene_count(), d], data)
}

/// Keep the first frame mapped to each distinct nearest centroid, in order
/// of first occurrence. Ties in the distance go to the lower centroid index.
pub fn unique_centroid_subsample(
    frames: &Tensor,
    vocabulary: &CentroidVocabulary,
) -> Result<Tensor> {
    let (t, d) = check_frames(frames)?;
    if d != vocabulary.centroids.last_dim() {
        return Err(Error::input(format!(
            "frame dim {d} does not match centroid dim {}",
            vocabulary.centroids.last_dim()
        )));
    }
    let assignments = nearest_centroids(frames, &vocabulary.centroids);
    let mut seen = std::collections::BTreeSet::new();
    let mut rows = Vec::new();
    for (row, (centroid, _)) in assignments.iter().enumerate() {
        if seen.insert(*centroid) {
            rows.push(row);
        }
    }
    let mut data = Vec::with_capacity(rows.len() * d);
    for row in rows {
        data.extend_from_slice(&frames.data()[row * d..(row + 1) * d]);
    }
    let _ = t;
    Tensor::new(vec![seen.len(), d], data)
}

/// Copy the first `min(T, t_max)` rows into a `t_max` x D matrix, zero-pad
/// the rest, and report the valid length.
pub fn pad_truncate(frames: &Tensor, t_max: usize) -> Result<(Tensor, usize)> {
    let (t, d) = check_frames(frames)?;
    if t_max == 0 {
        return Err(Error::input("t_max must be at least 1"));
    }
    let valid = t.min(t_max);
    let mut out = Tensor::zeros(&[t_max, d]);
    out.data_mut()[..valid * d].copy_from_slice(&frames.data()[..valid * d]);
    Ok((out, valid))
}
