//! Per-record model inputs and whole-dataset prediction.
//!
//! Featurization is precomputed once per (dataset, architecture) pair;
//! batching then just stacks rows. Eval-mode predictions are per-record
//! independent (running batch-norm statistics, no dropout), so dataset
//! scans can chunk freely and in parallel without changing a single bit.

use crate::dataio::Dataset;
use crate::diffcore::{NamedTensors, Tensor};
use crate::error::{Error, Result};
use crate::framefeat;
use crate::par;

use super::config::{Modality, ModelConfig};
use super::zoo::Model;

/// Immutable per-record features for one architecture.
#[derive(Debug, Clone)]
pub enum RecordFeatures {
    /// ResNetLike: video row (optionally with frame statistics) + audio row.
    VideoAudio { video: Vec<f64>, audio: Vec<f64> },
    /// VladBow: raw frames (variable T).
    Frames { frames: Tensor },
    /// FrameMix: frames padded/truncated to t_max.
    PaddedFrames { frames: Tensor },
}

/// Precompute features for every record.
pub fn featurize(config: &ModelConfig, dataset: &Dataset) -> Result<Vec<RecordFeatures>> {
    if config.needs_frames() && !dataset.has_frames() {
        return Err(Error::input(format!(
            "architecture '{}' needs frame sequences, dataset has none",
            config.arch_tag()
        )));
    }
    match config {
        ModelConfig::ResNetLike(c) => par::try_map_indices(dataset.records.len(), |i| {
            let r = &dataset.records[i];
            let mut video = r.video_feat.clone();
            if c.frame_stat_features {
                let frames = r.frames.as_ref().expect("frames checked above");
                video.extend(framefeat::frame_stat_features(frames)?);
            }
            if video.len() != c.video_input_dim() {
                return Err(Error::input(format!(
                    "record '{}': video input width {} does not match config {}",
                    r.id,
                    video.len(),
                    c.video_input_dim()
                )));
            }
            Ok(RecordFeatures::VideoAudio {
                video,
                audio: r.audio_feat.clone(),
            })
        }),
        ModelConfig::VladBow(c) => par::try_map_indices(dataset.records.len(), |i| {
            let r = &dataset.records[i];
            let frames = r.frames.as_ref().expect("frames checked above");
            if frames.last_dim() != c.input_dim {
                return Err(Error::input(format!(
                    "record '{}': frame dim {} does not match config {}",
                    r.id,
                    frames.last_dim(),
                    c.input_dim
                )));
            }
            Ok(RecordFeatures::Frames {
                frames: frames.clone(),
            })
        }),
        ModelConfig::FrameMix(c) => par::try_map_indices(dataset.records.len(), |i| {
            let r = &dataset.records[i];
            let frames = r.frames.as_ref().expect("frames checked above");
            let (padded, _) = framefeat::pad_truncate(frames, c.t_max)?;
            Ok(RecordFeatures::PaddedFrames { frames: padded })
        }),
        ModelConfig::StackHead(_) => Err(Error::input(
            "stack heads consume precomputed penultimate features, not records",
        )),
    }
}

/// Stack per-record features into the named input tensors of one batch.
pub fn batch_inputs(
    config: &ModelConfig,
    features: &[RecordFeatures],
    indices: &[usize],
) -> Result<NamedTensors> {
    if indices.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let mut inputs = NamedTensors::new();
    match config {
        ModelConfig::ResNetLike(c) => {
            let b = indices.len();
            let dv = c.video_input_dim();
            let mut video = Vec::with_capacity(b * dv);
            let mut audio = Vec::with_capacity(b * c.d_a);
            for &i in indices {
                match &features[i] {
                    RecordFeatures::VideoAudio { video: v, audio: a } => {
                        video.extend_from_slice(v);
                        audio.extend_from_slice(a);
                    }
                    _ => return Err(Error::input("feature kind mismatch")),
                }
            }
            if c.modality != Modality::AudioOnly {
                inputs.insert("video".into(), Tensor::new(vec![b, dv], video)?);
            }
            if c.modality != Modality::VideoOnly {
                inputs.insert("audio".into(), Tensor::new(vec![b, c.d_a], audio)?);
            }
        }
        ModelConfig::VladBow(c) => {
            let b = indices.len();
            let d = c.input_dim;
            let mut t_max = 1usize;
            for &i in indices {
                match &features[i] {
                    RecordFeatures::Frames { frames } => t_max = t_max.max(frames.shape()[0]),
                    _ => return Err(Error::input("feature kind mismatch")),
                }
            }
            let mut data = vec![0.0; b * t_max * d];
            let mut mask = vec![0.0; b * t_max];
            for (row, &i) in indices.iter().enumerate() {
                if let RecordFeatures::Frames { frames } = &features[i] {
                    let t = frames.shape()[0];
                    data[row * t_max * d..row * t_max * d + t * d].copy_from_slice(frames.data());
                    for m in mask.iter_mut().skip(row * t_max).take(t) {
                        *m = 1.0;
                    }
                }
            }
            inputs.insert("frames".into(), Tensor::new(vec![b, t_max, d], data)?);
            inputs.insert("mask".into(), Tensor::new(vec![b, t_max, 1], mask)?);
        }
        ModelConfig::FrameMix(c) => {
            let b = indices.len();
            let d = c.input_dim;
            let mut data = Vec::with_capacity(b * c.t_max * d);
            for &i in indices {
                match &features[i] {
                    RecordFeatures::PaddedFrames { frames } => {
                        data.extend_from_slice(frames.data())
                    }
                    _ => return Err(Error::input("feature kind mismatch")),
                }
            }
            inputs.insert("frames".into(), Tensor::new(vec![b, c.t_max, d], data)?);
        }
        ModelConfig::StackHead(_) => {
            return Err(Error::input("stack heads take a features tensor directly"));
        }
    }
    Ok(inputs)
}

/// Probabilities and penultimate activations for a set of records,
/// chunked and (with the `parallel` feature) evaluated concurrently.
pub fn predict_records(
    model: &Model,
    features: &[RecordFeatures],
    indices: &[usize],
) -> Result<PredictOutput> {
    const CHUNK: usize = 64;
    let chunks: Vec<&[usize]> = indices.chunks(CHUNK).collect();
    let results = par::try_map_indices(chunks.len(), |ci| -> Result<(Tensor, Tensor)> {
        let inputs = batch_inputs(&model.config, features, chunks[ci])?;
        let out = model.evaluate(&inputs)?;
        Ok((out.probs, out.penultimate))
    })?;
    let vocab = model.config.vocabulary_size();
    let penult_w = model.penultimate_width();
    let mut probs = Vec::with_capacity(indices.len());
    let mut penultimate = Vec::with_capacity(indices.len());
    for (p, h) in results {
        for row in p.data().chunks(vocab) {
            probs.push(row.to_vec());
        }
        for row in h.data().chunks(penult_w) {
            penultimate.push(row.to_vec());
        }
    }
    Ok(PredictOutput { probs, penultimate })
}

/// Sequential twin of [`predict_records`] (benches, equality tests).
pub fn predict_records_seq(
    model: &Model,
    features: &[RecordFeatures],
    indices: &[usize],
) -> Result<PredictOutput> {
    const CHUNK: usize = 64;
    let vocab = model.config.vocabulary_size();
    let penult_w = model.penultimate_width();
    let mut probs = Vec::with_capacity(indices.len());
    let mut penultimate = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(CHUNK) {
        let inputs = batch_inputs(&model.config, features, chunk)?;
        let out = model.evaluate(&inputs)?;
        for row in out.probs.data().chunks(vocab) {
            probs.push(row.to_vec());
        }
        for row in out.penultimate.data().chunks(penult_w) {
            penultimate.push(row.to_vec());
        }
    }
    Ok(PredictOutput { probs, penultimate })
}

#[derive(Debug, Clone)]
pub struct PredictOutput {
    pub probs: Vec<Vec<f64>>,
    pub penultimate: Vec<Vec<f64>>,
}
