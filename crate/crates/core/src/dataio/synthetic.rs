//! Synthetic noisy multi-label data with known clean ground truth.
//!
//! Each label owns a unit prototype vector per modality. A video samples a
//! few clean labels, its video feature is the L2-normalized prototype sum
//! plus Gaussian noise, and its audio feature comes from an independent
//! prototype table scaled by an informativeness factor. Frame sequences
//! are piecewise-constant scene centers with planted, exactly-controlled
//! adjacent-scene cosine separation. Observed labels are the clean set
//! corrupted per [`NoiseConfig`].

use std::collections::BTreeSet;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

use super::{Dataset, NoiseConfig, VideoRecord};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrameGenConfig {
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_scenes: usize,
    pub max_scenes: usize,
    /// Cosine distance planted between adjacent scene centers.
    pub scene_cos_distance: f64,
    /// Within-scene per-frame Gaussian noise.
    pub frame_noise: f64,
}

impl Default for FrameGenConfig {
    fn default() -> Self {
        FrameGenConfig {
            min_frames: 12,
            max_frames: 40,
            min_scenes: 2,
            max_scenes: 5,
            scene_cos_distance: 0.45,
            frame_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenConfig {
    pub num_videos: usize,
    pub vocabulary_size: u32,
    pub d_v: usize,
    pub d_a: usize,
    /// Clean labels per video are drawn uniformly from 1..=max.
    pub max_labels_per_video: usize,
    /// Gaussian noise added to the video feature.
    pub feature_noise: f64,
    /// Scale of the audio signal relative to its noise; 0 makes audio useless.
    pub audio_informativeness: f64,
    pub audio_noise: f64,
    pub frames: Option<FrameGenConfig>,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocabulary_size < 2 {
            return Err(Error::input("vocabulary_size must be at least 2"));
        }
        if self.num_videos == 0 {
            return Err(Error::input("num_videos must be at least 1"));
        }
        if self.d_v == 0 || self.d_a == 0 {
            return Err(Error::input("feature dims must be at least 1"));
        }
        if self.max_labels_per_video == 0
            || self.max_labels_per_video > self.vocabulary_size as usize
        {
            return Err(Error::input(format!(
                "max_labels_per_video {} must be in 1..={}",
                self.max_labels_per_video, self.vocabulary_size
            )));
        }
        if let Some(f) = &self.frames {
            if f.min_frames == 0 || f.min_frames > f.max_frames {
                return Err(Error::input("invalid frame count range"));
            }
            if f.min_scenes == 0 || f.min_scenes > f.max_scenes {
                return Err(Error::input("invalid scene count range"));
            }
            if !(0.0..=2.0).contains(&f.scene_cos_distance) {
                return Err(Error::input("scene_cos_distance must be in [0,2]"));
            }
        }
        Ok(())
    }
}

/// Generated dataset plus generator-side metadata that the binary format
/// does not carry (the planted scene count per record).
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub planted_scenes: Vec<Option<usize>>,
}

fn unit_gauss_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.next_gauss()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn l2_normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    v
}

/// Quantize to f32 storage precision so file round trips are bit-exact.
fn quantize(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = *x as f32 as f64;
    }
}

/// Unit vector at planted cosine distance `dist` from unit vector `u`:
/// `v = (1 - dist) u + sin(theta) w` with `w` a unit vector orthogonal
/// to `u`, so `cos(u, v) = 1 - dist` exactly (up to rounding).
fn rotate_by_cos_distance(rng: &mut Rng, u: &[f64], dist: f64) -> Vec<f64> {
    let cos_theta = 1.0 - dist;
    let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
    loop {
        let mut w = unit_gauss_vec(rng, u.len());
        let dot: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
        for (wi, ui) in w.iter_mut().zip(u) {
            *wi -= dot * ui;
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        return w
            .iter()
            .zip(u)
            .map(|(wi, ui)| cos_theta * ui + sin_theta * wi / norm)
            .collect();
    }
}

fn sample_distinct_labels(rng: &mut Rng, count: usize, vocab: u32) -> BTreeSet<u32> {
    let mut set = BTreeSet::new();
    while set.len() < count {
        set.insert(rng.next_below(vocab as u64) as u32);
    }
    set
}

/// Apply the noise model to one clean label set.
pub(crate) fn apply_noise(
    clean: &BTreeSet<u32>,
    vocab: u32,
    noise: &NoiseConfig,
    rng: &mut Rng,
) -> BTreeSet<u32> {
    let mut noisy = BTreeSet::new();
    for &l in clean {
        if rng.next_f64() >= noise.fn_rate {
            noisy.insert(l);
        }
    }
    let spurious = rng.next_poisson(noise.fp_rate) as usize;
    let available = vocab as usize - clean.len();
    let mut added = 0;
    while added < spurious.min(available) {
        let l = rng.next_below(vocab as u64) as u32;
        if !clean.contains(&l) && noisy.insert(l) {
            added += 1;
        }
    }
    noisy
}

pub fn generate_synthetic(
    gen: &GenConfig,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<SyntheticDataset> {
    gen.validate()?;
    noise.validate()?;

    let vocab = gen.vocabulary_size;
    let mut proto_rng = Rng::new(derive_seed(seed, &[0]));
    let video_protos: Vec<Vec<f64>> = (0..vocab)
        .map(|_| unit_gauss_vec(&mut proto_rng, gen.d_v))
        .collect();
    let audio_protos: Vec<Vec<f64>> = (0..vocab)
        .map(|_| unit_gauss_vec(&mut proto_rng, gen.d_a))
        .collect();

    let id_width = gen.num_videos.to_string().len().max(4);
    let mut records = Vec::with_capacity(gen.num_videos);
    let mut planted_scenes = Vec::with_capacity(gen.num_videos);

    for v in 0..gen.num_videos {
        let mut rng = Rng::new(derive_seed(seed, &[1, v as u64]));
        let n_labels = 1 + rng.next_below(gen.max_labels_per_video as u64) as usize;
        let clean = sample_distinct_labels(&mut rng, n_labels, vocab);

        let mut video_base = vec![0.0; gen.d_v];
        let mut audio_base = vec![0.0; gen.d_a];
        for &l in &clean {
            for (acc, p) in video_base.iter_mut().zip(&video_protos[l as usize]) {
                *acc += p;
            }
            for (acc, p) in audio_base.iter_mut().zip(&audio_protos[l as usize]) {
                *acc += p;
            }
        }
        let video_base = l2_normalized(video_base);
        let audio_base = l2_normalized(audio_base);

        let mut video_feat: Vec<f64> = video_base
            .iter()
            .map(|&b| b + gen.feature_noise * rng.next_gauss())
            .collect();
        quantize(&mut video_feat);

        let mut audio_feat: Vec<f64> = audio_base
            .iter()
            .map(|&b| gen.audio_informativeness * b + gen.audio_noise * rng.next_gauss())
            .collect();
        quantize(&mut audio_feat);

        let (frames, scenes) = match &gen.frames {
            Some(fc) => {
                let (tensor, s) = generate_frames(&mut rng, fc, &video_base, &audio_base, gen)?;
                (Some(tensor), Some(s))
            }
            None => (None, None),
        };

        let mut noise_rng = Rng::new(derive_seed(noise.seed, &[2, v as u64]));
        let noisy_labels = apply_noise(&clean, vocab, noise, &mut noise_rng);

        records.push(VideoRecord {
            id: format!("v{v:0id_width$}"),
            video_feat,
            audio_feat,
            frames,
            noisy_labels,
            clean_labels: Some(clean),
        });
        planted_scenes.push(scenes);
    }

    let dataset = Dataset {
        vocabulary_size: vocab,
        d_v: gen.d_v,
        d_a: gen.d_a,
        records,
        groups: None,
    };
    dataset.validate()?;
    Ok(SyntheticDataset {
        dataset,
        planted_scenes,
    })
}

fn generate_frames(
    rng: &mut Rng,
    fc: &FrameGenConfig,
    video_base: &[f64],
    audio_base: &[f64],
    gen: &GenConfig,
) -> Result<(Tensor, usize)> {
    let dim = gen.d_v + gen.d_a;
    let t = fc.min_frames + rng.next_below((fc.max_frames - fc.min_frames + 1) as u64) as usize;
    let max_scenes = fc.max_scenes.min(t);
    let min_scenes = fc.min_scenes.min(max_scenes);
    let scenes = min_scenes + rng.next_below((max_scenes - min_scenes + 1) as u64) as usize;

    // Scene boundaries: `scenes - 1` distinct cut points in 1..t.
    let mut cuts: Vec<usize> = (1..t).collect();
    rng.shuffle(&mut cuts);
    let mut cuts: Vec<usize> = cuts.into_iter().take(scenes - 1).collect();
    cuts.sort_unstable();

    // First scene center follows the label signal of the video.
    let mut combined: Vec<f64> = video_base
        .iter()
        .chain(audio_base.iter())
        .copied()
        .collect();
    for c in combined.iter_mut() {
        *c += 0.05 * rng.next_gauss();
    }
    let mut center = l2_normalized(combined);

    let mut centers = vec![center.clone()];
    for _ in 1..scenes {
        center = rotate_by_cos_distance(rng, &center, fc.scene_cos_distance);
        centers.push(center.clone());
    }

    let mut data = Vec::with_capacity(t * dim);
    let mut scene_idx = 0usize;
    for frame in 0..t {
        while scene_idx < cuts.len() && frame >= cuts[scene_idx] {
            scene_idx += 1;
        }
        for d in 0..dim {
            data.push(centers[scene_idx][d] + fc.frame_noise * rng.next_gauss());
        }
    }
    quantize(&mut data);
    Ok((Tensor::new(vec![t, dim], data)?, scenes))
}
