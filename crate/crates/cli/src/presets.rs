//! The two shipped presets.
//!
//! `desk` targets minute-scale experiments on a workstation; `paperlike`
//! mirrors the full-scale layer shapes (D_v 1024, D_a 128, inner 2048,
//! 3862 classes) for shape fidelity, not for result fidelity.

use ldn_core::dataio::{FrameGenConfig, GenConfig};
use ldn_core::{Error, Result};

pub fn gen_config(preset: &str) -> Result<GenConfig> {
    match preset {
        "desk" => Ok(GenConfig {
            num_videos: 2000,
            vocabulary_size: 50,
            d_v: 64,
            d_a: 16,
            max_labels_per_video: 3,
            feature_noise: 0.08,
            audio_informativeness: 0.7,
            audio_noise: 0.12,
            frames: Some(FrameGenConfig {
                min_frames: 12,
                max_frames: 40,
                min_scenes: 2,
                max_scenes: 5,
                scene_cos_distance: 0.45,
                frame_noise: 0.03,
            }),
        }),
        "paperlike" => Ok(GenConfig {
            num_videos: 200,
            vocabulary_size: 3862,
            d_v: 1024,
            d_a: 128,
            max_labels_per_video: 5,
            feature_noise: 0.08,
            audio_informativeness: 0.7,
            audio_noise: 0.12,
            frames: None,
        }),
        other => Err(Error::input(format!("unknown preset '{other}'"))),
    }
}

/// Default model-config text per preset (dims come from the dataset).
pub fn model_config_text(preset: &str) -> Result<&'static str> {
    match preset {
        "desk" => Ok("arch = resnetlike\ninner_size = 64\ndropout = 0.3\n"),
        // Paper defaults: inner 2048, one identity block per stage, 0.5.
        "paperlike" => Ok("arch = resnetlike\n"),
        other => Err(Error::input(format!("unknown preset '{other}'"))),
    }
}
