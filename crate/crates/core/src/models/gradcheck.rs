//! The full-architecture gradient suite behind the `gradcheck` command:
//! BCE loss through every architecture on a 2-sample batch (dropout 0,
//! batch-norm in eval mode) against the central-difference oracle.

use crate::diffcore::{gradient_check, Mode, NamedTensors, Tensor};
use crate::error::Result;
use crate::rng::{derive_seed, Rng};

use super::config::{
    FrameMixConfig, Modality, ModelConfig, ResNetLikeConfig, StackHeadConfig, VladBowConfig,
};
use super::zoo::{LossSpec, Model};

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckEntry {
    pub architecture: String,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub params_checked: usize,
}

fn small_resnet(modality: Modality, inner: usize) -> ModelConfig {
    ModelConfig::ResNetLike(ResNetLikeConfig {
        inner_size: inner,
        av_id_block_num: 1,
        concat_id_block_num: 1,
        dropout: 0.0,
        modality,
        vocabulary_size: 8,
        d_v: 6,
        d_a: 3,
        frame_stat_features: false,
    })
}

fn head() -> ResNetLikeConfig {
    ResNetLikeConfig {
        inner_size: 8,
        av_id_block_num: 0,
        concat_id_block_num: 1,
        dropout: 0.0,
        modality: Modality::Both,
        vocabulary_size: 8,
        d_v: 1,
        d_a: 1,
        frame_stat_features: false,
    }
}

fn suite_configs() -> Vec<(&'static str, ModelConfig)> {
    vec![
        ("resnetlike_both", small_resnet(Modality::Both, 8)),
        ("resnetlike_video", small_resnet(Modality::VideoOnly, 8)),
        ("resnetlike_audio", small_resnet(Modality::AudioOnly, 8)),
        ("resnetlike_bottleneck", small_resnet(Modality::Both, 4)),
        (
            "vladbow",
            ModelConfig::VladBow(VladBowConfig {
                clusters: 4,
                input_dim: 5,
                initial_power: 1.3,
                head: head(),
            }),
        ),
        (
            "framemix",
            ModelConfig::FrameMix(FrameMixConfig {
                num_combinations: 2,
                t_max: 4,
                input_dim: 5,
                head: head(),
            }),
        ),
        (
            "stackhead",
            ModelConfig::StackHead(StackHeadConfig {
                input_dim: 6,
                vocabulary_size: 8,
            }),
        ),
    ]
}

fn rand2(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.next_gauss()).collect()).expect("rand shape")
}

/// Move every parameter slightly off its structured initial value
/// (zero biases, unit gammas). Fresh initialization is a measure-zero
/// special point: a fully dead hidden layer plus a zero bias parks a
/// relu exactly on its kink, where the loss is one-sided and no
/// two-sided difference can match the subgradient. A generic nearby
/// point has none of those coincidences.
pub fn jitter_params(model: &mut Model, rng: &mut Rng, scale: f64) {
    for (_, tensor) in model.graph.params_mut().iter_mut() {
        for v in tensor.data_mut() {
            *v += (2.0 * rng.next_f64() - 1.0) * scale;
        }
    }
}

/// Run the suite; one entry per architecture.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut out = Vec::new();
    for (i, (name, cfg)) in suite_configs().into_iter().enumerate() {
        let mut rng = Rng::new(derive_seed(seed, &[0x47_52, i as u64]));
        let mut model = Model::init(&cfg, derive_seed(seed, &[0x47_53, i as u64]))?;
        jitter_params(&mut model, &mut rng, 0.13);
        let mut graph = model.training_graph(&LossSpec::default())?;
        graph.set_mode(Mode::Eval);

        let vocab = cfg.vocabulary_size();
        let mut target = vec![0.0; 2 * vocab];
        for (j, t) in target.iter_mut().enumerate() {
            if j % 3 == 0 {
                *t = 1.0;
            }
        }
        let mut inputs = NamedTensors::new();
        inputs.insert("target".into(), Tensor::new(vec![2, vocab], target)?);
        match &cfg {
            ModelConfig::ResNetLike(c) => {
                if c.modality != Modality::AudioOnly {
                    inputs.insert("video".into(), rand2(&mut rng, 2, c.video_input_dim()));
                }
                if c.modality != Modality::VideoOnly {
                    inputs.insert("audio".into(), rand2(&mut rng, 2, c.d_a));
                }
            }
            ModelConfig::VladBow(c) => {
                let t = 3;
                inputs.insert(
                    "frames".into(),
                    Tensor::new(
                        vec![2, t, c.input_dim],
                        (0..2 * t * c.input_dim).map(|_| rng.next_gauss()).collect(),
                    )?,
                );
                inputs.insert("mask".into(), Tensor::full(&[2, t, 1], 1.0));
            }
            ModelConfig::FrameMix(c) => {
                inputs.insert(
                    "frames".into(),
                    Tensor::new(
                        vec![2, c.t_max, c.input_dim],
                        (0..2 * c.t_max * c.input_dim)
                            .map(|_| rng.next_gauss())
                            .collect(),
                    )?,
                );
            }
            ModelConfig::StackHead(c) => {
                inputs.insert("features".into(), rand2(&mut rng, 2, c.input_dim));
            }
        }
        let loss = graph.output_node("loss")?;
        let report = gradient_check(&graph, &inputs, loss, 1e-5)?;
        out.push(GradCheckEntry {
            architecture: name.to_string(),
            max_rel_error: report.max_rel_error,
            worst_param: report.worst_param,
            params_checked: graph.num_params(),
        });
    }
    Ok(out)
}
