//! Graph builders for the model zoo and the `Model` wrapper.
//!
//! Wiring of the residual trunk: per-modality stem (affine -> batch-norm
//! -> relu), `av_id_block_num` identity blocks per modality, concat,
//! projection (affine -> BN -> relu), `concat_id_block_num` identity
//! blocks, final affine -> sigmoid. An identity block is
//! affine -> BN -> relu -> dropout -> affine -> BN, added to its input,
//! then relu. The activation feeding the final affine is exposed as the
//! `penultimate` output.

use crate::diffcore::{ComputeGraph, GraphBuilder, Mode, NamedTensors, NodeId, PairScope, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::config::{Modality, ModelConfig, ResNetLikeConfig};

/// Scaled-uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
fn init_weight(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| (2.0 * rng.next_f64() - 1.0) * scale)
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("weight shape")
}

fn affine_layer(
    gb: &mut GraphBuilder,
    rng: &mut Rng,
    prefix: &str,
    x: NodeId,
    fan_in: usize,
    fan_out: usize,
) -> NodeId {
    let w = gb.param(&format!("{prefix}.w"), init_weight(rng, fan_in, fan_out));
    let b = gb.param(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    gb.affine(x, w, b)
}

fn stem(
    gb: &mut GraphBuilder,
    rng: &mut Rng,
    prefix: &str,
    x: NodeId,
    dim: usize,
    inner: usize,
) -> NodeId {
    let h = affine_layer(gb, rng, &format!("{prefix}.stem"), x, dim, inner);
    let h = gb.batch_norm(h, &format!("{prefix}.stem.bn"), inner);
    gb.relu(h)
}

fn identity_block(
    gb: &mut GraphBuilder,
    rng: &mut Rng,
    prefix: &str,
    x: NodeId,
    inner: usize,
    dropout: f64,
) -> NodeId {
    let h = affine_layer(gb, rng, &format!("{prefix}.fc1"), x, inner, inner);
    let h = gb.batch_norm(h, &format!("{prefix}.bn1"), inner);
    let h = gb.relu(h);
    let h = gb.dropout(h, dropout);
    let h = affine_layer(gb, rng, &format!("{prefix}.fc2"), h, inner, inner);
    let h = gb.batch_norm(h, &format!("{prefix}.bn2"), inner);
    let s = gb.add(x, h);
    gb.relu(s)
}

/// Trunk over one already-built feature node: stem, identity blocks, and
/// the classification layer. Returns (logits, penultimate).
fn trunk_single(
    gb: &mut GraphBuilder,
    rng: &mut Rng,
    prefix: &str,
    x: NodeId,
    input_dim: usize,
    inner: usize,
    blocks: usize,
    dropout: f64,
    vocab: usize,
) -> (NodeId, NodeId) {
    let mut h = stem(gb, rng, prefix, x, input_dim, inner);
    for i in 0..blocks {
        h = identity_block(gb, rng, &format!("{prefix}.block{i}"), h, inner, dropout);
    }
    let logits = affine_layer(gb, rng, &format!("{prefix}.out"), h, inner, vocab);
    (logits, h)
}

fn build_resnetlike(c: &ResNetLikeConfig, rng: &mut Rng) -> GraphBuilder {
    let mut gb = GraphBuilder::new();
    let inner = c.inner_size;

    let mut branches = Vec::new();
    if c.modality != Modality::AudioOnly {
        let video = gb.input("video", Some(c.video_input_dim()));
        let mut h = stem(&mut gb, rng, "v", video, c.video_input_dim(), inner);
        for i in 0..c.av_id_block_num {
            h = identity_block(&mut gb, rng, &format!("v.block{i}"), h, inner, c.dropout);
        }
        branches.push(h);
    }
    if c.modality != Modality::VideoOnly {
        let audio = gb.input("audio", Some(c.d_a));
        let mut h = stem(&mut gb, rng, "a", audio, c.d_a, inner);
        for i in 0..c.av_id_block_num {
            h = identity_block(&mut gb, rng, &format!("a.block{i}"), h, inner, c.dropout);
        }
        branches.push(h);
    }

    let (merged, merged_dim) = if branches.len() == 2 {
        (gb.concat(branches), 2 * inner)
    } else {
        (branches[0], inner)
    };
    let h = affine_layer(&mut gb, rng, "proj", merged, merged_dim, inner);
    let h = gb.batch_norm(h, "proj.bn", inner);
    let mut h = gb.relu(h);
    for i in 0..c.concat_id_block_num {
        h = identity_block(&mut gb, rng, &format!("c.block{i}"), h, inner, c.dropout);
    }
    let logits = affine_layer(&mut gb, rng, "out", h, inner, c.vocabulary_size);
    let probs = gb.sigmoid(logits);
    gb.output("penultimate", h);
    gb.output("logits", logits);
    gb.output("probs", probs);
    gb
}

fn build_vladbow(c: &super::config::VladBowConfig, rng: &mut Rng) -> GraphBuilder {
    let mut gb = GraphBuilder::new();
    // frames: [B, T, D], mask: [B, T, 1] with 1.0 on valid frames.
    let frames = gb.input("frames", Some(c.input_dim));
    let mask = gb.input("mask", Some(1));
    let proj = affine_layer(&mut gb, rng, "vlad", frames, c.input_dim, c.clusters);
    let act = gb.relu(proj);
    let p = gb.param("vlad.p", Tensor::scalar(c.initial_power));
    let powered = gb.power(act, p);
    let assign = gb.softmax_last(powered);
    let masked = gb.mul(assign, mask);
    let bow = gb.reduce_sum(masked, 1);
    gb.output("bow", bow);

    let head = &c.head;
    let (logits, penult) = trunk_single(
        &mut gb,
        rng,
        "head",
        bow,
        c.clusters,
        head.inner_size,
        head.concat_id_block_num,
        head.dropout,
        head.vocabulary_size,
    );
    let probs = gb.sigmoid(logits);
    gb.output("penultimate", penult);
    gb.output("logits", logits);
    gb.output("probs", probs);
    gb
}

fn build_framemix(c: &super::config::FrameMixConfig, rng: &mut Rng) -> GraphBuilder {
    let mut gb = GraphBuilder::new();
    // frames: [B, t_max, D], zero-padded upstream.
    let frames = gb.input("frames", Some(c.input_dim));
    let coeffs = gb.param(
        "mix.c",
        Tensor::full(&[c.num_combinations, c.t_max], 1.0 / c.t_max as f64),
    );
    let fused = gb.frame_combine(frames, coeffs);
    gb.output("fused", fused);
    let head = &c.head;
    let (logits, penult) = trunk_single(
        &mut gb,
        rng,
        "head",
        fused,
        c.num_combinations * c.input_dim,
        head.inner_size,
        head.concat_id_block_num,
        head.dropout,
        head.vocabulary_size,
    );
    let probs = gb.sigmoid(logits);
    gb.output("penultimate", penult);
    gb.output("logits", logits);
    gb.output("probs", probs);
    gb
}

fn build_stackhead(c: &super::config::StackHeadConfig, rng: &mut Rng) -> GraphBuilder {
    let mut gb = GraphBuilder::new();
    let x = gb.input("features", Some(c.input_dim));
    let logits = affine_layer(&mut gb, rng, "head", x, c.input_dim, c.vocabulary_size);
    let probs = gb.sigmoid(logits);
    gb.output("penultimate", x);
    gb.output("logits", logits);
    gb.output("probs", probs);
    gb
}

fn build_graph(config: &ModelConfig, rng: &mut Rng) -> GraphBuilder {
    match config {
        ModelConfig::ResNetLike(c) => build_resnetlike(c, rng),
        ModelConfig::VladBow(c) => build_vladbow(c, rng),
        ModelConfig::FrameMix(c) => build_framemix(c, rng),
        ModelConfig::StackHead(c) => build_stackhead(c, rng),
    }
}

/// Loss attached to a training graph.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub top_k_neg: usize,
    pub margin: f64,
    pub per_sample_scope: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    SoftRank,
    HingeRank,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            kind: LossKind::Bce,
            top_k_neg: 30,
            margin: 1.0,
            per_sample_scope: false,
        }
    }
}

/// Architecture config plus the parameter tensors, wrapped around an
/// eval-mode compute graph.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub graph: ComputeGraph,
}

impl Model {
    /// Deterministic initialization from a seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model> {
        let config = config.clone().normalized();
        config.validate()?;
        let mut rng = Rng::new(seed);
        let graph = build_graph(&config, &mut rng).build();
        Ok(Model { config, graph })
    }

    pub fn num_params(&self) -> usize {
        self.graph.num_params()
    }

    pub fn penultimate_width(&self) -> usize {
        match &self.config {
            ModelConfig::ResNetLike(c) => c.inner_size,
            ModelConfig::VladBow(c) => c.head.inner_size,
            ModelConfig::FrameMix(c) => c.head.inner_size,
            ModelConfig::StackHead(c) => c.input_dim,
        }
    }

    /// Same architecture plus a `target` input and the configured loss
    /// node (output `loss`), in train mode, with parameters copied from
    /// this model.
    pub fn training_graph(&self, loss: &LossSpec) -> Result<ComputeGraph> {
        if matches!(self.config, ModelConfig::StackHead(_)) && loss.kind != LossKind::Bce {
            return Err(Error::input("stack head trains with BCE only"));
        }
        let mut rng = Rng::new(0);
        let mut gb = build_graph(&self.config, &mut rng);
        let vocab = self.config.vocabulary_size();
        let target = gb.input("target", Some(vocab));
        let scope = if loss.per_sample_scope {
            PairScope::PerSample
        } else {
            PairScope::Batch
        };
        let loss_node = match loss.kind {
            LossKind::Bce => {
                let probs = gb_output(&gb, "probs")?;
                gb.bce_loss(probs, target)
            }
            LossKind::SoftRank => {
                let logits = gb_output(&gb, "logits")?;
                gb.soft_rank_loss(logits, target, loss.top_k_neg, scope)
            }
            LossKind::HingeRank => {
                let logits = gb_output(&gb, "logits")?;
                gb.hinge_rank_loss(logits, target, loss.margin, loss.top_k_neg, scope)
            }
        };
        gb.output("loss", loss_node);
        let mut graph = gb.build();
        graph.load_state(self.graph.dump_state())?;
        graph.set_mode(Mode::Train);
        Ok(graph)
    }

    /// Copy trained parameters and batch-norm statistics back.
    pub fn adopt_state(&mut self, trained: &ComputeGraph) -> Result<()> {
        self.graph.load_state(trained.dump_state())
    }

    /// Eval-mode forward returning the named outputs.
    pub fn evaluate(&self, inputs: &NamedTensors) -> Result<ModelOutputs> {
        let eval = self.graph.evaluate(inputs)?;
        let probs = eval.value(self.graph.output_node("probs")?).clone();
        let penultimate = eval.value(self.graph.output_node("penultimate")?).clone();
        let bow = match self.graph.output_node("bow") {
            Ok(node) => Some(eval.value(node).clone()),
            Err(_) => None,
        };
        Ok(ModelOutputs {
            probs,
            penultimate,
            bow,
        })
    }
}

fn gb_output(gb: &GraphBuilder, name: &str) -> Result<NodeId> {
    gb.peek_output(name)
        .ok_or_else(|| Error::input(format!("builder has no output '{name}'")))
}

#[derive(Debug, Clone)]
pub struct ModelOutputs {
    pub probs: Tensor,
    pub penultimate: Tensor,
    pub bow: Option<Tensor>,
}

// ---------------------------------------------------------------------------
// spec-level forward wrappers

/// Video-level forward pass: batch of video/audio feature rows.
pub fn forward_resnetlike(model: &Model, video: &Tensor, audio: &Tensor) -> Result<Tensor> {
    let mut inputs = NamedTensors::new();
    match &model.config {
        ModelConfig::ResNetLike(c) => {
            if c.modality != Modality::AudioOnly {
                inputs.insert("video".into(), video.clone());
            }
            if c.modality != Modality::VideoOnly {
                inputs.insert("audio".into(), audio.clone());
            }
        }
        _ => return Err(Error::input("forward_resnetlike wants a ResNetLike model")),
    }
    Ok(model.evaluate(&inputs)?.probs)
}

/// Frame-level forward for one video: frames are a T x D matrix.
/// Returns (probs [1, vocab], bow [1, K]).
pub fn forward_vladbow(model: &Model, frames: &Tensor) -> Result<(Tensor, Tensor)> {
    if !matches!(model.config, ModelConfig::VladBow(_)) {
        return Err(Error::input("forward_vladbow wants a VladBow model"));
    }
    if frames.rank() != 2 {
        return Err(Error::input("frames must be T x D"));
    }
    let (t, d) = (frames.shape()[0], frames.shape()[1]);
    let mut inputs = NamedTensors::new();
    inputs.insert("frames".into(), frames.reshaped(vec![1, t, d])?);
    inputs.insert("mask".into(), Tensor::full(&[1, t, 1], 1.0));
    let out = model.evaluate(&inputs)?;
    Ok((out.probs, out.bow.expect("vladbow exposes bow")))
}

/// Frame-level forward for one video over already padded frames
/// (t_max x D, zero-filled past the valid length).
pub fn forward_framemix(model: &Model, padded_frames: &Tensor) -> Result<Tensor> {
    let c = match &model.config {
        ModelConfig::FrameMix(c) => c,
        _ => return Err(Error::input("forward_framemix wants a FrameMix model")),
    };
    if padded_frames.rank() != 2 || padded_frames.shape()[0] != c.t_max {
        return Err(Error::input(format!(
            "padded frames must be {} x {}, got {:?}",
            c.t_max,
            c.input_dim,
            padded_frames.shape()
        )));
    }
    let mut inputs = NamedTensors::new();
    inputs.insert(
        "frames".into(),
        padded_frames.reshaped(vec![1, c.t_max, c.input_dim])?,
    );
    Ok(model.evaluate(&inputs)?.probs)
}
