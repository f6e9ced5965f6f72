//! Static compute graphs with reverse-mode differentiation.
//!
//! A graph is built once per architecture as an ordered list of primitive
//! nodes (the order is the topological order), holds its named parameter
//! tensors, and is then evaluated per batch. Evaluation is pure: train-mode
//! side effects (batch-norm running statistics) are returned as pending
//! updates inside the [`Evaluation`] and committed explicitly by the
//! training loop.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lossmetrics;
use crate::rng::Rng;

use super::tensor::Tensor;

pub type NodeId = usize;
pub type NamedTensors = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pairing scope for the ranking losses: across the whole batch (the
/// default) or restricted to pairs within each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairScope {
    Batch,
    PerSample,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input {
        name: String,
        dim: Option<usize>,
    },
    Param {
        name: String,
    },
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    SoftmaxLast {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        key: String,
    },
    Dropout {
        x: NodeId,
        rate: f64,
    },
    Power {
        x: NodeId,
        p: NodeId,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    Reduce {
        x: NodeId,
        axis: usize,
        mean: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Log {
        x: NodeId,
    },
    Exp {
        x: NodeId,
    },
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    FrameCombine {
        frames: NodeId,
        coeffs: NodeId,
    },
    BceLoss {
        pred: NodeId,
        target: NodeId,
    },
    SoftRankLoss {
        scores: NodeId,
        labels: NodeId,
        top_k: usize,
        scope: PairScope,
    },
    HingeRankLoss {
        scores: NodeId,
        labels: NodeId,
        margin: f64,
        top_k: usize,
        scope: PairScope,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::SoftmaxLast { .. } => "softmax_last",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::Power { .. } => "power",
            Op::Concat { .. } => "concat",
            Op::Reduce { .. } => "reduce",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Log { .. } => "log",
            Op::Exp { .. } => "exp",
            Op::Clamp { .. } => "clamp",
            Op::FrameCombine { .. } => "frame_combine",
            Op::BceLoss { .. } => "bce_loss",
            Op::SoftRankLoss { .. } => "soft_rank_loss",
            Op::HingeRankLoss { .. } => "hinge_rank_loss",
        }
    }
}

/// Batch-norm running statistics (eval-mode normalizers).
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-node batch-norm quantities saved by a train-mode forward pass.
#[derive(Debug, Clone)]
struct BnBatch {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

/// Everything a forward pass produced: node values plus the transient
/// state backward needs (dropout masks, batch-norm batch statistics).
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
    dropout_masks: Vec<Option<Vec<f64>>>,
    bn_batch: Vec<Option<BnBatch>>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }
}

/// Snapshot of all mutable graph state (trainable parameters plus
/// batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphState {
    pub params: NamedTensors,
    pub bn_running: BTreeMap<String, BnRunning>,
}

#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    nodes: Vec<Op>,
    params: NamedTensors,
    param_nodes: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    bn_running: BTreeMap<String, BnRunning>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    /// Declare a named input; `dim` pins the trailing extent when known.
    pub fn input(&mut self, name: &str, dim: Option<usize>) -> NodeId {
        let id = self.push(Op::Input {
            name: name.to_string(),
            dim,
        });
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Register a named trainable parameter with its initial value.
    pub fn param(&mut self, name: &str, init: Tensor) -> NodeId {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.push(Op::Param {
            name: name.to_string(),
        });
        self.params.insert(name.to_string(), init);
        self.param_nodes.insert(name.to_string(), id);
        id
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid { x })
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SoftmaxLast { x })
    }

    /// Batch normalization over the trailing feature axis. Creates the
    /// `<prefix>.gamma` / `<prefix>.beta` parameters and a running-stats
    /// slot keyed by `prefix`.
    pub fn batch_norm(&mut self, x: NodeId, prefix: &str, features: usize) -> NodeId {
        let gamma = self.param(&format!("{prefix}.gamma"), Tensor::full(&[features], 1.0));
        let beta = self.param(&format!("{prefix}.beta"), Tensor::zeros(&[features]));
        self.bn_running.insert(
            prefix.to_string(),
            BnRunning {
                mean: vec![0.0; features],
                var: vec![1.0; features],
            },
        );
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            key: prefix.to_string(),
        })
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        self.push(Op::Dropout { x, rate })
    }

    pub fn power(&mut self, x: NodeId, p: NodeId) -> NodeId {
        self.push(Op::Power { x, p })
    }

    pub fn concat(&mut self, xs: Vec<NodeId>) -> NodeId {
        assert!(!xs.is_empty());
        self.push(Op::Concat { xs })
    }

    pub fn reduce_sum(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::Reduce {
            x,
            axis,
            mean: false,
        })
    }

    pub fn reduce_mean(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::Reduce {
            x,
            axis,
            mean: true,
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul { a, b })
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp { x })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp { x, lo, hi })
    }

    pub fn frame_combine(&mut self, frames: NodeId, coeffs: NodeId) -> NodeId {
        self.push(Op::FrameCombine { frames, coeffs })
    }

    pub fn bce_loss(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        self.push(Op::BceLoss { pred, target })
    }

    pub fn soft_rank_loss(
        &mut self,
        scores: NodeId,
        labels: NodeId,
        top_k: usize,
        scope: PairScope,
    ) -> NodeId {
        self.push(Op::SoftRankLoss {
            scores,
            labels,
            top_k,
            scope,
        })
    }

    pub fn hinge_rank_loss(
        &mut self,
        scores: NodeId,
        labels: NodeId,
        margin: f64,
        top_k: usize,
        scope: PairScope,
    ) -> NodeId {
        self.push(Op::HingeRankLoss {
            scores,
            labels,
            margin,
            top_k,
            scope,
        })
    }

    /// Expose a node under a stable name ("probs", "penultimate", "loss").
    pub fn output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_string(), node);
    }

    pub fn peek_output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn build(self) -> ComputeGraph {
        ComputeGraph {
            nodes: self.nodes,
            params: self.params,
            param_nodes: self.param_nodes,
            inputs: self.inputs,
            outputs: self.outputs,
            bn_running: self.bn_running,
            mode: Mode::Eval,
        }
    }
}

/// An ordered list of primitive operations plus named parameters.
#[derive(Debug, Clone)]
pub struct ComputeGraph {
    nodes: Vec<Op>,
    params: NamedTensors,
    param_nodes: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    bn_running: BTreeMap<String, BnRunning>,
    mode: Mode,
}

impl ComputeGraph {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &NamedTensors {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedTensors {
        &mut self.params
    }

    pub fn bn_running(&self) -> &BTreeMap<String, BnRunning> {
        &self.bn_running
    }

    pub fn output_node(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::input(format!("graph has no output named '{name}'")))
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(|s| s.as_str())
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.keys().map(|s| s.as_str())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn state_snapshot(&self) -> GraphState {
        GraphState {
            params: self.params.clone(),
            bn_running: self.bn_running.clone(),
        }
    }

    pub fn restore(&mut self, state: &GraphState) {
        self.params = state.params.clone();
        self.bn_running = state.bn_running.clone();
    }

    /// Replace parameter / running-stat tensors by name (deserialization).
    pub fn load_state(&mut self, mut tensors: NamedTensors) -> Result<()> {
        for (name, value) in self.params.iter_mut() {
            let loaded = tensors
                .remove(name)
                .ok_or_else(|| Error::format(format!("missing tensor '{name}'")))?;
            if loaded.shape() != value.shape() {
                return Err(Error::format(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    loaded.shape(),
                    value.shape()
                )));
            }
            *value = loaded;
        }
        for (key, running) in self.bn_running.iter_mut() {
            let mean = tensors
                .remove(&format!("{key}.running_mean"))
                .ok_or_else(|| Error::format(format!("missing tensor '{key}.running_mean'")))?;
            let var = tensors
                .remove(&format!("{key}.running_var"))
                .ok_or_else(|| Error::format(format!("missing tensor '{key}.running_var'")))?;
            if mean.len() != running.mean.len() || var.len() != running.var.len() {
                return Err(Error::format(format!(
                    "running stats size mismatch for '{key}'"
                )));
            }
            running.mean = mean.into_data();
            running.var = var.into_data();
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::format(format!("unexpected tensor '{extra}'")));
        }
        Ok(())
    }

    /// All named tensors, running statistics included (serialization).
    pub fn dump_state(&self) -> NamedTensors {
        let mut out = self.params.clone();
        for (key, running) in &self.bn_running {
            out.insert(
                format!("{key}.running_mean"),
                Tensor::new(vec![running.mean.len()], running.mean.clone()).expect("bn mean"),
            );
            out.insert(
                format!("{key}.running_var"),
                Tensor::new(vec![running.var.len()], running.var.clone()).expect("bn var"),
            );
        }
        out
    }

    /// Eval-mode forward pass: a pure function of (parameters, inputs).
    pub fn evaluate(&self, inputs: &NamedTensors) -> Result<Evaluation> {
        if self.mode != Mode::Eval {
            return Err(Error::input(
                "graph is in train mode; use evaluate_train with an rng",
            ));
        }
        self.run_forward(inputs, None)
    }

    /// Train-mode forward pass. Dropout draws from `rng`; batch-norm uses
    /// batch statistics and records pending running-stat updates, which
    /// take effect only via [`ComputeGraph::commit_bn_updates`].
    pub fn evaluate_train(&self, inputs: &NamedTensors, rng: &mut Rng) -> Result<Evaluation> {
        if self.mode != Mode::Train {
            return Err(Error::input("graph is in eval mode; use evaluate"));
        }
        self.run_forward(inputs, Some(rng))
    }

    /// Fold the batch statistics recorded in `eval` into the running
    /// statistics: `running = momentum * running + (1 - momentum) * batch`.
    pub fn commit_bn_updates(&mut self, eval: &Evaluation) {
        for (id, op) in self.nodes.iter().enumerate() {
            if let Op::BatchNorm { key, .. } = op {
                if let Some(batch) = &eval.bn_batch[id] {
                    let running = self.bn_running.get_mut(key).expect("bn key registered");
                    for f in 0..running.mean.len() {
                        running.mean[f] =
                            BN_MOMENTUM * running.mean[f] + (1.0 - BN_MOMENTUM) * batch.mean[f];
                        running.var[f] =
                            BN_MOMENTUM * running.var[f] + (1.0 - BN_MOMENTUM) * batch.var[f];
                    }
                }
            }
        }
    }

    fn node_err(&self, id: NodeId, msg: &str) -> Error {
        Error::numeric(format!("node {id} ({}): {msg}", self.nodes[id].kind()))
    }

    fn run_forward(&self, inputs: &NamedTensors, mut rng: Option<&mut Rng>) -> Result<Evaluation> {
        let n = self.nodes.len();
        let mut values: Vec<Tensor> = Vec::with_capacity(n);
        let mut dropout_masks: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut bn_batch: Vec<Option<BnBatch>> = vec![None; n];

        for (id, op) in self.nodes.iter().enumerate() {
            let value = match op {
                Op::Input { name, dim } => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| Error::input(format!("missing input tensor '{name}'")))?;
                    if let Some(d) = dim {
                        if t.last_dim() != *d {
                            return Err(Error::input(format!(
                                "input '{name}' has trailing dim {}, graph declares {d}",
                                t.last_dim()
                            )));
                        }
                    }
                    if !t.all_finite() {
                        return Err(Error::input(format!(
                            "input '{name}' contains non-finite values"
                        )));
                    }
                    t.clone()
                }
                Op::Param { name } => self.params[name].clone(),
                Op::Affine { x, w, b } => forward_affine(&values[*x], &values[*w], &values[*b])?,
                Op::Relu { x } => {
                    let mut t = values[*x].clone();
                    for v in t.data_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    t
                }
                Op::Sigmoid { x } => {
                    let mut t = values[*x].clone();
                    for v in t.data_mut() {
                        *v = sigmoid(*v);
                    }
                    t
                }
                Op::SoftmaxLast { x } => forward_softmax_last(&values[*x]),
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    key,
                } => {
                    let (t, batch) = forward_batch_norm(
                        &values[*x],
                        &values[*gamma],
                        &values[*beta],
                        self.mode == Mode::Train,
                        self.bn_running.get(key).expect("bn key registered"),
                    )?;
                    bn_batch[id] = batch;
                    t
                }
                Op::Dropout { x, rate } => {
                    if self.mode == Mode::Train && *rate > 0.0 {
                        let r = rng
                            .as_deref_mut()
                            .ok_or_else(|| Error::input("train-mode dropout requires an rng"))?;
                        let keep = 1.0 - rate;
                        let scale = 1.0 / keep;
                        let x_t = &values[*x];
                        let mut mask = Vec::with_capacity(x_t.len());
                        for _ in 0..x_t.len() {
                            mask.push(if r.next_f64() < keep { scale } else { 0.0 });
                        }
                        let mut t = x_t.clone();
                        for (v, m) in t.data_mut().iter_mut().zip(&mask) {
                            *v *= m;
                        }
                        dropout_masks[id] = Some(mask);
                        t
                    } else {
                        values[*x].clone()
                    }
                }
                Op::Power { x, p } => {
                    let p_val = values[*p].scalar_value()?;
                    let mut t = values[*x].clone();
                    for v in t.data_mut() {
                        *v = if *v > 0.0 { v.powf(p_val) } else { 0.0 };
                    }
                    t
                }
                Op::Concat { xs } => forward_concat(xs.iter().map(|i| &values[*i]))?,
                Op::Reduce { x, axis, mean } => forward_reduce(&values[*x], *axis, *mean)?,
                Op::Add { a, b } => {
                    let (ta, tb) = (&values[*a], &values[*b]);
                    if ta.shape() != tb.shape() {
                        return Err(Error::input(format!(
                            "add: shape mismatch {:?} vs {:?}",
                            ta.shape(),
                            tb.shape()
                        )));
                    }
                    let mut t = ta.clone();
                    for (v, w) in t.data_mut().iter_mut().zip(tb.data()) {
                        *v += w;
                    }
                    t
                }
                Op::Mul { a, b } => forward_mul(&values[*a], &values[*b])?,
                Op::Log { x } => {
                    let mut t = values[*x].clone();
                    for v in t.data_mut() {
                        *v = v.ln();
                    }
                    t
                }
                Op::Exp { x } => {
                    let mut t = values[*x].clone();
                    for v in t.data_mut() {
                        *v = v.exp();
                    }
                    t
                }
                Op::Clamp { x, lo, hi } => {
                    let mut t = values[*x].clone();
                    for v in t.data_mut() {
                        *v = v.clamp(*lo, *hi);
                    }
                    t
                }
                Op::FrameCombine { frames, coeffs } => {
                    forward_frame_combine(&values[*frames], &values[*coeffs])?
                }
                Op::BceLoss { pred, target } => {
                    let (loss, _) = lossmetrics::bce_with_grad(&values[*pred], &values[*target])?;
                    Tensor::scalar(loss)
                }
                Op::SoftRankLoss {
                    scores,
                    labels,
                    top_k,
                    scope,
                } => {
                    let (loss, _) = lossmetrics::soft_rank_with_grad(
                        &values[*scores],
                        &values[*labels],
                        *top_k,
                        *scope,
                    )?;
                    Tensor::scalar(loss)
                }
                Op::HingeRankLoss {
                    scores,
                    labels,
                    margin,
                    top_k,
                    scope,
                } => {
                    let (loss, _) = lossmetrics::hinge_rank_with_grad(
                        &values[*scores],
                        &values[*labels],
                        *margin,
                        *top_k,
                        *scope,
                    )?;
                    Tensor::scalar(loss)
                }
            };
            if !value.all_finite() {
                return Err(self.node_err(id, "non-finite value"));
            }
            values.push(value);
        }

        Ok(Evaluation {
            values,
            dropout_masks,
            bn_batch,
        })
    }

    /// Reverse-mode gradients of the scalar `loss` node with respect to
    /// every parameter. Parameters the loss does not depend on get zero
    /// gradients.
    pub fn backward(&self, eval: &Evaluation, loss: NodeId) -> Result<NamedTensors> {
        if loss >= self.nodes.len() {
            return Err(Error::input(format!("no such node {loss}")));
        }
        if !eval.values[loss].is_scalar() {
            return Err(Error::input(format!(
                "loss node must be scalar, got shape {:?}",
                eval.values[loss].shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id] {
                Op::Input { .. } | Op::Param { .. } => {
                    grads[id] = Some(g); // restored; collected below
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let (dx, dw, db) = backward_affine(&eval.values[*x], &eval.values[*w], &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu { x } => {
                    let mut dx = g;
                    for (v, inp) in dx.data_mut().iter_mut().zip(eval.values[*x].data()) {
                        if *inp <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let mut dx = g;
                    for (v, y) in dx.data_mut().iter_mut().zip(eval.values[id].data()) {
                        *v *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxLast { x } => {
                    let dx = backward_softmax_last(&eval.values[id], &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    key,
                } => {
                    let (dx, dgamma, dbeta) = backward_batch_norm(
                        &eval.values[*x],
                        &eval.values[*gamma],
                        eval.bn_batch[id].as_ref(),
                        self.bn_running.get(key).expect("bn key registered"),
                        &g,
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Dropout { x, .. } => {
                    let mut dx = g;
                    if let Some(mask) = &eval.dropout_masks[id] {
                        for (v, m) in dx.data_mut().iter_mut().zip(mask) {
                            *v *= m;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Power { x, p } => {
                    let p_val = eval.values[*p].scalar_value()?;
                    let x_t = &eval.values[*x];
                    let y_t = &eval.values[id];
                    let mut dx = Tensor::zeros(x_t.shape());
                    let mut dp = 0.0;
                    for i in 0..x_t.len() {
                        let u = x_t.data()[i];
                        if u > 0.0 {
                            let y = y_t.data()[i];
                            dx.data_mut()[i] = g.data()[i] * p_val * u.powf(p_val - 1.0);
                            dp += g.data()[i] * y * u.ln();
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *p, Tensor::scalar(dp));
                }
                Op::Concat { xs } => {
                    let parts = backward_concat(xs.iter().map(|i| &eval.values[*i]), &g);
                    for (xi, part) in xs.iter().zip(parts) {
                        accumulate(&mut grads, *xi, part);
                    }
                }
                Op::Reduce { x, axis, mean } => {
                    let dx = backward_reduce(&eval.values[*x], *axis, *mean, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let (da, db) = backward_mul(&eval.values[*a], &eval.values[*b], &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Log { x } => {
                    let mut dx = g;
                    for (v, inp) in dx.data_mut().iter_mut().zip(eval.values[*x].data()) {
                        *v /= inp;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Exp { x } => {
                    let mut dx = g;
                    for (v, y) in dx.data_mut().iter_mut().zip(eval.values[id].data()) {
                        *v *= y;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let mut dx = g;
                    for (v, inp) in dx.data_mut().iter_mut().zip(eval.values[*x].data()) {
                        if *inp <= *lo || *inp >= *hi {
                            *v = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::FrameCombine { frames, coeffs } => {
                    let (df, dc) =
                        backward_frame_combine(&eval.values[*frames], &eval.values[*coeffs], &g);
                    accumulate(&mut grads, *frames, df);
                    accumulate(&mut grads, *coeffs, dc);
                }
                Op::BceLoss { pred, target } => {
                    let scale = g.scalar_value()?;
                    let (_, mut dpred) =
                        lossmetrics::bce_with_grad(&eval.values[*pred], &eval.values[*target])?;
                    for v in dpred.data_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *pred, dpred);
                }
                Op::SoftRankLoss {
                    scores,
                    labels,
                    top_k,
                    scope,
                } => {
                    let scale = g.scalar_value()?;
                    let (_, mut dscores) = lossmetrics::soft_rank_with_grad(
                        &eval.values[*scores],
                        &eval.values[*labels],
                        *top_k,
                        *scope,
                    )?;
                    for v in dscores.data_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *scores, dscores);
                }
                Op::HingeRankLoss {
                    scores,
                    labels,
                    margin,
                    top_k,
                    scope,
                } => {
                    let scale = g.scalar_value()?;
                    let (_, mut dscores) = lossmetrics::hinge_rank_with_grad(
                        &eval.values[*scores],
                        &eval.values[*labels],
                        *margin,
                        *top_k,
                        *scope,
                    )?;
                    for v in dscores.data_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *scores, dscores);
                }
            }
        }

        let mut out = NamedTensors::new();
        for (name, node) in &self.param_nodes {
            let grad = grads[*node]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.params[name].shape()));
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (v, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *v += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// dense kernels

/// out[r, c] = sum_k a[r, k] * b[k, c]
fn matmul(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), ar * ac);
    debug_assert_eq!(b.len(), ac * bc);
    debug_assert_eq!(out.len(), ar * bc);
    for r in 0..ar {
        let out_row = &mut out[r * bc..(r + 1) * bc];
        for k in 0..ac {
            let av = a[r * ac + k];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[k * bc..(k + 1) * bc];
            for c in 0..bc {
                out_row[c] += av * b_row[c];
            }
        }
    }
}

/// out[r, c] = sum_k a[r, k] * b[c, k]  (b used transposed)
fn matmul_nt(a: &[f64], ar: usize, ac: usize, b: &[f64], br: usize, out: &mut [f64]) {
    debug_assert_eq!(b.len(), br * ac);
    for r in 0..ar {
        for c in 0..br {
            let mut acc = 0.0;
            let a_row = &a[r * ac..(r + 1) * ac];
            let b_row = &b[c * ac..(c + 1) * ac];
            for k in 0..ac {
                acc += a_row[k] * b_row[k];
            }
            out[r * br + c] = acc;
        }
    }
}

/// out[r, c] = sum_k a[k, r] * b[k, c]  (a used transposed)
fn matmul_tn(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), ar * ac);
    debug_assert_eq!(b.len(), ar * bc);
    debug_assert_eq!(out.len(), ac * bc);
    for k in 0..ar {
        let a_row = &a[k * ac..(k + 1) * ac];
        let b_row = &b[k * bc..(k + 1) * bc];
        for r in 0..ac {
            let av = a_row[r];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[r * bc..(r + 1) * bc];
            for c in 0..bc {
                out_row[c] += av * b_row[c];
            }
        }
    }
}

fn forward_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::input(format!(
            "affine weight must be rank 2, got {:?}",
            w.shape()
        )));
    }
    let (w_in, w_out) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != w_in {
        return Err(Error::input(format!(
            "affine: input trailing dim {} does not match weight rows {w_in}",
            x.last_dim()
        )));
    }
    if b.len() != w_out {
        return Err(Error::input(format!(
            "affine: bias length {} does not match weight cols {w_out}",
            b.len()
        )));
    }
    let rows = x.leading_len();
    let mut out = vec![0.0; rows * w_out];
    matmul(x.data(), rows, w_in, w.data(), w_out, &mut out);
    for r in 0..rows {
        for c in 0..w_out {
            out[r * w_out + c] += b.data()[c];
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = w_out;
    Tensor::new(shape, out)
}

fn backward_affine(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (w_in, w_out) = (w.shape()[0], w.shape()[1]);
    let rows = x.leading_len();
    // dx = g . w^T
    let mut dx = vec![0.0; rows * w_in];
    matmul_nt(g.data(), rows, w_out, w.data(), w_in, &mut dx);
    // dw = x^T . g
    let mut dw = vec![0.0; w_in * w_out];
    matmul_tn(x.data(), rows, w_in, g.data(), w_out, &mut dw);
    // db = column sums of g
    let mut db = vec![0.0; w_out];
    for r in 0..rows {
        for c in 0..w_out {
            db[c] += g.data()[r * w_out + c];
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(vec![w_in, w_out], dw).expect("dw shape"),
        Tensor::new(vec![w_out], db).expect("db shape"),
    )
}

fn forward_softmax_last(x: &Tensor) -> Tensor {
    let w = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn backward_softmax_last(y: &Tensor, g: &Tensor) -> Tensor {
    let w = y.last_dim();
    let mut dx = Tensor::zeros(y.shape());
    let rows = y.leading_len();
    for r in 0..rows {
        let ys = &y.data()[r * w..(r + 1) * w];
        let gs = &g.data()[r * w..(r + 1) * w];
        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        let out = &mut dx.data_mut()[r * w..(r + 1) * w];
        for c in 0..w {
            out[c] = ys[c] * (gs[c] - dot);
        }
    }
    dx
}

fn forward_batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    train: bool,
    running: &BnRunning,
) -> Result<(Tensor, Option<BnBatch>)> {
    let f = x.last_dim();
    if gamma.len() != f || beta.len() != f {
        return Err(Error::input(format!(
            "batch_norm: feature dim {f} does not match gamma/beta ({}, {})",
            gamma.len(),
            beta.len()
        )));
    }
    let rows = x.leading_len();
    let mut out = x.clone();
    if train {
        let mut mean = vec![0.0; f];
        for r in 0..rows {
            for c in 0..f {
                mean[c] += x.data()[r * f + c];
            }
        }
        for m in mean.iter_mut() {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; f];
        for r in 0..rows {
            for c in 0..f {
                let d = x.data()[r * f + c] - mean[c];
                var[c] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        for r in 0..rows {
            for c in 0..f {
                let xhat = (x.data()[r * f + c] - mean[c]) * inv_std[c];
                out.data_mut()[r * f + c] = gamma.data()[c] * xhat + beta.data()[c];
            }
        }
        Ok((out, Some(BnBatch { mean, var, inv_std })))
    } else {
        let inv_std: Vec<f64> = running
            .var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        for r in 0..rows {
            for c in 0..f {
                let xhat = (x.data()[r * f + c] - running.mean[c]) * inv_std[c];
                out.data_mut()[r * f + c] = gamma.data()[c] * xhat + beta.data()[c];
            }
        }
        Ok((out, None))
    }
}

fn backward_batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    batch: Option<&BnBatch>,
    running: &BnRunning,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let f = x.last_dim();
    let rows = x.leading_len();
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    let mut dx = Tensor::zeros(x.shape());

    match batch {
        Some(b) => {
            // Train mode: gradients flow through the batch statistics.
            let mut sum_g = vec![0.0; f];
            let mut sum_g_xhat = vec![0.0; f];
            for r in 0..rows {
                for c in 0..f {
                    let gv = g.data()[r * f + c];
                    let xhat = (x.data()[r * f + c] - b.mean[c]) * b.inv_std[c];
                    sum_g[c] += gv;
                    sum_g_xhat[c] += gv * xhat;
                    dgamma[c] += gv * xhat;
                    dbeta[c] += gv;
                }
            }
            let n = rows as f64;
            for r in 0..rows {
                for c in 0..f {
                    let gv = g.data()[r * f + c];
                    let xhat = (x.data()[r * f + c] - b.mean[c]) * b.inv_std[c];
                    dx.data_mut()[r * f + c] = gamma.data()[c]
                        * b.inv_std[c]
                        * (gv - sum_g[c] / n - xhat * sum_g_xhat[c] / n);
                }
            }
        }
        None => {
            // Eval mode: running statistics are constants.
            let inv_std: Vec<f64> = running
                .var
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            for r in 0..rows {
                for c in 0..f {
                    let gv = g.data()[r * f + c];
                    let xhat = (x.data()[r * f + c] - running.mean[c]) * inv_std[c];
                    dgamma[c] += gv * xhat;
                    dbeta[c] += gv;
                    dx.data_mut()[r * f + c] = gv * gamma.data()[c] * inv_std[c];
                }
            }
        }
    }
    (
        dx,
        Tensor::new(vec![f], dgamma).expect("dgamma"),
        Tensor::new(vec![f], dbeta).expect("dbeta"),
    )
}

fn forward_concat<'a>(xs: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let tensors: Vec<&Tensor> = xs.collect();
    let lead = tensors[0].shape()[..tensors[0].rank() - 1].to_vec();
    for t in &tensors {
        if t.shape()[..t.rank() - 1] != lead[..] {
            return Err(Error::input("concat: leading shapes differ"));
        }
    }
    let rows = tensors[0].leading_len();
    let total_w: usize = tensors.iter().map(|t| t.last_dim()).sum();
    let mut data = Vec::with_capacity(rows * total_w);
    for r in 0..rows {
        for t in &tensors {
            let w = t.last_dim();
            data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead;
    shape.push(total_w);
    Tensor::new(shape, data)
}

fn backward_concat<'a>(xs: impl Iterator<Item = &'a Tensor>, g: &Tensor) -> Vec<Tensor> {
    let tensors: Vec<&Tensor> = xs.collect();
    let rows = tensors[0].leading_len();
    let total_w = g.last_dim();
    let mut parts: Vec<Tensor> = tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for r in 0..rows {
        let mut offset = 0;
        for (t, part) in tensors.iter().zip(parts.iter_mut()) {
            let w = t.last_dim();
            let src = &g.data()[r * total_w + offset..r * total_w + offset + w];
            part.data_mut()[r * w..(r + 1) * w].copy_from_slice(src);
            offset += w;
        }
    }
    parts
}

fn forward_reduce(x: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::input(format!(
            "reduce: axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if x.rank() == 1 {
        let sum: f64 = x.data().iter().sum();
        let v = if mean { sum / x.len() as f64 } else { sum };
        return Ok(Tensor::scalar(v));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for t in 0..len {
            let base = (o * len + t) * inner;
            for i in 0..inner {
                out[o * inner + i] += x.data()[base + i];
            }
        }
    }
    if mean {
        for v in out.iter_mut() {
            *v /= len as f64;
        }
    }
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

fn backward_reduce(x: &Tensor, axis: usize, mean: bool, g: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x.shape());
    if x.rank() == 1 {
        let gv = g.data()[0];
        let scale = if mean { 1.0 / x.len() as f64 } else { 1.0 };
        for v in dx.data_mut() {
            *v = gv * scale;
        }
        return dx;
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let scale = if mean { 1.0 / len as f64 } else { 1.0 };
    for o in 0..outer {
        for t in 0..len {
            let base = (o * len + t) * inner;
            for i in 0..inner {
                dx.data_mut()[base + i] = g.data()[o * inner + i] * scale;
            }
        }
    }
    dx
}

fn forward_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let mut t = a.clone();
        for (v, w) in t.data_mut().iter_mut().zip(b.data()) {
            *v *= w;
        }
        return Ok(t);
    }
    // Trailing-axis broadcast: [.., K] * [.., 1]
    let (big, small, small_is_b) = if b.last_dim() == 1 {
        (a, b, true)
    } else {
        (b, a, false)
    };
    let ok = small.last_dim() == 1
        && big.rank() == small.rank()
        && big.shape()[..big.rank() - 1] == small.shape()[..small.rank() - 1];
    if !ok {
        return Err(Error::input(format!(
            "mul: incompatible shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let _ = small_is_b;
    let w = big.last_dim();
    let mut t = big.clone();
    for (r, chunk) in t.data_mut().chunks_mut(w).enumerate() {
        let s = small.data()[r];
        for v in chunk.iter_mut() {
            *v *= s;
        }
    }
    Ok(t)
}

fn backward_mul(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    if a.shape() == b.shape() {
        let mut da = g.clone();
        for (v, w) in da.data_mut().iter_mut().zip(b.data()) {
            *v *= w;
        }
        let mut db = g.clone();
        for (v, w) in db.data_mut().iter_mut().zip(a.data()) {
            *v *= w;
        }
        return (da, db);
    }
    let a_is_small = a.last_dim() == 1;
    let (big, small) = if a_is_small { (b, a) } else { (a, b) };
    let w = big.last_dim();
    let mut dbig = g.clone();
    for (r, chunk) in dbig.data_mut().chunks_mut(w).enumerate() {
        let s = small.data()[r];
        for v in chunk.iter_mut() {
            *v *= s;
        }
    }
    let mut dsmall = Tensor::zeros(small.shape());
    for r in 0..small.len() {
        let mut acc = 0.0;
        for c in 0..w {
            acc += g.data()[r * w + c] * big.data()[r * w + c];
        }
        dsmall.data_mut()[r] = acc;
    }
    if a_is_small {
        (dsmall, dbig)
    } else {
        (dbig, dsmall)
    }
}

/// frames [B, T, D] x coeffs [m, T] -> [B, m*D]
fn forward_frame_combine(frames: &Tensor, coeffs: &Tensor) -> Result<Tensor> {
    if frames.rank() != 3 || coeffs.rank() != 2 {
        return Err(Error::input(format!(
            "frame_combine: want frames rank 3 and coeffs rank 2, got {:?} and {:?}",
            frames.shape(),
            coeffs.shape()
        )));
    }
    let (b, t, d) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
    let (m, ct) = (coeffs.shape()[0], coeffs.shape()[1]);
    if ct != t {
        return Err(Error::input(format!(
            "frame_combine: frames have {t} steps, coeffs expect {ct}"
        )));
    }
    let mut out = vec![0.0; b * m * d];
    for bi in 0..b {
        for mi in 0..m {
            let dst = &mut out[(bi * m + mi) * d..(bi * m + mi + 1) * d];
            for ti in 0..t {
                let c = coeffs.data()[mi * t + ti];
                if c == 0.0 {
                    continue;
                }
                let src = &frames.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for di in 0..d {
                    dst[di] += c * src[di];
                }
            }
        }
    }
    Tensor::new(vec![b, m * d], out)
}

fn backward_frame_combine(frames: &Tensor, coeffs: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (b, t, d) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
    let m = coeffs.shape()[0];
    let mut dframes = Tensor::zeros(frames.shape());
    let mut dcoeffs = Tensor::zeros(coeffs.shape());
    for bi in 0..b {
        for mi in 0..m {
            let grow = &g.data()[(bi * m + mi) * d..(bi * m + mi + 1) * d];
            for ti in 0..t {
                let frow = &frames.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                let c = coeffs.data()[mi * t + ti];
                let mut dot = 0.0;
                for di in 0..d {
                    dot += grow[di] * frow[di];
                }
                dcoeffs.data_mut()[mi * t + ti] += dot;
                if c != 0.0 {
                    let drow = &mut dframes.data_mut()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                    for di in 0..d {
                        drow[di] += c * grow[di];
                    }
                }
            }
        }
    }
    (dframes, dcoeffs)
}
