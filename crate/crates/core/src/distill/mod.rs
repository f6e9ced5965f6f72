//! The denoising core: ensemble out-of-fold predictions into soft labels,
//! distill a student on them, and build the final stacked model from
//! frozen penultimate features.

mod container;

#[cfg(test)]
mod tests;

pub use container::{
    final_model_to_bytes, read_final_model, write_final_model, FinalModelManifest,
};

use crate::dataio::{Dataset, FoldSplit};
use crate::diffcore::{AdamState, NamedTensors, Tensor};
use crate::error::{Error, Result};
use crate::lossmetrics::GroundTruth;
use crate::models::{Model, ModelConfig, StackHeadConfig};
use crate::par;
use crate::rng::{derive_seed, Rng};
use crate::training::{
    matrix_gap, train_cv, EpochStat, TargetKind, Targets, TrainConfig, TrainedCV,
};

const SEED_HEAD: u64 = 0x4845_4144;

/// Per-(record, label) confidences in [0,1], in dataset record order.
pub type SoftLabelMatrix = Vec<Vec<f64>>;

/// Simplex weights over first-level models plus the OOF GAP they achieve.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnsembleWeights {
    pub weights: Vec<f64>,
    pub singleton_gaps: Vec<f64>,
    pub achieved_gap: f64,
}

/// Frozen student extractors plus one trained classification head.
#[derive(Debug, Clone)]
pub struct FinalModel {
    /// One representative extractor per student (its best fold model).
    pub students: Vec<Model>,
    pub head: Model,
}

/// Everything `stack_penultimate` produces: the deployable model, the
/// head's own out-of-fold predictions, and training history.
#[derive(Debug, Clone)]
pub struct StackedModel {
    pub final_model: FinalModel,
    pub oof: SoftLabelMatrix,
    pub history: Vec<EpochStat>,
}

// ---------------------------------------------------------------------------
// soft labels

/// One full-coverage soft-label matrix per trained model, clamped to [0,1].
/// All models must share the same fold split.
pub fn oof_soft_labels(trained: &[&TrainedCV]) -> Result<Vec<SoftLabelMatrix>> {
    if trained.is_empty() {
        return Err(Error::input("no trained models"));
    }
    let folds = &trained[0].folds;
    for t in trained.iter().skip(1) {
        if &t.folds != folds {
            return Err(Error::input("fold split mismatch across trained models"));
        }
    }
    Ok(trained
        .iter()
        .map(|t| {
            t.oof
                .iter()
                .map(|row| row.iter().map(|v| v.clamp(0.0, 1.0)).collect())
                .collect()
        })
        .collect())
}

/// Elementwise convex combination of aligned matrices.
pub fn combine(matrices: &[SoftLabelMatrix], weights: &[f64]) -> Result<SoftLabelMatrix> {
    if matrices.is_empty() || matrices.len() != weights.len() {
        return Err(Error::input("combine: matrices and weights must align"));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-12 {
        return Err(Error::input(format!(
            "combine: weights must be a simplex (sum {sum})"
        )));
    }
    let rows = matrices[0].len();
    for m in matrices {
        if m.len() != rows {
            return Err(Error::input("combine: row count mismatch"));
        }
    }
    let out = par::map_indices(rows, |r| {
        let width = matrices[0][r].len();
        let mut acc = vec![0.0; width];
        for (m, &w) in matrices.iter().zip(weights) {
            for (a, v) in acc.iter_mut().zip(&m[r]) {
                *a += w * v;
            }
        }
        acc
    });
    Ok(out)
}

/// Fit simplex weights by coordinate ascent on OOF GAP against the noisy
/// labels: start with all weight on the best singleton, then repeatedly
/// apply the best improving pairwise transfer from a step grid.
///
/// The achieved GAP can never drop below the best singleton GAP: the
/// ascent starts there and accepts strict improvements only.
pub fn fit_ensemble_weights(
    matrices: &[SoftLabelMatrix],
    dataset: &Dataset,
    truth: &GroundTruth,
    n: usize,
) -> Result<EnsembleWeights> {
    if matrices.is_empty() {
        return Err(Error::input("fit_ensemble_weights: no matrices"));
    }
    if truth.is_empty() {
        return Err(Error::input("fit_ensemble_weights: empty truth"));
    }
    let singleton_gaps: Vec<f64> = matrices
        .iter()
        .map(|m| matrix_gap(dataset, m, truth, n))
        .collect::<Result<_>>()?;
    // Ties go to the lower index.
    let mut best = 0usize;
    for (i, &g) in singleton_gaps.iter().enumerate() {
        if g > singleton_gaps[best] {
            best = i;
        }
    }

    let mut weights = vec![0.0; matrices.len()];
    weights[best] = 1.0;
    let mut combined = matrices[best].clone();
    let mut current = singleton_gaps[best];

    for &step in &[0.05, 0.01] {
        loop {
            let mut best_move: Option<(usize, usize, f64, SoftLabelMatrix)> = None;
            for from in 0..weights.len() {
                if weights[from] < step - 1e-12 {
                    continue;
                }
                for to in 0..weights.len() {
                    if to == from {
                        continue;
                    }
                    let candidate = shift_combined(&combined, matrices, from, to, step);
                    let gap = matrix_gap(dataset, &candidate, truth, n)?;
                    let improves = match &best_move {
                        Some((_, _, g, _)) => gap > *g,
                        None => gap > current + 1e-12,
                    };
                    if improves {
                        best_move = Some((from, to, gap, candidate));
                    }
                }
            }
            match best_move {
                Some((from, to, gap, candidate)) => {
                    weights[from] -= step;
                    weights[to] += step;
                    combined = candidate;
                    current = gap;
                }
                None => break,
            }
        }
    }

    // Clean up float drift and renormalize exactly onto the simplex.
    for w in weights.iter_mut() {
        if w.abs() < 1e-12 {
            *w = 0.0;
        }
    }
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
    Ok(EnsembleWeights {
        weights,
        singleton_gaps,
        achieved_gap: current,
    })
}

fn shift_combined(
    combined: &SoftLabelMatrix,
    matrices: &[SoftLabelMatrix],
    from: usize,
    to: usize,
    step: f64,
) -> SoftLabelMatrix {
    par::map_indices(combined.len(), |r| {
        combined[r]
            .iter()
            .zip(&matrices[from][r])
            .zip(&matrices[to][r])
            .map(|((&c, &f), &t)| (c + step * (t - f)).clamp(0.0, 1.0))
            .collect()
    })
}

// ---------------------------------------------------------------------------
// distillation

/// Train a student on ensemble soft labels (BCE only); delegates to
/// [`train_cv`] and tags the result as distilled.
pub fn distill_student(
    soft: &SoftLabelMatrix,
    dataset: &Dataset,
    folds: &FoldSplit,
    student_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainedCV> {
    if train_config.loss.kind != crate::models::LossKind::Bce {
        return Err(Error::input("distillation trains with BCE on soft targets"));
    }
    let mut cfg = train_config.clone();
    cfg.target_kind = TargetKind::Soft;
    let mut trained = train_cv(dataset, folds, student_config, &cfg, Targets::Soft(soft))?;
    trained.distilled = true;
    Ok(trained)
}

// ---------------------------------------------------------------------------
// penultimate stacking

/// Concatenate each student's OOF penultimate features per record.
fn stacked_features(students: &[&TrainedCV]) -> Result<Vec<Vec<f64>>> {
    let rows = students[0].oof_penultimate.len();
    for s in students {
        if s.oof_penultimate.len() != rows {
            return Err(Error::input("penultimate row count mismatch"));
        }
    }
    Ok((0..rows)
        .map(|r| {
            students
                .iter()
                .flat_map(|s| s.oof_penultimate[r].iter().copied())
                .collect()
        })
        .collect())
}

fn head_inputs(features: &[Vec<f64>], indices: &[usize]) -> Result<Tensor> {
    let width = features[0].len();
    let mut data = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        data.extend_from_slice(&features[i]);
    }
    Tensor::new(vec![indices.len(), width], data)
}

/// Train one affine+sigmoid head on (features, soft targets) rows.
fn train_head(
    features: &[Vec<f64>],
    soft: &SoftLabelMatrix,
    dataset: &Dataset,
    fold: usize,
    train_indices: &[usize],
    holdout_indices: &[usize],
    cfg: &TrainConfig,
    truth: &GroundTruth,
) -> Result<(Model, Vec<EpochStat>, Vec<Vec<f64>>)> {
    let width = features[0].len();
    let vocab = dataset.vocabulary_size as usize;
    let head_cfg = ModelConfig::StackHead(StackHeadConfig {
        input_dim: width,
        vocabulary_size: vocab,
    });
    let mut model = Model::init(&head_cfg, derive_seed(cfg.seed, &[SEED_HEAD, fold as u64]))?;
    let mut graph = model.training_graph(&cfg.loss)?;
    let loss_node = graph.output_node("loss")?;
    let mut adam = AdamState::new(cfg.adam, graph.params());
    let mut rng = Rng::new(derive_seed(cfg.seed, &[SEED_HEAD ^ 0xff, fold as u64]));

    let holdout_truth: GroundTruth = holdout_indices
        .iter()
        .map(|&i| &dataset.records[i])
        .filter(|r| !r.noisy_labels.is_empty())
        .map(|r| (r.id.clone(), r.noisy_labels.clone()))
        .collect();

    let predict = |model: &Model, indices: &[usize]| -> Result<Vec<Vec<f64>>> {
        if indices.is_empty() {
            return Ok(Vec::new());
        }
        let mut inputs = NamedTensors::new();
        inputs.insert("features".into(), head_inputs(features, indices)?);
        let out = model.evaluate(&inputs)?;
        Ok(out
            .probs
            .data()
            .chunks(vocab)
            .map(<[f64]>::to_vec)
            .collect())
    };

    let mut order = train_indices.to_vec();
    let mut best_state = graph.state_snapshot();
    let mut best_gap = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut history = Vec::new();

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut inputs = NamedTensors::new();
            inputs.insert("features".into(), head_inputs(features, chunk)?);
            let mut target_rows = Vec::with_capacity(chunk.len() * vocab);
            for &i in chunk {
                target_rows.extend_from_slice(&soft[i]);
            }
            let target = Tensor::new(vec![chunk.len(), vocab], target_rows)?;
            if let Some(m) = &cfg.mixup {
                let (mi, mt) = crate::training::mixup_batch(
                    &inputs,
                    &target,
                    m.alpha,
                    &mut rng,
                    m.per_example,
                )?;
                inputs = mi;
                inputs.insert("target".into(), mt);
            } else {
                inputs.insert("target".into(), target);
            }
            let eval = graph.evaluate_train(&inputs, &mut rng)?;
            loss_sum += eval.value(loss_node).scalar_value()?;
            let grads = graph.backward(&eval, loss_node)?;
            graph.commit_bn_updates(&eval);
            adam.step(graph.params_mut(), &grads)?;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::input("no trainable head batches"));
        }
        let train_loss = loss_sum / batches as f64;

        let oof_gap = if holdout_indices.is_empty() || holdout_truth.is_empty() {
            0.0
        } else {
            model.adopt_state(&graph)?;
            let probs = predict(&model, holdout_indices)?;
            let preds: Vec<crate::lossmetrics::PredictionList> = holdout_indices
                .iter()
                .zip(&probs)
                .map(|(&i, row)| crate::lossmetrics::PredictionList {
                    video_id: dataset.records[i].id.clone(),
                    items: crate::lossmetrics::top_n_of_row(row, cfg.eval_n),
                })
                .collect();
            crate::lossmetrics::gap_at_n(&preds, &holdout_truth, cfg.eval_n)?
        };
        history.push(EpochStat {
            fold,
            epoch,
            train_loss,
            oof_gap,
        });

        if holdout_indices.is_empty() {
            best_state = graph.state_snapshot();
        } else if oof_gap > best_gap {
            best_gap = oof_gap;
            best_state = graph.state_snapshot();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    graph.restore(&best_state);
    model.adopt_state(&graph)?;
    let holdout_probs = predict(&model, holdout_indices)?;
    let _ = truth;
    Ok((model, history, holdout_probs))
}

/// Freeze the students, concatenate their OOF penultimate features, and
/// train a fresh affine+sigmoid head on the soft labels. Per-fold heads
/// provide the head's own out-of-fold predictions; the deployable head is
/// trained on all records. The representative extractor kept per student
/// is its best-GAP fold model.
pub fn stack_penultimate(
    students: &[&TrainedCV],
    soft: &SoftLabelMatrix,
    dataset: &Dataset,
    folds: &FoldSplit,
    head_train_config: &TrainConfig,
) -> Result<StackedModel> {
    if students.is_empty() {
        return Err(Error::input("stack_penultimate: no students"));
    }
    for s in students {
        if &s.folds != folds {
            return Err(Error::input("stack_penultimate: fold split mismatch"));
        }
    }
    if soft.len() != dataset.records.len() {
        return Err(Error::input("soft labels do not cover the dataset"));
    }
    let mut cfg = head_train_config.clone();
    cfg.target_kind = TargetKind::Soft;
    if cfg.loss.kind != crate::models::LossKind::Bce {
        return Err(Error::input("the stacking head trains with BCE"));
    }
    cfg.validate()?;

    let features = stacked_features(students)?;
    let fold_indices = folds.fold_indices(dataset)?;
    let truth = dataset.noisy_truth();

    // Per-fold heads -> head OOF predictions.
    let per_fold = par::try_map_indices(folds.k, |f| {
        let holdout = &fold_indices[f];
        let train_idx: Vec<usize> = fold_indices
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        train_head(
            &features, soft, dataset, f, &train_idx, holdout, &cfg, &truth,
        )
    })?;

    let vocab = dataset.vocabulary_size as usize;
    let mut oof = vec![Vec::new(); dataset.records.len()];
    let mut history = Vec::new();
    for (f, (_, h, probs)) in per_fold.into_iter().enumerate() {
        for (&i, row) in fold_indices[f].iter().zip(probs) {
            oof[i] = row;
        }
        history.extend(h);
    }
    for row in &oof {
        if row.len() != vocab {
            return Err(Error::input("head OOF coverage incomplete"));
        }
    }

    // Deployable head: trained on every record.
    let all: Vec<usize> = (0..dataset.records.len()).collect();
    let (final_head, final_history, _) =
        train_head(&features, soft, dataset, folds.k, &all, &[], &cfg, &truth)?;
    history.extend(final_history);

    let representatives = students
        .iter()
        .map(|s| {
            let gaps = s.fold_gaps();
            let mut best = 0usize;
            for (i, &g) in gaps.iter().enumerate() {
                if g > gaps[best] {
                    best = i;
                }
            }
            s.fold_models[best].clone()
        })
        .collect();

    Ok(StackedModel {
        final_model: FinalModel {
            students: representatives,
            head: final_head,
        },
        oof,
        history,
    })
}

// ---------------------------------------------------------------------------
// budget

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BudgetReport {
    pub size_bytes: u64,
    pub budget_bytes: u64,
    pub pass: bool,
}

/// Compare the serialized size of the final model (all frozen students
/// plus the head) against a byte budget.
pub fn budget_check(final_model: &FinalModel, budget_bytes: u64) -> Result<BudgetReport> {
    let bytes = final_model_to_bytes(final_model)?;
    let size = bytes.len() as u64;
    Ok(BudgetReport {
        size_bytes: size,
        budget_bytes,
        pass: size <= budget_bytes,
    })
}

/// Final-model inference: concatenated student penultimate features fed to
/// the head.
pub fn predict_final(final_model: &FinalModel, dataset: &Dataset) -> Result<SoftLabelMatrix> {
    let indices: Vec<usize> = (0..dataset.records.len()).collect();
    let mut per_student = Vec::with_capacity(final_model.students.len());
    for s in &final_model.students {
        let feats = crate::models::featurize(&s.config, dataset)?;
        let out = crate::models::predict_records(s, &feats, &indices)?;
        per_student.push(out.penultimate);
    }
    let vocab = dataset.vocabulary_size as usize;
    let rows = dataset.records.len();
    let mut probs = Vec::with_capacity(rows);
    for r in 0..rows {
        let feat: Vec<f64> = per_student
            .iter()
            .flat_map(|p| p[r].iter().copied())
            .collect();
        let t = Tensor::new(vec![1, feat.len()], feat)?;
        let mut inputs = NamedTensors::new();
        inputs.insert("features".into(), t);
        let out = final_model.head.evaluate(&inputs)?;
        probs.push(out.probs.data()[..vocab].to_vec());
    }
    Ok(probs)
}
