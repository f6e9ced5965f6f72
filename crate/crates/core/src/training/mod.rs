//! Mixup augmentation and the cross-validated training loop producing
//! per-fold models and out-of-fold predictions.

mod config;


pub use config::{MixupConfig, TargetKind, TrainConfig};

use std::collections::BTreeMap;

use crate::dataio::{Dataset, FoldSplit};
use crate::diffcore::{AdamState, NamedTensors, Tensor};
use crate::error::{Error, Result};
use crate::lossmetrics::{gap_at_n, top_n_of_row, GroundTruth, PredictionList};
use crate::models::{
    batch_inputs, featurize, predict_records, LossKind, Model, ModelConfig, RecordFeatures,
};
use crate::par;
use crate::rng::{derive_seed, Rng};

const SEED_MODEL_INIT: u64 = 0x4d4f_4445;
const SEED_TRAIN_STREAM: u64 = 0x5452_4149;

/// Targets for cross-validated training: the dataset's noisy labels, or a
/// full-coverage soft-label matrix in dataset record order.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    HardNoisy,
    Soft(&'a [Vec<f64>]),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStat {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub oof_gap: f64,
}

/// Per-fold models, full-coverage out-of-fold predictions, and training
/// history.
#[derive(Debug, Clone)]
pub struct TrainedCV {
    pub fold_models: Vec<Model>,
    /// One row per dataset record, predicted by the model whose fold held
    /// that record out.
    pub oof: Vec<Vec<f64>>,
    /// Penultimate activations aligned with `oof`.
    pub oof_penultimate: Vec<Vec<f64>>,
    pub history: Vec<EpochStat>,
    pub folds: FoldSplit,
    pub distilled: bool,
}

impl TrainedCV {
    /// Per-fold best OOF GAP from the history.
    pub fn fold_gaps(&self) -> Vec<f64> {
        let mut best = vec![f64::NEG_INFINITY; self.folds.k];
        for stat in &self.history {
            if stat.oof_gap > best[stat.fold] {
                best[stat.fold] = stat.oof_gap;
            }
        }
        best
    }
}

// ---------------------------------------------------------------------------
// mixup

/// Convex combinations of a batch with a seeded partner permutation:
/// `x = L x_i + (1 - L) x_j`, same for targets, `L ~ Beta(alpha, alpha)`
/// drawn once per batch or once per example.
pub fn mixup_batch(
    inputs: &NamedTensors,
    targets: &Tensor,
    alpha: f64,
    rng: &mut Rng,
    per_example: bool,
) -> Result<(NamedTensors, Tensor)> {
    let batch = targets.shape()[0];
    if batch < 2 {
        return Err(Error::input("mixup needs a batch of at least 2"));
    }
    if alpha <= 0.0 {
        return Err(Error::input("mixup alpha must be positive"));
    }
    let partners = rng.permutation(batch);
    let lambdas: Vec<f64> = if per_example {
        (0..batch).map(|_| rng.next_beta(alpha, alpha)).collect()
    } else {
        vec![rng.next_beta(alpha, alpha); batch]
    };
    mixup_with(inputs, targets, &partners, &lambdas)
}

/// Deterministic core of [`mixup_batch`]: explicit partners and lambdas.
pub fn mixup_with(
    inputs: &NamedTensors,
    targets: &Tensor,
    partners: &[usize],
    lambdas: &[f64],
) -> Result<(NamedTensors, Tensor)> {
    let batch = targets.shape()[0];
    if partners.len() != batch || lambdas.len() != batch {
        return Err(Error::input("mixup: partner/lambda length mismatch"));
    }
    if targets.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::input("mixup targets must lie in [0,1]"));
    }
    let mix_tensor = |t: &Tensor| -> Result<Tensor> {
        if t.shape()[0] != batch {
            return Err(Error::input(format!(
                "mixup: tensor batch {} does not match target batch {batch}",
                t.shape()[0]
            )));
        }
        let row = t.len() / batch;
        let mut out = t.clone();
        for b in 0..batch {
            let l = lambdas[b];
            let p = partners[b];
            for i in 0..row {
                out.data_mut()[b * row + i] =
                    l * t.data()[b * row + i] + (1.0 - l) * t.data()[p * row + i];
            }
        }
        Ok(out)
    };
    let mut mixed_inputs = NamedTensors::new();
    for (name, tensor) in inputs {
        mixed_inputs.insert(name.clone(), mix_tensor(tensor)?);
    }
    Ok((mixed_inputs, mix_tensor(targets)?))
}

// ---------------------------------------------------------------------------
// targets

fn hard_rows(dataset: &Dataset, indices: &[usize]) -> Vec<Vec<f64>> {
    let vocab = dataset.vocabulary_size as usize;
    indices
        .iter()
        .map(|&i| {
            let mut row = vec![0.0; vocab];
            for &l in &dataset.records[i].noisy_labels {
                row[l as usize] = 1.0;
            }
            row
        })
        .collect()
}

fn target_tensor(dataset: &Dataset, targets: Targets<'_>, indices: &[usize]) -> Result<Tensor> {
    let vocab = dataset.vocabulary_size as usize;
    let rows: Vec<Vec<f64>> = match targets {
        Targets::HardNoisy => hard_rows(dataset, indices),
        Targets::Soft(matrix) => {
            if matrix.len() != dataset.records.len() {
                return Err(Error::input(format!(
                    "soft-label matrix has {} rows, dataset has {}",
                    matrix.len(),
                    dataset.records.len()
                )));
            }
            indices.iter().map(|&i| matrix[i].clone()).collect()
        }
    };
    let mut data = Vec::with_capacity(indices.len() * vocab);
    for r in &rows {
        if r.len() != vocab {
            return Err(Error::input("target row width does not match vocabulary"));
        }
        data.extend_from_slice(r);
    }
    Tensor::new(vec![indices.len(), vocab], data)
}

// ---------------------------------------------------------------------------
// the loop

struct FoldOutcome {
    model: Model,
    holdout_probs: Vec<Vec<f64>>,
    holdout_penultimate: Vec<Vec<f64>>,
    history: Vec<EpochStat>,
}

/// Train one model on `train_indices`, early-stopping on the hold-out GAP
/// when `holdout_indices` is non-empty; returns the best-epoch model.
fn train_fold(
    dataset: &Dataset,
    features: &[RecordFeatures],
    fold: usize,
    train_indices: &[usize],
    holdout_indices: &[usize],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    targets: Targets<'_>,
) -> Result<FoldOutcome> {
    // Every fold starts from the same initialization (only the data and
    // the training stream differ). Independently initialized fold models
    // would place their hidden units in arbitrary permutations, and the
    // concatenated OOF penultimate features would change meaning from
    // fold to fold, which no single stacking head can fit.
    let mut model = Model::init(model_config, derive_seed(cfg.seed, &[SEED_MODEL_INIT]))?;
    let mut graph = model.training_graph(&cfg.loss)?;
    let loss_node = graph.output_node("loss")?;
    let mut adam = AdamState::new(cfg.adam, graph.params());
    let mut rng = Rng::new(derive_seed(cfg.seed, &[SEED_TRAIN_STREAM, fold as u64]));

    let holdout_truth: GroundTruth = holdout_indices
        .iter()
        .map(|&i| &dataset.records[i])
        .filter(|r| !r.noisy_labels.is_empty())
        .map(|r| (r.id.clone(), r.noisy_labels.clone()))
        .collect();

    let mut order: Vec<usize> = train_indices.to_vec();
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
                continue; // batch-norm and mixup need at least a pair
            }
            let mut inputs = batch_inputs(&model.config, features, chunk)?;
            let mut target = target_tensor(dataset, targets, chunk)?;
            if let Some(m) = &cfg.mixup {
                let (mi, mt) = mixup_batch(&inputs, &target, m.alpha, &mut rng, m.per_example)?;
                inputs = mi;
                target = mt;
            }
            inputs.insert("target".into(), target);
            let eval = graph.evaluate_train(&inputs, &mut rng)?;
            loss_sum += eval.value(loss_node).scalar_value()?;
            let grads = graph.backward(&eval, loss_node)?;
            graph.commit_bn_updates(&eval);
            adam.step(graph.params_mut(), &grads)?;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::input(
                "no trainable batches (fewer than 2 training records?)",
            ));
        }
        let train_loss = loss_sum / batches as f64;

        let oof_gap = if holdout_indices.is_empty() || holdout_truth.is_empty() {
            0.0
        } else {
            model.adopt_state(&graph)?;
            let out = predict_records(&model, features, holdout_indices)?;
            let preds: Vec<PredictionList> = holdout_indices
                .iter()
                .zip(&out.probs)
                .map(|(&i, row)| PredictionList {
                    video_id: dataset.records[i].id.clone(),
                    items: top_n_of_row(row, cfg.eval_n),
                })
                .collect();
            gap_at_n(&preds, &holdout_truth, cfg.eval_n)?
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
    let (holdout_probs, holdout_penultimate) = if holdout_indices.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let out = predict_records(&model, features, holdout_indices)?;
        (out.probs, out.penultimate)
    };
    Ok(FoldOutcome {
        model,
        holdout_probs,
        holdout_penultimate,
        history,
    })
}

/// Cross-validated training: for every fold, train on the rest and predict
/// the hold-out fold in eval mode. Deterministic given the seed; folds may
/// train concurrently (results are merged by fold index).
pub fn train_cv(
    dataset: &Dataset,
    folds: &FoldSplit,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    targets: Targets<'_>,
) -> Result<TrainedCV> {
    cfg.validate()?;
    folds.validate(dataset)?;
    if let (Targets::Soft(_), LossKind::SoftRank | LossKind::HingeRank) = (targets, cfg.loss.kind) {
        return Err(Error::input(
            "soft targets are incompatible with ranking losses; use BCE",
        ));
    }
    if let (Targets::Soft(m), _) = (targets, ()) {
        if m.len() != dataset.records.len() {
            return Err(Error::input("soft-label matrix does not cover the dataset"));
        }
    }

    let features = featurize(model_config, dataset)?;
    let fold_indices = folds.fold_indices(dataset)?;

    let outcomes: Vec<FoldOutcome> = par::try_map_indices(folds.k, |f| {
        let holdout = &fold_indices[f];
        let train_idx: Vec<usize> = fold_indices
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        train_fold(
            dataset,
            &features,
            f,
            &train_idx,
            holdout,
            model_config,
            cfg,
            targets,
        )
    })?;

    let vocab = dataset.vocabulary_size as usize;
    let mut oof = vec![Vec::new(); dataset.records.len()];
    let mut oof_penultimate = vec![Vec::new(); dataset.records.len()];
    let mut fold_models = Vec::with_capacity(folds.k);
    let mut history = Vec::new();
    for (f, outcome) in outcomes.into_iter().enumerate() {
        for (&i, (probs, penult)) in fold_indices[f].iter().zip(
            outcome
                .holdout_probs
                .into_iter()
                .zip(outcome.holdout_penultimate),
        ) {
            oof[i] = probs;
            oof_penultimate[i] = penult;
        }
        fold_models.push(outcome.model);
        history.extend(outcome.history);
    }
    for (i, row) in oof.iter().enumerate() {
        if row.len() != vocab {
            return Err(Error::input(format!(
                "record {i} missing from out-of-fold coverage"
            )));
        }
    }

    Ok(TrainedCV {
        fold_models,
        oof,
        oof_penultimate,
        history,
        folds: folds.clone(),
        distilled: false,
    })
}

/// Single-split training without cross-validation (used by tests and the
/// stacking head). Empty holdout disables early stopping.
pub fn train_single(
    dataset: &Dataset,
    train_indices: &[usize],
    holdout_indices: &[usize],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    targets: Targets<'_>,
) -> Result<(Model, Vec<EpochStat>)> {
    cfg.validate()?;
    let features = featurize(model_config, dataset)?;
    let outcome = train_fold(
        dataset,
        &features,
        0,
        train_indices,
        holdout_indices,
        model_config,
        cfg,
        targets,
    )?;
    Ok((outcome.model, outcome.history))
}

/// Rebuild a [`TrainedCV`] from already-trained fold models (e.g. loaded
/// from disk): recompute the out-of-fold probabilities and penultimate
/// activations by running each fold model on its hold-out fold.
pub fn rebuild_cv(
    dataset: &Dataset,
    folds: &FoldSplit,
    fold_models: Vec<Model>,
    history: Vec<EpochStat>,
    distilled: bool,
) -> Result<TrainedCV> {
    if fold_models.len() != folds.k {
        return Err(Error::input(format!(
            "{} fold models for {} folds",
            fold_models.len(),
            folds.k
        )));
    }
    folds.validate(dataset)?;
    let fold_indices = folds.fold_indices(dataset)?;
    let outputs = par::try_map_indices(folds.k, |f| {
        let features = featurize(&fold_models[f].config, dataset)?;
        predict_records(&fold_models[f], &features, &fold_indices[f])
    })?;
    let vocab = dataset.vocabulary_size as usize;
    let mut oof = vec![Vec::new(); dataset.records.len()];
    let mut oof_penultimate = vec![Vec::new(); dataset.records.len()];
    for (f, out) in outputs.into_iter().enumerate() {
        for (&i, (probs, penult)) in fold_indices[f]
            .iter()
            .zip(out.probs.into_iter().zip(out.penultimate))
        {
            oof[i] = probs;
            oof_penultimate[i] = penult;
        }
    }
    for row in &oof {
        if row.len() != vocab {
            return Err(Error::input("rebuilt OOF coverage incomplete"));
        }
    }
    Ok(TrainedCV {
        fold_models,
        oof,
        oof_penultimate,
        history,
        folds: folds.clone(),
        distilled,
    })
}

/// OOF predictions of a trained CV as ranked lists, truncated to n.
pub fn oof_prediction_lists(
    dataset: &Dataset,
    trained: &TrainedCV,
    n: usize,
) -> Vec<PredictionList> {
    dataset
        .records
        .iter()
        .zip(&trained.oof)
        .map(|(r, row)| PredictionList {
            video_id: r.id.clone(),
            items: top_n_of_row(row, n),
        })
        .collect()
}

/// GAP of a full prediction matrix against a ground truth, truncated to n.
pub fn matrix_gap(
    dataset: &Dataset,
    matrix: &[Vec<f64>],
    truth: &GroundTruth,
    n: usize,
) -> Result<f64> {
    let preds: Vec<PredictionList> = dataset
        .records
        .iter()
        .zip(matrix)
        .map(|(r, row)| PredictionList {
            video_id: r.id.clone(),
            items: top_n_of_row(row, n),
        })
        .collect();
    gap_at_n(&preds, truth, n)
}

/// Convenience map kept for callers that need id-indexed OOF rows.
pub fn oof_by_id<'a>(dataset: &'a Dataset, trained: &'a TrainedCV) -> BTreeMap<&'a str, &'a [f64]> {
    dataset
        .records
        .iter()
        .zip(&trained.oof)
        .map(|(r, row)| (r.id.as_str(), row.as_slice()))
        .collect()
}
