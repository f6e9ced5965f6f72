use tempfile::tempdir;

use super::*;
use crate::dataio::{generate_synthetic, make_folds, GenConfig, NoiseConfig};
use crate::diffcore::AdamConfig;
use crate::models::{serialize_model, LossKind, LossSpec, Modality, ResNetLikeConfig};
use crate::rng::Rng;
use crate::training::matrix_gap;

fn dataset(videos: usize, seed: u64) -> crate::dataio::Dataset {
    let gen = GenConfig {
        num_videos: videos,
        vocabulary_size: 12,
        d_v: 8,
        d_a: 4,
        max_labels_per_video: 3,
        feature_noise: 0.25,
        audio_informativeness: 0.5,
        audio_noise: 0.25,
        frames: None,
    };
    generate_synthetic(
        &gen,
        &NoiseConfig {
            fn_rate: 0.3,
            fp_rate: 0.5,
            seed: seed ^ 1,
        },
        seed,
    )
    .unwrap()
    .dataset
}

fn small_model() -> ModelConfig {
    ModelConfig::ResNetLike(ResNetLikeConfig {
        inner_size: 12,
        av_id_block_num: 0,
        concat_id_block_num: 1,
        dropout: 0.0,
        modality: Modality::Both,
        vocabulary_size: 12,
        d_v: 8,
        d_a: 4,
        frame_stat_features: false,
    })
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        adam: AdamConfig {
            learning_rate: 1e-2,
            ..Default::default()
        },
        mixup: None,
        patience: 3,
        seed,
        eval_n: 10,
        ..Default::default()
    }
}

fn trained_pair(ds: &crate::dataio::Dataset) -> (crate::dataio::FoldSplit, TrainedCV, TrainedCV) {
    let folds = make_folds(ds, 3, 7).unwrap();
    let a = crate::training::train_cv(
        ds,
        &folds,
        &small_model(),
        &quick_cfg(1),
        crate::training::Targets::HardNoisy,
    )
    .unwrap();
    let b = crate::training::train_cv(
        ds,
        &folds,
        &small_model(),
        &quick_cfg(2),
        crate::training::Targets::HardNoisy,
    )
    .unwrap();
    (folds, a, b)
}

// ---------------------------------------------------------------------------
// oof_soft_labels

#[test]
fn soft_labels_match_single_model_oof() {
    let ds = dataset(15, 3);
    let (_, a, _) = trained_pair(&ds);
    let mats = oof_soft_labels(&[&a]).unwrap();
    assert_eq!(mats.len(), 1);
    assert_eq!(mats[0], a.oof);
    assert_eq!(mats[0].len(), ds.records.len());
}

#[test]
fn soft_labels_are_clamped_and_full_coverage() {
    let ds = dataset(15, 4);
    let (_, a, b) = trained_pair(&ds);
    for m in oof_soft_labels(&[&a, &b]).unwrap() {
        assert_eq!(m.len(), ds.records.len());
        for row in &m {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn fold_mismatch_is_input_error() {
    let ds = dataset(15, 5);
    let (_, a, _) = trained_pair(&ds);
    let other_folds = make_folds(&ds, 3, 99).unwrap();
    let mut b = a.clone();
    b.folds = other_folds;
    assert!(oof_soft_labels(&[&a, &b]).is_err());
}

// ---------------------------------------------------------------------------
// combine

#[test]
fn combine_weight_one_returns_first_matrix() {
    let ds = dataset(10, 6);
    let (_, a, b) = trained_pair(&ds);
    let mats = oof_soft_labels(&[&a, &b]).unwrap();
    let combined = combine(&mats, &[1.0, 0.0]).unwrap();
    assert_eq!(combined, mats[0]);
}

#[test]
fn combine_equal_weights_is_elementwise_mean() {
    let a = vec![vec![0.2, 0.8], vec![1.0, 0.0]];
    let b = vec![vec![0.4, 0.4], vec![0.0, 1.0]];
    let combined = combine(&[a.clone(), b.clone()], &[0.5, 0.5]).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            assert!((combined[r][c] - (a[r][c] + b[r][c]) / 2.0).abs() < 1e-15);
        }
    }
}

#[test]
fn combine_three_matrices_spot_value() {
    let a = vec![vec![1.0]];
    let b = vec![vec![0.5]];
    let c = vec![vec![0.0]];
    let combined = combine(&[a, b, c], &[0.5, 0.3, 0.2]).unwrap();
    // 0.5*1 + 0.3*0.5 + 0.2*0 = 0.65
    assert!((combined[0][0] - 0.65).abs() < 1e-15);
}

#[test]
fn combine_preserves_unit_interval() {
    let mut rng = Rng::new(8);
    let mats: Vec<SoftLabelMatrix> = (0..3)
        .map(|_| {
            (0..5)
                .map(|_| (0..4).map(|_| rng.next_f64()).collect())
                .collect()
        })
        .collect();
    let combined = combine(&mats, &[0.2, 0.3, 0.5]).unwrap();
    for row in &combined {
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn combine_rejects_non_simplex_weights() {
    let a = vec![vec![0.5]];
    assert!(combine(&[a.clone()], &[0.7]).is_err());
    assert!(combine(&[a.clone(), a.clone()], &[1.5, -0.5]).is_err());
    assert!(combine(&[a], &[0.5, 0.5]).is_err());
}

// ---------------------------------------------------------------------------
// fit_ensemble_weights

#[test]
fn single_model_gets_weight_one() {
    let ds = dataset(15, 7);
    let (_, a, _) = trained_pair(&ds);
    let mats = oof_soft_labels(&[&a]).unwrap();
    let w = fit_ensemble_weights(&mats, &ds, &ds.noisy_truth(), 10).unwrap();
    assert_eq!(w.weights, vec![1.0]);
    assert_eq!(w.achieved_gap, w.singleton_gaps[0]);
}

#[test]
fn identical_models_keep_weight_on_the_first() {
    let ds = dataset(15, 8);
    let (_, a, _) = trained_pair(&ds);
    let mats = oof_soft_labels(&[&a, &a]).unwrap();
    let w = fit_ensemble_weights(&mats, &ds, &ds.noisy_truth(), 10).unwrap();
    // No transfer can strictly improve a combination of identical models.
    assert_eq!(w.weights, vec![1.0, 0.0]);
    assert!((w.achieved_gap - w.singleton_gaps[0]).abs() < 1e-15);
}

#[test]
fn oracle_model_dominates_random_scores() {
    // Model A scores = clean-label indicator (an oracle); model B = seeded
    // noise. The fitted weights must lean on A and never fall below B.
    let ds = dataset(40, 9);
    let truth = ds.noisy_truth();
    let vocab = ds.vocabulary_size as usize;
    let mut rng = Rng::new(123);
    let oracle: SoftLabelMatrix = ds
        .records
        .iter()
        .map(|r| {
            (0..vocab as u32)
                .map(|l| {
                    if r.noisy_labels.contains(&l) {
                        0.99
                    } else {
                        0.01
                    }
                })
                .collect()
        })
        .collect();
    let noise: SoftLabelMatrix = ds
        .records
        .iter()
        .map(|_| (0..vocab).map(|_| rng.next_f64()).collect())
        .collect();
    let mats = vec![oracle, noise];
    let w = fit_ensemble_weights(&mats, &ds, &truth, 10).unwrap();
    assert!(w.weights[0] >= 0.95, "oracle weight {:?}", w.weights);
    assert!(w.achieved_gap >= w.singleton_gaps[1]);
    assert!(w.achieved_gap >= w.singleton_gaps[0] - 1e-12);
}

#[test]
fn achieved_gap_never_below_best_singleton() {
    let ds = dataset(25, 10);
    let (_, a, b) = trained_pair(&ds);
    let mats = oof_soft_labels(&[&a, &b]).unwrap();
    let truth = ds.noisy_truth();
    let w = fit_ensemble_weights(&mats, &ds, &truth, 10).unwrap();
    let best = w
        .singleton_gaps
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(w.achieved_gap >= best - 1e-9);
    // The weights actually achieve the reported GAP.
    let combined = combine(&mats, &w.weights).unwrap();
    let check = matrix_gap(&ds, &combined, &truth, 10).unwrap();
    assert!((check - w.achieved_gap).abs() < 1e-9);
}

// ---------------------------------------------------------------------------
// distill_student

#[test]
fn distilling_onehot_soft_labels_reproduces_hard_training() {
    let ds = dataset(15, 11);
    let folds = make_folds(&ds, 3, 7).unwrap();
    let onehot: SoftLabelMatrix = ds
        .records
        .iter()
        .map(|r| {
            (0..12u32)
                .map(|l| {
                    if r.noisy_labels.contains(&l) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let cfg = quick_cfg(13);
    let hard = crate::training::train_cv(
        &ds,
        &folds,
        &small_model(),
        &cfg,
        crate::training::Targets::HardNoisy,
    )
    .unwrap();
    let distilled = distill_student(&onehot, &ds, &folds, &small_model(), &cfg).unwrap();
    assert_eq!(hard.oof, distilled.oof);
    assert_eq!(hard.history, distilled.history);
    assert!(distilled.distilled);
}

#[test]
fn distill_rejects_ranking_loss() {
    let ds = dataset(12, 12);
    let folds = make_folds(&ds, 3, 7).unwrap();
    let soft: SoftLabelMatrix = vec![vec![0.5; 12]; 12];
    let mut cfg = quick_cfg(1);
    cfg.loss = LossSpec {
        kind: LossKind::SoftRank,
        ..Default::default()
    };
    assert!(distill_student(&soft, &ds, &folds, &small_model(), &cfg).is_err());
}

#[test]
fn distillation_is_deterministic() {
    let ds = dataset(15, 14);
    let folds = make_folds(&ds, 3, 7).unwrap();
    let soft: SoftLabelMatrix = ds
        .records
        .iter()
        .enumerate()
        .map(|(i, _)| (0..12).map(|c| ((i * 7 + c) % 10) as f64 / 10.0).collect())
        .collect();
    let a = distill_student(&soft, &ds, &folds, &small_model(), &quick_cfg(5)).unwrap();
    let b = distill_student(&soft, &ds, &folds, &small_model(), &quick_cfg(5)).unwrap();
    assert_eq!(a.oof, b.oof);
}

// ---------------------------------------------------------------------------
// stacking

#[test]
fn stacked_head_width_and_frozen_students() {
    let ds = dataset(18, 15);
    let (folds, a, b) = trained_pair(&ds);
    let soft = combine(&oof_soft_labels(&[&a, &b]).unwrap(), &[0.5, 0.5]).unwrap();

    // Byte-snapshot student parameters before stacking.
    let dir = tempdir().unwrap();
    let before_a = dir.path().join("a.model");
    serialize_model(&a.fold_models[0], &before_a).unwrap();

    let stacked = stack_penultimate(&[&a, &b], &soft, &ds, &folds, &quick_cfg(3)).unwrap();
    // Head input width = sum of penultimate widths (12 + 12).
    match &stacked.final_model.head.config {
        ModelConfig::StackHead(c) => assert_eq!(c.input_dim, 24),
        other => panic!("unexpected head config {other:?}"),
    }
    assert_eq!(stacked.final_model.students.len(), 2);
    assert_eq!(stacked.oof.len(), ds.records.len());

    // Students byte-identical after head training.
    let after_a = dir.path().join("a_after.model");
    serialize_model(&a.fold_models[0], &after_a).unwrap();
    assert_eq!(
        std::fs::read(&before_a).unwrap(),
        std::fs::read(&after_a).unwrap()
    );
}

#[test]
fn zero_initialized_head_outputs_half() {
    let cfg = ModelConfig::StackHead(crate::models::StackHeadConfig {
        input_dim: 4,
        vocabulary_size: 3,
    });
    let mut head = crate::models::Model::init(&cfg, 1).unwrap();
    head.graph
        .params_mut()
        .insert("head.w".into(), crate::diffcore::Tensor::zeros(&[4, 3]));
    head.graph
        .params_mut()
        .insert("head.b".into(), crate::diffcore::Tensor::zeros(&[3]));
    let mut inputs = crate::diffcore::NamedTensors::new();
    inputs.insert(
        "features".into(),
        crate::diffcore::Tensor::new(vec![2, 4], vec![1.0, -2.0, 3.0, 0.5, 0.0, 1.0, 2.0, -1.0])
            .unwrap(),
    );
    let out = head.evaluate(&inputs).unwrap();
    assert!(out.probs.data().iter().all(|&p| p == 0.5));
}

#[test]
fn separable_features_keep_stacked_gap_at_least_student_gap() {
    // A student whose penultimate features are linearly separable w.r.t.
    // the soft-label argmax: the stacked head must recover at least the
    // student's OOF GAP.
    let ds = dataset(30, 16);
    let folds = make_folds(&ds, 3, 7).unwrap();
    let vocab = ds.vocabulary_size as usize;
    let cfg = quick_cfg(4);
    let mut student = crate::training::train_cv(
        &ds,
        &folds,
        &small_model(),
        &cfg,
        crate::training::Targets::HardNoisy,
    )
    .unwrap();

    // Make the penultimate features *be* the soft labels: trivially
    // separable for an affine head.
    let soft: SoftLabelMatrix = student.oof.clone();
    student.oof_penultimate = soft.clone();

    let head_cfg = TrainConfig {
        epochs: 200,
        batch_size: 10,
        adam: AdamConfig {
            learning_rate: 5e-2,
            ..Default::default()
        },
        mixup: None,
        patience: 200,
        seed: 9,
        eval_n: 10,
        ..Default::default()
    };
    let stacked = stack_penultimate(&[&student], &soft, &ds, &folds, &head_cfg).unwrap();
    let truth = ds.noisy_truth();
    let student_gap = matrix_gap(&ds, &student.oof, &truth, 10).unwrap();
    let stacked_gap = matrix_gap(&ds, &stacked.oof, &truth, 10).unwrap();
    assert!(
        stacked_gap >= student_gap - 1e-6,
        "stacked {stacked_gap} vs student {student_gap}"
    );
    let _ = vocab;
}

// ---------------------------------------------------------------------------
// budget + container

#[test]
fn budget_check_and_container_round_trip() {
    let ds = dataset(12, 17);
    let (folds, a, b) = trained_pair(&ds);
    let soft = combine(&oof_soft_labels(&[&a, &b]).unwrap(), &[0.5, 0.5]).unwrap();
    let stacked = stack_penultimate(&[&a, &b], &soft, &ds, &folds, &quick_cfg(3)).unwrap();

    let report = budget_check(&stacked.final_model, 50 * 1024 * 1024).unwrap();
    assert!(report.pass);
    assert!(report.size_bytes > 0);
    let zero = budget_check(&stacked.final_model, 0).unwrap();
    assert!(!zero.pass);

    // Measured size equals the analytic sum of parts.
    let dir = tempdir().unwrap();
    let path = dir.path().join("final.ldnc");
    let manifest = write_final_model(&path, &stacked.final_model).unwrap();
    assert_eq!(
        manifest.total_bytes,
        std::fs::metadata(&path).unwrap().len()
    );
    let parts: u64 = manifest.student_bytes.iter().sum::<u64>() + manifest.head_bytes;
    let framing = 4 + 4 + 4 + 8 * (manifest.student_bytes.len() as u64) + 8;
    assert_eq!(manifest.total_bytes, parts + framing);

    let loaded = read_final_model(&path).unwrap();
    assert_eq!(loaded.students.len(), 2);
    let direct = predict_final(&stacked.final_model, &ds).unwrap();
    let via_file = predict_final(&loaded, &ds).unwrap();
    assert_eq!(direct, via_file);
}
