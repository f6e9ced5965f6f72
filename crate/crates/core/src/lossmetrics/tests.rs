use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::rng::Rng;

fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn truth_of(entries: &[(&str, &[u32])]) -> GroundTruth {
    entries
        .iter()
        .map(|(id, labels)| {
            (
                id.to_string(),
                labels.iter().copied().collect::<BTreeSet<_>>(),
            )
        })
        .collect()
}

fn preds_of(id: &str, items: &[(u32, f64)]) -> PredictionList {
    PredictionList {
        video_id: id.to_string(),
        items: items.to_vec(),
    }
}

// ---------------------------------------------------------------------------
// BCE

#[test]
fn bce_is_tiny_when_predictions_equal_hard_targets() {
    let p = t2(1, 2, vec![1.0, 0.0]);
    let t = t2(1, 2, vec![1.0, 0.0]);
    let loss = bce(&p, &t).unwrap();
    assert!(loss <= 1e-6, "loss {loss}");
}

#[test]
fn bce_at_half_is_ln2() {
    let p = t2(2, 2, vec![0.5; 4]);
    let t = t2(2, 2, vec![1.0, 0.0, 0.3, 0.8]);
    let loss = bce(&p, &t).unwrap();
    assert!((loss - 2.0_f64.ln()).abs() < 1e-12);
}

#[test]
fn bce_matches_direct_formula() {
    // -(ln 0.9 + ln 0.8) / 2
    let p = t2(1, 2, vec![0.9, 0.2]);
    let t = t2(1, 2, vec![1.0, 0.0]);
    let expected = -(0.9_f64.ln() + 0.8_f64.ln()) / 2.0;
    let loss = bce(&p, &t).unwrap();
    assert!((loss - expected).abs() < 1e-12);
    assert!((loss - 0.164252).abs() < 1e-6);
}

#[test]
fn bce_shape_mismatch_is_input_error() {
    let p = t2(1, 2, vec![0.5, 0.5]);
    let t = t2(2, 1, vec![0.5, 0.5]);
    assert!(bce(&p, &t).is_err());
}

#[test]
fn bce_minimized_at_target_on_grid() {
    // bce(p, t) >= bce(t, t) pointwise.
    for ti in 0..=10 {
        let t_val = ti as f64 / 10.0;
        let t = t2(1, 1, vec![t_val]);
        let floor = bce(&t2(1, 1, vec![t_val]), &t).unwrap();
        for pi in 0..=20 {
            let p_val = pi as f64 / 20.0;
            let loss = bce(&t2(1, 1, vec![p_val]), &t).unwrap();
            assert!(
                loss >= floor - 1e-12,
                "bce({p_val}, {t_val}) = {loss} < floor {floor}"
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Ranking losses

fn single_pair(p: f64, n: f64) -> (Tensor, Tensor) {
    (t2(1, 2, vec![p, n]), t2(1, 2, vec![1.0, 0.0]))
}

#[test]
fn soft_rank_single_pair_values() {
    // p - n = 1 -> exponent 0 -> ln 2
    let (s, l) = single_pair(1.0, 0.0);
    let loss = soft_rank_loss(&s, &l, 30, PairScope::Batch).unwrap();
    assert!((loss - 2.0_f64.ln()).abs() < 1e-12);
    assert!((loss - 0.693147).abs() < 1e-6);

    // p == n -> ln(1 + e)
    let (s, l) = single_pair(0.3, 0.3);
    let loss = soft_rank_loss(&s, &l, 30, PairScope::Batch).unwrap();
    assert!((loss - (1.0 + std::f64::consts::E).ln()).abs() < 1e-12);
    assert!((loss - 1.313262).abs() < 1e-6);

    // p - n = 2 -> ln(1 + e^-1)
    let (s, l) = single_pair(2.0, 0.0);
    let loss = soft_rank_loss(&s, &l, 30, PairScope::Batch).unwrap();
    assert!((loss - (-1.0_f64).exp().ln_1p()).abs() < 1e-12);
    assert!((loss - 0.313262).abs() < 1e-6);
}

#[test]
fn hinge_rank_values() {
    let (s, l) = single_pair(1.5, 0.0);
    assert_eq!(
        hinge_rank_loss(&s, &l, 1.0, 30, PairScope::Batch).unwrap(),
        0.0
    );

    let (s, l) = single_pair(0.3, 0.3);
    assert_eq!(
        hinge_rank_loss(&s, &l, 1.0, 30, PairScope::Batch).unwrap(),
        1.0
    );

    let (s, l) = single_pair(0.5, 0.0);
    assert_eq!(
        hinge_rank_loss(&s, &l, 1.0, 30, PairScope::Batch).unwrap(),
        0.5
    );
}

#[test]
fn rank_loss_requires_positives_and_negatives() {
    let s = t2(1, 2, vec![0.5, 0.2]);
    let all_pos = t2(1, 2, vec![1.0, 1.0]);
    let all_neg = t2(1, 2, vec![0.0, 0.0]);
    assert!(soft_rank_loss(&s, &all_pos, 30, PairScope::Batch).is_err());
    assert!(soft_rank_loss(&s, &all_neg, 30, PairScope::Batch).is_err());
}

#[test]
fn rank_loss_top_k_selects_hardest_negatives() {
    // Negatives scored 0.9 and 0.1; with top_k = 1 only the 0.9 one pairs.
    let s = t2(1, 3, vec![0.5, 0.9, 0.1]);
    let l = t2(1, 3, vec![1.0, 0.0, 0.0]);
    let loss = soft_rank_loss(&s, &l, 1, PairScope::Batch).unwrap();
    let direct = (0.9_f64 - 0.5 + 1.0).exp().ln_1p();
    assert!((loss - direct).abs() < 1e-12);
}

#[test]
fn soft_rank_monotone_in_scores() {
    // Strictly decreasing in a positive score, strictly increasing in a
    // selected negative score.
    let mut rng = Rng::new(3);
    for _ in 0..50 {
        let b = 2;
        let l = 6;
        let mut scores = Vec::with_capacity(b * l);
        let mut labels = Vec::with_capacity(b * l);
        for r in 0..b {
            for c in 0..l {
                scores.push(rng.next_f64());
                labels.push(if (r + c) % 3 == 0 { 1.0 } else { 0.0 });
            }
        }
        let s = t2(b, l, scores.clone());
        let lab = t2(b, l, labels.clone());
        let base = soft_rank_loss(&s, &lab, 30, PairScope::Batch).unwrap();

        let pos_idx = labels.iter().position(|&v| v == 1.0).unwrap();
        let mut bumped = scores.clone();
        bumped[pos_idx] += 0.05;
        let up = soft_rank_loss(&t2(b, l, bumped), &lab, 30, PairScope::Batch).unwrap();
        assert!(up < base, "raising a positive must lower the loss");

        let neg_idx = labels.iter().position(|&v| v == 0.0).unwrap();
        let mut bumped = scores.clone();
        bumped[neg_idx] += 0.05;
        let up = soft_rank_loss(&t2(b, l, bumped), &lab, 30, PairScope::Batch).unwrap();
        assert!(up > base, "raising a top negative must raise the loss");
    }
}

// ---------------------------------------------------------------------------
// GAP@n: oracle and examples

/// Independent O(N^2) reference: pooled list, precision recomputed from
/// scratch at every rank.
pub fn gap_brute_force(predictions: &[PredictionList], truth: &GroundTruth, n: usize) -> f64 {
    #[derive(Clone)]
    struct E {
        score: f64,
        video: String,
        label: u32,
    }
    let mut pool = Vec::new();
    for pl in predictions {
        for &(label, score) in pl.items.iter().take(n) {
            pool.push(E {
                score,
                video: pl.video_id.clone(),
                label,
            });
        }
    }
    pool.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.video.cmp(&b.video))
            .then_with(|| a.label.cmp(&b.label))
    });
    let is_pos = |e: &E| {
        truth
            .get(&e.video)
            .map(|s| s.contains(&e.label))
            .unwrap_or(false)
    };
    let mut sum = 0.0;
    for i in 0..pool.len() {
        if is_pos(&pool[i]) {
            let mut correct = 0;
            for e in pool.iter().take(i + 1) {
                if is_pos(e) {
                    correct += 1;
                }
            }
            sum += correct as f64 / (i + 1) as f64;
        }
    }
    let m: usize = truth.values().map(|s| s.len()).sum();
    sum / m as f64
}

#[test]
fn gap_perfect_ranking_is_one() {
    let truth = truth_of(&[("v1", &[0, 1])]);
    let preds = vec![preds_of("v1", &[(0, 0.9), (1, 0.8), (2, 0.1)])];
    assert_eq!(gap_at_n(&preds, &truth, 20).unwrap(), 1.0);
}

#[test]
fn gap_single_inversion_is_half() {
    let truth = truth_of(&[("v1", &[0])]);
    let preds = vec![preds_of("v1", &[(1, 0.9), (0, 0.8)])];
    let gap = gap_at_n(&preds, &truth, 20).unwrap();
    assert_eq!(gap, 0.5);
    assert_eq!(gap, gap_brute_force(&preds, &truth, 20));
}

#[test]
fn gap_no_correct_predictions_is_zero() {
    let truth = truth_of(&[("v1", &[5])]);
    let preds = vec![preds_of("v1", &[(1, 0.9), (2, 0.8)])];
    assert_eq!(gap_at_n(&preds, &truth, 20).unwrap(), 0.0);
}

#[test]
fn gap_counts_unpredicted_positives_in_m() {
    // Two positives, only one ranked: sum of precisions is 1, M = 2.
    let truth = truth_of(&[("v1", &[0, 7])]);
    let preds = vec![preds_of("v1", &[(0, 0.9)])];
    assert_eq!(gap_at_n(&preds, &truth, 20).unwrap(), 0.5);
}

#[test]
fn gap_empty_truth_is_input_error() {
    let truth = GroundTruth::new();
    let preds = vec![preds_of("v1", &[(0, 0.9)])];
    assert!(gap_at_n(&preds, &truth, 20).is_err());
}

#[test]
fn gap_duplicate_pair_is_input_error() {
    let truth = truth_of(&[("v1", &[0])]);
    let preds = vec![preds_of("v1", &[(0, 0.9), (0, 0.8)])];
    assert!(gap_at_n(&preds, &truth, 20).is_err());
}

#[test]
fn gap_matches_brute_force_on_random_instances() {
    let mut rng = Rng::new(20240416);
    for _ in 0..1000 {
        let videos = 1 + rng.next_below(12) as usize;
        let labels = 1 + rng.next_below(10) as usize;
        let mut truth = GroundTruth::new();
        let mut preds = Vec::new();
        for v in 0..videos {
            let id = format!("v{v:02}");
            let mut pos = BTreeSet::new();
            for lab in 0..labels {
                if rng.next_f64() < 0.3 {
                    pos.insert(lab as u32);
                }
            }
            if !pos.is_empty() {
                truth.insert(id.clone(), pos);
            }
            let mut items: Vec<(u32, f64)> = (0..labels as u32)
                .map(|lab| (lab, rng.next_f64()))
                .collect();
            items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            items.truncate(1 + rng.next_below(labels as u64) as usize);
            preds.push(PredictionList {
                video_id: id,
                items,
            });
        }
        if truth.is_empty() {
            continue;
        }
        let fast = gap_at_n(&preds, &truth, 5).unwrap();
        let slow = gap_brute_force(&preds, &truth, 5);
        assert!(
            (fast - slow).abs() < 1e-12,
            "gap {fast} vs brute force {slow}"
        );
    }
}

proptest! {
    #[test]
    fn gap_invariant_under_monotone_score_transforms(seed in 0u64..200) {
        // argsort invariance: applying a strictly increasing function to
        // every score leaves GAP unchanged.
        let mut rng = Rng::new(seed);
        let videos = 2 + rng.next_below(6) as usize;
        let labels = 4 + rng.next_below(6) as usize;
        let mut truth = GroundTruth::new();
        let mut preds = Vec::new();
        for v in 0..videos {
            let id = format!("v{v}");
            let mut pos = BTreeSet::new();
            while pos.is_empty() {
                for lab in 0..labels {
                    if rng.next_f64() < 0.4 {
                        pos.insert(lab as u32);
                    }
                }
            }
            truth.insert(id.clone(), pos);
            let mut items: Vec<(u32, f64)> = (0..labels as u32)
                .map(|lab| (lab, rng.next_f64()))
                .collect();
            items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            preds.push(PredictionList { video_id: id, items });
        }
        let base = gap_at_n(&preds, &truth, 4).unwrap();
        let transformed: Vec<PredictionList> = preds
            .iter()
            .map(|pl| PredictionList {
                video_id: pl.video_id.clone(),
                items: pl.items.iter().map(|&(l, s)| (l, (3.0 * s).exp())).collect(),
            })
            .collect();
        let mapped = gap_at_n(&transformed, &truth, 4).unwrap();
        prop_assert!((base - mapped).abs() < 1e-12);
    }
}

#[test]
fn top_n_sorts_desc_with_label_tiebreak() {
    let row = vec![0.2, 0.9, 0.2, 0.7];
    let top = top_n_of_row(&row, 3);
    assert_eq!(top, vec![(1, 0.9), (3, 0.7), (0, 0.2)]);
}
