//! Turning a final-stage mixture into ranked box predictions, plus the
//! two post-processing comparators: greedy NMS and its winner-take-all
//! (WTA) variant that re-assigns suppressed confidence to the suppressor.

use alloc::vec::Vec;

use crate::geometry::{iou, Box};
use crate::model::StageState;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bbox: Box,
    pub class_index: usize,
    /// `p_{k,c} · o_k` at creation; WTA may raise it afterwards.
    pub score: f64,
}

/// Extracts one prediction per component (its argmax class, score
/// `p_c · o`), ranked by score descending, truncated to `top_n`.
///
/// Component locations may drift slightly outside the unit square during
/// refinement; predicted boxes are clamped back to `[0, 1]`.
pub fn extract(final_stage: &StageState, top_n: usize) -> Vec<Prediction> {
    let mut preds: Vec<Prediction> = final_stage
        .mixture
        .components
        .iter()
        .map(|comp| {
            let mut class_index = 0;
            for (c, &p) in comp.p.iter().enumerate() {
                if p > comp.p[class_index] {
                    class_index = c;
                }
            }
            let [l, t, r, b] = comp.mu.map(|v| v.clamp(0.0, 1.0));
            Prediction {
                bbox: Box::new(l, t, r, b).expect("clamped coords form a valid box"),
                class_index,
                score: comp.p[class_index] * comp.o,
            }
        })
        .collect();
    sort_by_score(&mut preds);
    preds.truncate(top_n);
    preds
}

/// Stable score-descending order; ties keep the earlier element first.
fn sort_by_score(preds: &mut [Prediction]) {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let reordered: Vec<Prediction> = idx.iter().map(|&i| preds[i].clone()).collect();
    preds.clone_from_slice(&reordered);
}

/// Greedy per-class non-maximum suppression. A threshold of exactly
/// 1.0 disables suppression and returns the input unchanged.
pub fn nms(preds: &[Prediction], iou_thresh: f64) -> Vec<Prediction> {
    nms_groups(preds, iou_thresh)
        .into_iter()
        .map(|g| g.keeper)
        .collect()
}

/// NMS followed by winner-take-all: each suppressed prediction's score is
/// added to the keeper that removed it, clamped to 1.0.
pub fn wta(preds: &[Prediction], iou_thresh: f64) -> Vec<Prediction> {
    nms_groups(preds, iou_thresh)
        .into_iter()
        .map(|g| {
            let mut keeper = g.keeper;
            keeper.score = (keeper.score + g.absorbed).min(1.0);
            keeper
        })
        .collect()
}

struct Group {
    keeper: Prediction,
    absorbed: f64,
}

fn nms_groups(preds: &[Prediction], iou_thresh: f64) -> Vec<Group> {
    if iou_thresh >= 1.0 {
        return preds
            .iter()
            .map(|p| Group {
                keeper: p.clone(),
                absorbed: 0.0,
            })
            .collect();
    }
    let mut sorted = preds.to_vec();
    sort_by_score(&mut sorted);
    let mut groups: Vec<Group> = Vec::new();
    'outer: for p in sorted {
        for g in &mut groups {
            if g.keeper.class_index == p.class_index && iou(&g.keeper.bbox, &p.bbox) >= iou_thresh
            {
                g.absorbed += p.score;
                continue 'outer;
            }
        }
        groups.push(Group {
            keeper: p,
            absorbed: 0.0,
        });
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{ComponentParams, MixtureParams};
    use alloc::vec;

    fn pred(l: f64, t: f64, r: f64, b: f64, class_index: usize, score: f64) -> Prediction {
        Prediction {
            bbox: Box::new(l, t, r, b).unwrap(),
            class_index,
            score,
        }
    }

    fn stage(components: Vec<ComponentParams>) -> StageState {
        let num_classes = components[0].p.len();
        StageState {
            proposals: vec![],
            features: vec![],
            mixture: MixtureParams {
                components,
                num_classes,
            },
        }
    }

    fn comp(mu: [f64; 4], p: Vec<f64>, o: f64) -> ComponentParams {
        let k = p.len() as f64;
        ComponentParams {
            pi: 1.0 / k,
            mu,
            gamma: [0.1; 4],
            p,
            o,
        }
    }

    #[test]
    fn extract_single_component_example() {
        let s = stage(vec![comp([0.1, 0.1, 0.5, 0.5], vec![0.9, 0.1], 0.5)]);
        let preds = extract(&s, 10);
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].class_index, 0);
        assert!((preds[0].score - 0.45).abs() < 1e-15);
    }

    #[test]
    fn extract_ranks_and_truncates() {
        let s = stage(vec![
            comp([0.0, 0.0, 0.4, 0.4], vec![0.3, 0.7], 1.0 - 1e-12),
            comp([0.5, 0.5, 0.9, 0.9], vec![0.8, 0.2], 1.0 - 1e-12),
        ]);
        let top1 = extract(&s, 1);
        assert_eq!(top1.len(), 1);
        assert_eq!(top1[0].class_index, 0);
        assert!((top1[0].score - 0.8).abs() < 1e-9);
        // top_n larger than K returns K
        assert_eq!(extract(&s, 10).len(), 2);
    }

    #[test]
    fn extract_clamps_drifted_boxes_and_scores_stay_in_unit_interval() {
        let s = stage(vec![comp([-0.3, 0.2, 1.4, 0.8], vec![0.6, 0.4], 0.9)]);
        let preds = extract(&s, 1);
        assert_eq!(preds[0].bbox.coords(), [0.0, 0.2, 1.0, 0.8]);
        assert!(preds[0].score >= 0.0 && preds[0].score <= 1.0);
    }

    #[test]
    fn nms_threshold_one_is_exact_identity() {
        let preds = vec![
            pred(0.0, 0.0, 1.0, 1.0, 0, 0.2),
            pred(0.0, 0.0, 1.0, 1.0, 1, 0.9),
        ];
        // even ordering is preserved
        assert_eq!(nms(&preds, 1.0), preds);
    }

    #[test]
    fn nms_suppresses_same_class_duplicates_only() {
        let preds = vec![
            pred(0.1, 0.1, 0.5, 0.5, 0, 0.8),
            pred(0.1, 0.1, 0.5, 0.5, 0, 0.9),
        ];
        let kept = nms(&preds, 0.5);
        assert_eq!(kept.len(), 1);
        assert!((kept[0].score - 0.9).abs() < 1e-15);

        // identical boxes of different classes both survive
        let preds = vec![
            pred(0.1, 0.1, 0.5, 0.5, 1, 0.8),
            pred(0.1, 0.1, 0.5, 0.5, 0, 0.9),
        ];
        assert_eq!(nms(&preds, 0.5).len(), 2);
    }

    #[test]
    fn nms_keeps_disjoint_boxes() {
        let preds = vec![
            pred(0.0, 0.0, 0.3, 0.3, 0, 0.5),
            pred(0.6, 0.6, 0.9, 0.9, 0, 0.4),
        ];
        assert_eq!(nms(&preds, 0.1).len(), 2);
    }

    #[test]
    fn nms_is_idempotent_and_output_is_below_threshold() {
        let mut preds = Vec::new();
        for i in 0..10 {
            let x = i as f64 * 0.07;
            preds.push(pred(x, 0.1, x + 0.3, 0.5, i % 3, 0.1 + 0.08 * i as f64));
        }
        let once = nms(&preds, 0.4);
        assert_eq!(nms(&once, 0.4), once);
        for i in 0..once.len() {
            for j in i + 1..once.len() {
                if once[i].class_index == once[j].class_index {
                    assert!(iou(&once[i].bbox, &once[j].bbox) < 0.4);
                }
            }
        }
    }

    #[test]
    fn nms_breaks_score_ties_by_input_order() {
        let preds = vec![
            pred(0.1, 0.1, 0.5, 0.5, 1, 0.7),
            pred(0.12, 0.1, 0.52, 0.5, 1, 0.7),
        ];
        let kept = nms(&preds, 0.5);
        assert_eq!(kept.len(), 1);
        // the stable sort keeps the first of two tied inputs on top
        assert_eq!(kept[0].bbox, preds[0].bbox);
    }

    #[test]
    fn wta_merges_three_overlapping_boxes() {
        let preds = vec![
            pred(0.1, 0.1, 0.5, 0.5, 0, 0.40),
            pred(0.1, 0.1, 0.5, 0.5, 0, 0.40),
            pred(0.1, 0.1, 0.5, 0.5, 0, 0.13),
        ];
        let merged = wta(&preds, 0.5);
        assert_eq!(merged.len(), 1);
        assert!((merged[0].score - 0.93).abs() < 1e-12);
    }

    #[test]
    fn wta_without_overlaps_is_identity() {
        let preds = vec![
            pred(0.0, 0.0, 0.3, 0.3, 0, 0.5),
            pred(0.6, 0.6, 0.9, 0.9, 1, 0.4),
        ];
        assert_eq!(wta(&preds, 0.5), nms(&preds, 0.5));
    }

    #[test]
    fn wta_clamps_merged_scores_at_one() {
        let preds = vec![
            pred(0.1, 0.1, 0.5, 0.5, 0, 0.9),
            pred(0.1, 0.1, 0.5, 0.5, 0, 0.8),
        ];
        let merged = wta(&preds, 0.5);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].score, 1.0);
    }

    #[test]
    fn wta_conserves_score_mass_without_clamping() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            let mut preds = Vec::with_capacity(n);
            for _ in 0..n {
                let l = rng.gen_range(0.0..0.6);
                let t = rng.gen_range(0.0..0.6);
                let w = rng.gen_range(0.05..0.4);
                let h = rng.gen_range(0.05..0.4);
                preds.push(pred(l, t, l + w, t + h, 0, rng.gen_range(0.0..0.08)));
            }
            let before: f64 = preds.iter().map(|p| p.score).sum();
            let after: f64 = wta(&preds, 0.5).iter().map(|p| p.score).sum();
            assert!((before - after).abs() < 1e-12);
        }
    }
}
