//! Desk-scale detection metrics: average precision/recall, expected
//! calibration error with reliability bins, a duplicate-prediction rate,
//! confidence histograms, and per-stage loss diagnostics.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::{GroundTruth, Scene};
use crate::geometry::iou;
use crate::inference::Prediction;
use crate::losses::{mcm_loss, nll_loss, StageLoss};
use crate::math;
use crate::mixture::MixtureParams;
use crate::model::{forward, ModelConfig, ModelError, Weights};

/// The ten COCO-style IoU thresholds `0.5, 0.55, …, 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub const DEFAULT_ECE_BINS: usize = 10;
pub const DEFAULT_ECE_IOU: f64 = 0.5;
pub const DUP_IOU: f64 = 0.7;
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalError {
    /// Metrics over precision/recall are undefined without ground truths.
    NoGroundTruths,
    MismatchedScenes,
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::NoGroundTruths => write!(f, "dataset contains no ground truths"),
            EvalError::MismatchedScenes => {
                write!(f, "prediction and ground-truth scene lists differ in length")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EvalError {}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub mean_conf: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    pub ece: f64,
    pub dup_rate: f64,
    pub reliability_bins: Vec<ReliabilityBin>,
    pub per_stage_losses: Vec<StageLoss>,
}

/// Flags each prediction as TP or FP by score-descending greedy matching:
/// a prediction is a true positive if some unmatched same-class ground
/// truth in its scene overlaps it with IoU ≥ `iou_thresh` (the best such
/// GT is consumed). Returns flags in global rank order plus the ranking.
fn match_flags(
    preds_by_scene: &[Vec<Prediction>],
    gts_by_scene: &[Vec<GroundTruth>],
    iou_thresh: f64,
) -> (Vec<bool>, Vec<(usize, usize)>) {
    // global order: score descending, ties by (scene, index) for determinism
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (si, preds) in preds_by_scene.iter().enumerate() {
        for pi in 0..preds.len() {
            order.push((si, pi));
        }
    }
    order.sort_by(|&(sa, pa), &(sb, pb)| {
        preds_by_scene[sb][pb]
            .score
            .partial_cmp(&preds_by_scene[sa][pa].score)
            .unwrap()
            .then((sa, pa).cmp(&(sb, pb)))
    });

    let mut gt_used: Vec<Vec<bool>> = gts_by_scene.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(order.len());
    for &(si, pi) in &order {
        let p = &preds_by_scene[si][pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts_by_scene[si].iter().enumerate() {
            if gt_used[si][gi] || g.class_index() != Some(p.class_index) {
                continue;
            }
            let ov = iou(&p.bbox, &g.bbox);
            if ov >= iou_thresh && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[si][gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    (flags, order)
}

/// Average precision at one IoU threshold: pooled score-descending greedy
/// matching followed by the all-point-interpolated precision-recall
/// integral.
pub fn average_precision(
    preds_by_scene: &[Vec<Prediction>],
    gts_by_scene: &[Vec<GroundTruth>],
    iou_thresh: f64,
) -> Result<f64, EvalError> {
    let (flags, n_gts) = checked_flags(preds_by_scene, gts_by_scene, iou_thresh)?;
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(flags.len());
    for (rank, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push((
            tp as f64 / n_gts as f64,
            tp as f64 / (rank + 1) as f64,
        ));
    }
    // all-point interpolation: running-max precision envelope from the
    // right, integrated over recall increments
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(recall, _)) in points.iter().enumerate() {
        ap += (recall - prev_recall) * envelope[i];
        prev_recall = recall;
    }
    Ok(ap)
}

fn checked_flags(
    preds_by_scene: &[Vec<Prediction>],
    gts_by_scene: &[Vec<GroundTruth>],
    iou_thresh: f64,
) -> Result<(Vec<bool>, usize), EvalError> {
    if preds_by_scene.len() != gts_by_scene.len() {
        return Err(EvalError::MismatchedScenes);
    }
    let n_gts: usize = gts_by_scene.iter().map(|g| g.len()).sum();
    if n_gts == 0 {
        return Err(EvalError::NoGroundTruths);
    }
    let (flags, _) = match_flags(preds_by_scene, gts_by_scene, iou_thresh);
    Ok((flags, n_gts))
}

/// Mean AP over the ten COCO IoU thresholds.
pub fn coco_ap(
    preds_by_scene: &[Vec<Prediction>],
    gts_by_scene: &[Vec<GroundTruth>],
) -> Result<f64, EvalError> {
    let ts = coco_iou_thresholds();
    let mut sum = 0.0;
    for t in &ts {
        sum += average_precision(preds_by_scene, gts_by_scene, *t)?;
    }
    Ok(sum / ts.len() as f64)
}

/// Mean recall (matched GTs over all GTs) over the ten COCO thresholds.
pub fn coco_ar(
    preds_by_scene: &[Vec<Prediction>],
    gts_by_scene: &[Vec<GroundTruth>],
) -> Result<f64, EvalError> {
    let ts = coco_iou_thresholds();
    let mut sum = 0.0;
    for t in &ts {
        let (flags, n_gts) = checked_flags(preds_by_scene, gts_by_scene, *t)?;
        let tp = flags.iter().filter(|&&f| f).count();
        sum += tp as f64 / n_gts as f64;
    }
    Ok(sum / ts.len() as f64)
}

/// Expected calibration error over equal-width score bins; a prediction
/// counts as accurate iff it is a TP under the greedy matching rule.
/// Zero predictions yield ECE 0 with no bins.
pub fn ece(
    preds_by_scene: &[Vec<Prediction>],
    gts_by_scene: &[Vec<GroundTruth>],
    n_bins: usize,
    iou_thresh: f64,
) -> Result<(f64, Vec<ReliabilityBin>), EvalError> {
    if preds_by_scene.len() != gts_by_scene.len() {
        return Err(EvalError::MismatchedScenes);
    }
    let n: usize = preds_by_scene.iter().map(|p| p.len()).sum();
    if n == 0 {
        return Ok((0.0, vec![]));
    }
    let (flags, order) = match_flags(preds_by_scene, gts_by_scene, iou_thresh);

    let mut counts = vec![0usize; n_bins];
    let mut conf_sums = vec![0.0; n_bins];
    let mut acc_sums = vec![0.0; n_bins];
    for (&(si, pi), &is_tp) in order.iter().zip(&flags) {
        let score = preds_by_scene[si][pi].score;
        let bin = ((score * n_bins as f64) as usize).min(n_bins - 1);
        counts[bin] += 1;
        conf_sums[bin] += score;
        acc_sums[bin] += if is_tp { 1.0 } else { 0.0 };
    }

    let mut total = 0.0;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let (mean_conf, accuracy) = if counts[b] > 0 {
            (conf_sums[b] / counts[b] as f64, acc_sums[b] / counts[b] as f64)
        } else {
            (0.0, 0.0)
        };
        total += counts[b] as f64 / n as f64 * math::abs(accuracy - mean_conf);
        bins.push(ReliabilityBin {
            bin_lo: b as f64 / n_bins as f64,
            bin_hi: (b + 1) as f64 / n_bins as f64,
            count: counts[b],
            mean_conf,
            accuracy,
        });
    }
    Ok((total, bins))
}

/// Fraction of predictions overlapping a higher-ranked prediction of the
/// same scene with IoU > 0.7 (class-agnostic; rank is score descending,
/// ties to the earlier prediction).
pub fn dup_rate(preds_by_scene: &[Vec<Prediction>]) -> f64 {
    let mut total = 0usize;
    let mut dups = 0usize;
    for preds in preds_by_scene {
        total += preds.len();
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| {
            preds[b]
                .score
                .partial_cmp(&preds[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        for (rank, &i) in order.iter().enumerate() {
            if order[..rank]
                .iter()
                .any(|&j| iou(&preds[i].bbox, &preds[j].bbox) > DUP_IOU)
            {
                dups += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        dups as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    /// Equal-width bin counts over `[0, 1]`; values ≥ 1 land in the last bin.
    pub counts: Vec<usize>,
}

impl Histogram {
    fn new(bins: usize) -> Self {
        Self {
            counts: vec![0; bins],
        }
    }

    fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let idx = ((v.max(0.0) * bins as f64) as usize).min(bins - 1);
        self.counts[idx] += 1;
    }
}

/// 20-bin histograms over every raw mixture component's best class
/// probability `p`, objectness `o`, and confidence `p·o`.
pub fn histograms(mixtures: &[MixtureParams]) -> (Histogram, Histogram, Histogram) {
    let mut h_p = Histogram::new(HISTOGRAM_BINS);
    let mut h_o = Histogram::new(HISTOGRAM_BINS);
    let mut h_po = Histogram::new(HISTOGRAM_BINS);
    for m in mixtures {
        for comp in &m.components {
            let p_max = comp.p.iter().cloned().fold(0.0, f64::max);
            h_p.add(p_max);
            h_o.add(comp.o);
            h_po.add(p_max * comp.o);
        }
    }
    (h_p, h_o, h_po)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageDiagnostics {
    pub mean_nll: f64,
    /// Mean over scenes of `exp(−L_MCM)` — the average ratio of the best
    /// component's likelihood to the full mixture likelihood.
    pub mean_exp_neg_mcm: f64,
}

/// Per-stage mean NLL and mean `exp(−L_MCM)` over every scene with at
/// least one ground truth.
pub fn stage_diagnostics(
    scenes: &[Scene],
    weights: &Weights,
    cfg: &ModelConfig,
) -> Result<Vec<StageDiagnostics>, ModelError> {
    let mut nll_sums = vec![0.0; cfg.num_stages];
    let mut ratio_sums = vec![0.0; cfg.num_stages];
    let mut count = 0usize;
    for scene in scenes {
        if scene.gts.is_empty() {
            continue;
        }
        count += 1;
        let states = forward(scene, weights, cfg)?;
        for (s, state) in states.iter().enumerate() {
            nll_sums[s] += nll_loss(&scene.gts, &state.mixture)?;
            ratio_sums[s] += math::exp(-mcm_loss(&scene.gts, &state.mixture)?);
        }
    }
    let denom = count.max(1) as f64;
    Ok((0..cfg.num_stages)
        .map(|s| StageDiagnostics {
            mean_nll: nll_sums[s] / denom,
            mean_exp_neg_mcm: ratio_sums[s] / denom,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box;
    use alloc::vec;

    fn pred(l: f64, t: f64, r: f64, b: f64, class: usize, score: f64) -> Prediction {
        Prediction {
            bbox: Box::new(l, t, r, b).unwrap(),
            class_index: class,
            score,
        }
    }

    fn gt(l: f64, t: f64, r: f64, b: f64, class: usize) -> GroundTruth {
        GroundTruth::new(Box::new(l, t, r, b).unwrap(), class, 4)
    }

    #[test]
    fn perfect_detector_has_ap_one() {
        let gts = vec![vec![gt(0.1, 0.1, 0.4, 0.4, 0), gt(0.5, 0.5, 0.9, 0.9, 2)]];
        let preds = vec![vec![
            pred(0.1, 0.1, 0.4, 0.4, 0, 1.0),
            pred(0.5, 0.5, 0.9, 0.9, 2, 1.0),
        ]];
        let ap = average_precision(&preds, &gts, 0.5).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
        assert!((coco_ap(&preds, &gts).unwrap() - 1.0).abs() < 1e-12);
        assert!((coco_ar(&preds, &gts).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_predictions_gives_ap_zero() {
        let gts = vec![vec![gt(0.1, 0.1, 0.4, 0.4, 0)]];
        let preds: Vec<Vec<Prediction>> = vec![vec![]];
        assert_eq!(average_precision(&preds, &gts, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn no_ground_truths_is_an_error() {
        let preds = vec![vec![pred(0.1, 0.1, 0.4, 0.4, 0, 0.9)]];
        let gts: Vec<Vec<GroundTruth>> = vec![vec![]];
        assert_eq!(
            average_precision(&preds, &gts, 0.5).unwrap_err(),
            EvalError::NoGroundTruths
        );
    }

    #[test]
    fn duplicate_prediction_walkthrough() {
        // 1 GT, two predictions on it: the 0.9 one is TP, the 0.8 one FP.
        // PR points: (1, 1) then (1, 0.5); all-point envelope integrates
        // to exactly 1.
        let gts = vec![vec![gt(0.1, 0.1, 0.5, 0.5, 1)]];
        let preds = vec![vec![
            pred(0.1, 0.1, 0.5, 0.5, 1, 0.9),
            pred(0.1, 0.1, 0.5, 0.5, 1, 0.8),
        ]];
        let ap = average_precision(&preds, &gts, 0.5).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missed_gt_halves_recall() {
        let gts = vec![vec![gt(0.1, 0.1, 0.4, 0.4, 0), gt(0.6, 0.6, 0.9, 0.9, 0)]];
        let preds = vec![vec![pred(0.1, 0.1, 0.4, 0.4, 0, 0.9)]];
        let ap = average_precision(&preds, &gts, 0.5).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
        let (flags, _) = match_flags(&preds, &gts, 0.5);
        assert_eq!(flags, vec![true]);
    }

    #[test]
    fn class_mismatch_is_a_false_positive() {
        let gts = vec![vec![gt(0.1, 0.1, 0.4, 0.4, 0)]];
        let preds = vec![vec![pred(0.1, 0.1, 0.4, 0.4, 1, 0.9)]];
        assert_eq!(average_precision(&preds, &gts, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn appending_lower_scored_false_positives_never_raises_ap() {
        let gts = vec![vec![gt(0.1, 0.1, 0.4, 0.4, 0), gt(0.6, 0.6, 0.9, 0.9, 1)]];
        let mut preds = vec![vec![
            pred(0.1, 0.1, 0.4, 0.4, 0, 0.9),
            pred(0.6, 0.6, 0.9, 0.9, 1, 0.7),
        ]];
        let mut last = average_precision(&preds, &gts, 0.5).unwrap();
        for i in 0..5 {
            // far-off-target boxes at strictly decreasing scores
            preds[0].push(pred(0.0, 0.0, 0.05, 0.05, 2, 0.5 - 0.05 * i as f64));
            let ap = average_precision(&preds, &gts, 0.5).unwrap();
            assert!(ap <= last + 1e-12);
            last = ap;
        }
    }

    #[test]
    fn ece_hand_example() {
        // 2 preds at conf 0.8 with accuracy 0.5, 2 at conf 0.4 with
        // accuracy 0.5, 2 bins -> 0.5·0.3 + 0.5·0.1 = 0.2
        let gts = vec![vec![gt(0.1, 0.1, 0.4, 0.4, 0), gt(0.6, 0.6, 0.9, 0.9, 0)]];
        let preds = vec![vec![
            pred(0.1, 0.1, 0.4, 0.4, 0, 0.8),  // TP
            pred(0.1, 0.1, 0.4, 0.4, 0, 0.8),  // duplicate -> FP
            pred(0.6, 0.6, 0.9, 0.9, 0, 0.4),  // TP
            pred(0.6, 0.6, 0.9, 0.9, 0, 0.4),  // duplicate -> FP
        ]];
        let (e, bins) = ece(&preds, &gts, 2, 0.5).unwrap();
        assert!((e - 0.2).abs() < 1e-12);
        assert_eq!(bins.len(), 2);
        assert_eq!(bins[0].count, 2);
        assert!((bins[0].accuracy - 0.5).abs() < 1e-12);
        assert!((bins[1].mean_conf - 0.8).abs() < 1e-12);
    }

    #[test]
    fn perfectly_calibrated_predictions_have_zero_ece() {
        let gts = vec![vec![gt(0.1, 0.1, 0.4, 0.4, 0)]];
        let preds = vec![vec![pred(0.1, 0.1, 0.4, 0.4, 0, 1.0)]];
        let (e, _) = ece(&preds, &gts, 10, 0.5).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn single_bin_ece_reduces_to_conf_accuracy_gap() {
        let gts = vec![vec![gt(0.1, 0.1, 0.4, 0.4, 0)]];
        let preds = vec![vec![
            pred(0.1, 0.1, 0.4, 0.4, 0, 0.6), // TP
            pred(0.7, 0.7, 0.9, 0.9, 0, 0.6), // FP
        ]];
        let (e, _) = ece(&preds, &gts, 1, 0.5).unwrap();
        // accuracy 0.5, confidence 0.6
        assert!((e - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_predictions_yield_empty_reliability() {
        let gts = vec![vec![gt(0.1, 0.1, 0.4, 0.4, 0)]];
        let preds: Vec<Vec<Prediction>> = vec![vec![]];
        let (e, bins) = ece(&preds, &gts, 10, 0.5).unwrap();
        assert_eq!(e, 0.0);
        assert!(bins.is_empty());
    }

    #[test]
    fn ece_is_permutation_invariant() {
        let gts = vec![vec![gt(0.1, 0.1, 0.4, 0.4, 0), gt(0.6, 0.6, 0.9, 0.9, 1)]];
        let a = vec![vec![
            pred(0.1, 0.1, 0.4, 0.4, 0, 0.7),
            pred(0.6, 0.6, 0.9, 0.9, 1, 0.3),
            pred(0.2, 0.2, 0.45, 0.45, 0, 0.5),
        ]];
        let b = vec![vec![a[0][2].clone(), a[0][0].clone(), a[0][1].clone()]];
        assert_eq!(ece(&a, &gts, 10, 0.5).unwrap().0, ece(&b, &gts, 10, 0.5).unwrap().0);
    }

    #[test]
    fn dup_rate_counts_heavy_overlaps_only() {
        let preds = vec![vec![
            pred(0.1, 0.1, 0.5, 0.5, 0, 0.9),
            pred(0.1, 0.1, 0.5, 0.5, 1, 0.8),  // duplicate of the first
            pred(0.6, 0.6, 0.9, 0.9, 0, 0.7),  // disjoint
        ]];
        assert!((dup_rate(&preds) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(dup_rate(&[vec![]]), 0.0);
    }

    #[test]
    fn histograms_bin_as_expected() {
        use crate::mixture::ComponentParams;
        let m = MixtureParams {
            components: vec![
                ComponentParams {
                    pi: 0.5,
                    mu: [0.1, 0.1, 0.5, 0.5],
                    gamma: [0.1; 4],
                    p: vec![1.0, 0.0],
                    o: 1.0,
                },
                ComponentParams {
                    pi: 0.5,
                    mu: [0.1, 0.1, 0.5, 0.5],
                    gamma: [0.1; 4],
                    p: vec![0.5, 0.5],
                    o: 1.0,
                },
            ],
            num_classes: 2,
        };
        let (h_p, h_o, h_po) = histograms(&[m]);
        // o ≡ 1 -> all mass in the last bin, and p·o equals p
        assert_eq!(h_o.counts[HISTOGRAM_BINS - 1], 2);
        assert_eq!(h_o.counts.iter().sum::<usize>(), 2);
        assert_eq!(h_p.counts, h_po.counts);
        assert_eq!(h_p.counts[HISTOGRAM_BINS - 1], 1); // p_max = 1.0
        assert_eq!(h_p.counts[10], 1); // p_max = 0.5
    }

    #[test]
    fn stage_diagnostics_reports_one_row_per_stage() {
        use crate::data::{generate, GenConfig};
        use crate::model::ModelConfig;
        let cfg = ModelConfig {
            num_stages: 2,
            num_proposals: 6,
            num_classes: 4,
            hidden_sizes: vec![8],
            out_size: 2,
            topk_ratio: 1.0,
            seed: 3,
        };
        let w = Weights::init(&cfg);
        let scenes = generate(19, 6, &GenConfig::default()).unwrap();
        let diags = stage_diagnostics(&scenes, &w, &cfg).unwrap();
        assert_eq!(diags.len(), 2);
        for d in &diags {
            assert!(d.mean_nll.is_finite());
            assert!(d.mean_exp_neg_mcm > 0.0 && d.mean_exp_neg_mcm <= 1.0);
        }
    }

    #[test]
    fn single_component_mixture_has_ratio_one() {
        use crate::data::{generate, GenConfig};
        use crate::model::ModelConfig;
        let cfg = ModelConfig {
            num_stages: 1,
            num_proposals: 1,
            num_classes: 4,
            hidden_sizes: vec![8],
            out_size: 2,
            topk_ratio: 1.0,
            seed: 3,
        };
        let w = Weights::init(&cfg);
        let scenes = generate(23, 8, &GenConfig::default()).unwrap();
        let diags = stage_diagnostics(&scenes, &w, &cfg).unwrap();
        assert!((diags[0].mean_exp_neg_mcm - 1.0).abs() < 1e-12);
    }
}
