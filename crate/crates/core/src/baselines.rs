//! Bipartite-matching training baselines: the classic detection recipe of
//! matching predictions to ground truths with the Hungarian algorithm and
//! supervising only the matched pairs, in three variants, plus ground-truth
//! copy-paste replication.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::data::{GroundTruth, Scene};
use crate::geometry::{giou_grad, Box};
use crate::losses::{loss_backward_with_max, ParamGrads, StopGradConfig};
use crate::math;
use crate::mixture::{
    cauchy_logpdf_1d_grad, component_loglik, component_logliks, ComponentParams, MixtureError,
    MixtureParams, PROB_FLOOR,
};
use crate::model::{
    train_with_objective, ModelConfig, StageRecord, TrainConfig, TrainError, TrainOutcome, Weights,
};

/// Weights of the three matching-cost terms: cross-entropy, coordinate L1,
/// and (1 − GIoU).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w1: 2.0,
            w2: 5.0,
            w3: 2.0,
        }
    }
}

/// `w1·(−log p_c) + w2·‖μ − b‖₁ + w3·(1 − GIoU(μ, b))`.
pub fn match_cost(
    gt: &GroundTruth,
    comp: &ComponentParams,
    weights: &CostWeights,
) -> Result<f64, MixtureError> {
    let c = gt
        .class_index()
        .ok_or(MixtureError::NotOneHot)?;
    if c >= comp.p.len() {
        return Err(MixtureError::InvalidDistribution);
    }
    let ce = -math::ln(comp.p[c].clamp(PROB_FLOOR, 1.0));
    let b = gt.bbox.coords();
    let l1: f64 = (0..4).map(|j| math::abs(comp.mu[j] - b[j])).sum();
    let mu_box = mu_as_box(&comp.mu);
    let (g, _) = giou_grad(&mu_box, &gt.bbox);
    Ok(weights.w1 * ce + weights.w2 * l1 + weights.w3 * (1.0 - g))
}

fn mu_as_box(mu: &[f64; 4]) -> Box {
    Box::unnormalized(mu[0], mu[1], mu[2], mu[3]).expect("μ is sanitized to a valid box")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(gt_index, component_index)` pairs, sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchError {
    MoreRowsThanColumns { rows: usize, cols: usize },
    NonFiniteCost,
    RaggedMatrix,
}

impl fmt::Display for MatchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchError::MoreRowsThanColumns { rows, cols } => {
                write!(f, "cannot match {rows} rows into {cols} columns")
            }
            MatchError::NonFiniteCost => write!(f, "cost matrix contains a non-finite entry"),
            MatchError::RaggedMatrix => write!(f, "cost matrix rows have unequal lengths"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MatchError {}

/// Minimum-cost injective assignment of every row to a distinct column
/// (rows ≤ columns), via the O(n³) augmenting-path formulation with dual
/// potentials. Exact; ties resolve toward lower column indices.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult, MatchError> {
    let n = cost.len();
    if n == 0 {
        return Ok(MatchResult {
            pairs: vec![],
            total_cost: 0.0,
        });
    }
    let m = cost[0].len();
    if cost.iter().any(|row| row.len() != m) {
        return Err(MatchError::RaggedMatrix);
    }
    if n > m {
        return Err(MatchError::MoreRowsThanColumns { rows: n, cols: m });
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MatchError::NonFiniteCost);
    }

    // 1-indexed; index 0 is the scratch row/column of the classic scheme
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok(MatchResult { pairs, total_cost })
}

/// Which matched-pair objective drives the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Separate cross-entropy + L1 + GIoU losses on matched pairs, plus a
    /// log-loss pushing unmatched components toward zero objectness.
    Eq1SeparateLosses,
    /// Matching cost and objective are both the per-component NLL.
    MatchedNll,
    /// Full mixture NLL plus the min-cost-matching term, with the "max"
    /// component picked by bipartite matching instead of the argmax.
    NllPlusMcmBipartite,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Eq1SeparateLosses => "eq1-separate-losses",
            Variant::MatchedNll => "matched-nll",
            Variant::NllPlusMcmBipartite => "nll-plus-mcm-bipartite",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eq1-separate-losses" => Ok(Variant::Eq1SeparateLosses),
            "matched-nll" => Ok(Variant::MatchedNll),
            "nll-plus-mcm-bipartite" => Ok(Variant::NllPlusMcmBipartite),
            other => Err(format!("unknown baseline variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteConfig {
    pub variant: Variant,
    /// Number of times each ground truth is replicated before matching.
    pub copies: usize,
    pub cost_weights: CostWeights,
}

impl Default for BipartiteConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Eq1SeparateLosses,
            copies: 1,
            cost_weights: CostWeights::default(),
        }
    }
}

/// Per-stage loss and mixture-parameter gradients for one scene under the
/// chosen baseline variant. Returns `None` when the replicated ground
/// truths outnumber the components of any stage (the scene is skipped).
pub fn bipartite_scene_objective(
    scene: &Scene,
    records: &[StageRecord],
    bcfg: &BipartiteConfig,
    beta: f64,
    sg: &StopGradConfig,
) -> Result<Option<(f64, Vec<ParamGrads>)>, TrainError> {
    let mut rep_gts: Vec<GroundTruth> = Vec::with_capacity(scene.gts.len() * bcfg.copies);
    for g in &scene.gts {
        for _ in 0..bcfg.copies {
            rep_gts.push(g.clone());
        }
    }
    if records
        .iter()
        .any(|r| rep_gts.len() > r.mixture.components.len())
    {
        return Ok(None);
    }

    let mut total = 0.0;
    let mut grads = Vec::with_capacity(records.len());
    for rec in records {
        let (loss, g) = match bcfg.variant {
            Variant::Eq1SeparateLosses => {
                eq1_stage(&rep_gts, &rec.mixture, &bcfg.cost_weights)?
            }
            Variant::MatchedNll => matched_nll_stage(&rep_gts, &rec.mixture)?,
            Variant::NllPlusMcmBipartite => {
                bipartite_mcm_stage(&rep_gts, &rec.mixture, beta, sg)?
            }
        };
        total += loss;
        grads.push(g);
    }
    Ok(Some((total, grads)))
}

fn match_pairs(
    cost: &[Vec<f64>],
) -> Result<Vec<(usize, usize)>, TrainError> {
    match hungarian(cost) {
        Ok(mr) => Ok(mr.pairs),
        Err(e) => Err(TrainError::Objective(format!("matching failed: {e}"))),
    }
}

fn eq1_stage(
    gts: &[GroundTruth],
    m: &MixtureParams,
    w: &CostWeights,
) -> Result<(f64, ParamGrads), TrainError> {
    let k = m.num_components();
    let mut grads = ParamGrads::zeros(k, m.num_classes);
    let n = gts.len();

    let mut matched = vec![false; k];
    let mut loss = 0.0;
    if n > 0 {
        let mut cost = vec![vec![0.0; k]; n];
        for (i, g) in gts.iter().enumerate() {
            for (j, comp) in m.components.iter().enumerate() {
                cost[i][j] = match_cost(g, comp, w).map_err(TrainError::from)?;
            }
        }
        let inv_n = 1.0 / n as f64;
        for (gi, kj) in match_pairs(&cost)? {
            matched[kj] = true;
            let g = &gts[gi];
            let comp = &m.components[kj];
            let c = g.class_index().ok_or(MixtureError::NotOneHot)?;

            let pc = comp.p[c].clamp(PROB_FLOOR, 1.0);
            loss += w.w1 * -math::ln(pc) * inv_n;
            if comp.p[c] > PROB_FLOOR {
                grads.d_p[kj][c] -= w.w1 / pc * inv_n;
            }

            let b = g.bbox.coords();
            for j in 0..4 {
                let diff = comp.mu[j] - b[j];
                loss += w.w2 * math::abs(diff) * inv_n;
                grads.d_mu[kj][j] += w.w2 * sign(diff) * inv_n;
            }

            let (gv, ggrad) = giou_grad(&mu_as_box(&comp.mu), &g.bbox);
            loss += w.w3 * (1.0 - gv) * inv_n;
            for j in 0..4 {
                grads.d_mu[kj][j] -= w.w3 * ggrad[j] * inv_n;
            }
        }
    }

    // unmatched components are trained toward background (o → 0)
    let inv_k = 1.0 / k as f64;
    for (kj, comp) in m.components.iter().enumerate() {
        if matched[kj] {
            loss += -math::ln(comp.o) * inv_k;
            grads.d_o[kj] -= inv_k / comp.o;
        } else {
            loss += -math::ln_1p(-comp.o) * inv_k;
            grads.d_o[kj] += inv_k / (1.0 - comp.o);
        }
    }
    Ok((loss, grads))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn matched_nll_stage(
    gts: &[GroundTruth],
    m: &MixtureParams,
) -> Result<(f64, ParamGrads), TrainError> {
    let k = m.num_components();
    let mut grads = ParamGrads::zeros(k, m.num_classes);
    if gts.is_empty() {
        return Ok((0.0, grads));
    }
    let mut cost = vec![vec![0.0; k]; gts.len()];
    for (i, g) in gts.iter().enumerate() {
        for (j, comp) in m.components.iter().enumerate() {
            cost[i][j] = -component_loglik(g, comp).map_err(TrainError::from)?;
        }
    }
    let inv_n = 1.0 / gts.len() as f64;
    let mut loss = 0.0;
    for (gi, kj) in match_pairs(&cost)? {
        let g = &gts[gi];
        let comp = &m.components[kj];
        loss += cost[gi][kj] * inv_n;

        if comp.pi > PROB_FLOOR {
            grads.d_pi[kj] -= inv_n / comp.pi.min(1.0);
        }
        let b = g.bbox.coords();
        for j in 0..4 {
            let (dm, dg) = cauchy_logpdf_1d_grad(b[j], comp.mu[j], comp.gamma[j]);
            grads.d_mu[kj][j] -= dm * inv_n;
            grads.d_gamma[kj][j] -= dg * inv_n;
        }
        let c = g.class_index().ok_or(MixtureError::NotOneHot)?;
        if comp.p[c] > PROB_FLOOR {
            grads.d_p[kj][c] -= inv_n / comp.p[c].min(1.0);
        }
    }
    Ok((loss, grads))
}

fn bipartite_mcm_stage(
    gts: &[GroundTruth],
    m: &MixtureParams,
    beta: f64,
    sg: &StopGradConfig,
) -> Result<(f64, ParamGrads), TrainError> {
    let k = m.num_components();
    if gts.is_empty() {
        return Ok((0.0, ParamGrads::zeros(k, m.num_classes)));
    }
    let mut cost = vec![vec![0.0; k]; gts.len()];
    for (i, g) in gts.iter().enumerate() {
        for (j, comp) in m.components.iter().enumerate() {
            cost[i][j] = -component_loglik(g, comp).map_err(TrainError::from)?;
        }
    }
    let mut chosen = vec![0usize; gts.len()];
    for (gi, kj) in match_pairs(&cost)? {
        chosen[gi] = kj;
    }

    let inv_n = 1.0 / gts.len() as f64;
    let mut loss = 0.0;
    for (g, &kj) in gts.iter().zip(&chosen) {
        let logliks = component_logliks(g, m).map_err(TrainError::from)?;
        let lse = math::logsumexp(&logliks);
        // NLL plus the matching term with the matched component as "max"
        loss += (-lse + beta * (lse - logliks[kj])) * inv_n;
    }
    let grads = loss_backward_with_max(gts, m, beta, sg, Some(&chosen)).map_err(TrainError::from)?;
    Ok((loss, grads))
}

/// Trains the detection head with a bipartite-matching objective. Returns
/// the training outcome and the number of scene visits skipped because the
/// replicated ground truths outnumbered a stage's components.
pub fn train_bipartite(
    scenes: &[Scene],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    bcfg: &BipartiteConfig,
    init: Option<Weights>,
) -> Result<(TrainOutcome, usize), TrainError> {
    if bcfg.copies < 1 {
        return Err(TrainError::Objective(String::from("copies must be >= 1")));
    }
    let beta = tcfg.beta;
    let sg = tcfg.stopgrad;
    let mut skipped = 0usize;
    let outcome = train_with_objective(scenes, cfg, tcfg, init, |scene, records| {
        let r = bipartite_scene_objective(scene, records, bcfg, beta, &sg)?;
        if r.is_none() {
            skipped += 1;
        }
        Ok(r)
    })?;
    Ok((outcome, skipped))
}
