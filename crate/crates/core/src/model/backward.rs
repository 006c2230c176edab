//! Hand-written reverse-mode pass through the detection head and the
//! first-order trainer built on top of it.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Scene;
use crate::losses::{loss_backward, total_loss_multi, LossReport, ParamGrads, StopGradConfig};
use crate::math;
use crate::mixture::MixtureParams;

use super::mlp::{mlp_backward, Weights};
use super::{
    crop_backward, forward_records, sanitize_backward, ModelConfig, ModelError, PropSrc,
    StageRecord,
};

// Floors used by the activation chain; gradients vanish once a floor binds.
const GAMMA_FLOOR: f64 = 1e-12;
const O_FLOOR: f64 = 1e-12;

/// Backpropagates per-stage mixture-parameter gradients through the
/// activation chain, the MLPs, the bilinear crops, and the stage-to-stage
/// proposal handoff. Returns the gradient with respect to every weight.
pub fn backward_scene(
    scene: &Scene,
    weights: &Weights,
    cfg: &ModelConfig,
    records: &[StageRecord],
    stage_grads: &[ParamGrads],
) -> Weights {
    assert_eq!(records.len(), stage_grads.len());
    let mut tape = weights.zeros_like();
    // gradients flowing into the current stage's μ and o outputs from later
    // stages (proposal handoff and context inputs)
    let last_k = records.last().map_or(0, |r| r.raw.len());
    let mut carry_mu: Vec<[f64; 4]> = vec![[0.0; 4]; last_k];
    let mut carry_o: Vec<f64> = vec![0.0; last_k];

    for s in (0..records.len()).rev() {
        let rec = &records[s];
        let g = &stage_grads[s];
        let k = rec.raw.len();
        let prev_k = if s > 0 { records[s - 1].raw.len() } else { 0 };
        let mut next_carry = vec![[0.0; 4]; prev_k];
        let mut next_carry_o = vec![0.0; prev_k];
        // own-o context terms (ctx[0]) are folded in after the loop: mixing
        // them into the cross-term accumulation order would let float
        // non-associativity break the exact gradient tie between twin
        // components
        let mut own_o_ctx = vec![0.0; prev_k];

        // π_m = o_m / Σo couples all components: dL/do_k picks up
        // (d_pi[k] − Σ_m d_pi[m]·π_m) / Σo.
        let pi_dot: f64 = (0..k)
            .map(|m| g.d_pi[m] * rec.mixture.components[m].pi)
            .sum();

        for ki in 0..k {
            let comp = &rec.mixture.components[ki];
            let raw = &rec.raw[ki];
            let c = rec.mixture.num_classes;

            let mut d_mu = g.d_mu[ki];
            for j in 0..4 {
                d_mu[j] += carry_mu[ki][j];
            }
            // μ = sanitize(prop + μ̄): route swaps/clamps, then split the sum
            let d_mu_pre = sanitize_backward(&rec.mu_trace[ki], d_mu);

            let mut d_out = vec![0.0; 4 + 4 + c + 1];
            d_out[..4].copy_from_slice(&d_mu_pre);
            for j in 0..4 {
                // γ = max(softplus(γ̄), floor); softplus' = sigmoid
                d_out[4 + j] = if comp.gamma[j] > GAMMA_FLOOR {
                    g.d_gamma[ki][j] * math::sigmoid(raw.gamma_bar[j])
                } else {
                    0.0
                };
            }
            // softmax Jacobian
            let p_dot: f64 = (0..c).map(|m| g.d_p[ki][m] * comp.p[m]).sum();
            for m in 0..c {
                d_out[8 + m] = comp.p[m] * (g.d_p[ki][m] - p_dot);
            }
            // o = clamp(sigmoid(ō)); carry_o holds the context-input paths
            // from the next stage
            let d_o_total = g.d_o[ki] + carry_o[ki] + (g.d_pi[ki] - pi_dot) / rec.o_sum;
            d_out[8 + c] = if comp.o > O_FLOOR && comp.o < 1.0 - O_FLOOR {
                d_o_total * comp.o * (1.0 - comp.o)
            } else {
                0.0
            };

            // the head output is MLP output plus the per-slot bias: the
            // same gradient lands on both
            let hd = d_out.len();
            let slot = rec.slot[ki];
            for (j, d) in d_out.iter().enumerate() {
                tape.head_bias[s][slot * hd + j] += d;
            }
            let d_in = mlp_backward(
                &weights.stages[s],
                &mut tape.stages[s],
                &rec.mlp[ki],
                &d_out,
            );
            // head input = crop features ++ context inputs
            let fd = cfg.feature_dim();
            let (d_feats, d_ctx) = d_in.split_at(fd);
            if let PropSrc::Prev(kp) = rec.prop_src[ki] {
                let prev = &records[s - 1].mixture.components;
                let own_mu = prev[kp].mu;
                // ctx[0] = own previous o
                own_o_ctx[kp] += d_ctx[0];
                // ctx[1] = Σ_{j≠kp} o_j·K_jk, ctx[2] = Σ_{j≠kp} K_jk with
                // K = exp(−Σ_c ((μ_j−μ_kp)/W)²)
                let w2 = super::CTX_KERNEL_W * super::CTX_KERNEL_W;
                for (j, other) in prev.iter().enumerate() {
                    if j == kp {
                        continue;
                    }
                    let kern = super::ctx_kernel(&other.mu, &own_mu);
                    next_carry_o[j] += d_ctx[1] * kern;
                    let dk = (d_ctx[1] * other.o + d_ctx[2]) * kern;
                    for c in 0..4 {
                        let delta = other.mu[c] - own_mu[c];
                        next_carry[j][c] += dk * (-2.0 * delta / w2);
                        next_carry[kp][c] += dk * (2.0 * delta / w2);
                    }
                }
            }
            let mut d_prop = crop_backward(&scene.raster, rec.prop[ki], cfg.out_size, d_feats);
            for j in 0..4 {
                d_prop[j] += d_mu_pre[j];
            }
            let d_prop_raw = sanitize_backward(&rec.prop_trace[ki], d_prop);
            match rec.prop_src[ki] {
                PropSrc::Init(i) => {
                    for j in 0..4 {
                        tape.init_proposals[i][j] += d_prop_raw[j];
                    }
                }
                PropSrc::Prev(kp) => {
                    for j in 0..4 {
                        next_carry[kp][j] += d_prop_raw[j];
                    }
                }
            }
        }
        for (t, own) in next_carry_o.iter_mut().zip(&own_o_ctx) {
            *t += own;
        }
        carry_mu = next_carry;
        carry_o = next_carry_o;
    }
    tape
}

/// Default weight of the objectness count anchor (see [`count_anchor`]).
pub const DEFAULT_O_ANCHOR: f64 = 0.05;

/// Count anchor: `anchor·(Σo − n)²` for a stage, n the number of ground
/// truths in the scene.
///
/// The normalization π = o/Σo makes the absolute objectness scale a flat
/// direction of the mixture losses, so it drifts freely during training
/// and the detection score p·o loses its meaning. Tying the total
/// objectness mass to the object count pins that scale and makes o the
/// component's share of the expected count — components splitting one
/// object split its confidence. The term never assigns individual
/// components to objects, so it stays permutation-symmetric: identical
/// components still receive identical gradients.
fn count_anchor(rec: &StageRecord, n_gt: usize, anchor: f64, g: &mut ParamGrads) -> f64 {
    if anchor == 0.0 || rec.raw.is_empty() {
        return 0.0;
    }
    let excess: f64 =
        rec.mixture.components.iter().map(|c| c.o).sum::<f64>() - n_gt as f64;
    for gi in g.d_o.iter_mut() {
        *gi += 2.0 * anchor * excess;
    }
    anchor * excess * excess
}

/// Forward pass plus full analytic gradient of `L_NLL + β·L_MCM` plus the
/// objectness count anchor (all summed over stages) with respect to every
/// weight. With a nonzero `o_anchor` the returned `total` exceeds
/// `nll + β·mcm` by the anchor penalty.
pub fn loss_and_grad(
    scene: &Scene,
    weights: &Weights,
    cfg: &ModelConfig,
    beta: f64,
    o_anchor: f64,
    sg: &StopGradConfig,
) -> Result<(LossReport, Weights), ModelError> {
    let records = forward_records(scene, weights, cfg)?;
    let mixtures: Vec<MixtureParams> = records.iter().map(|r| r.mixture.clone()).collect();
    let mut report = total_loss_multi(&scene.gts, &mixtures, beta, sg)?;
    let mut stage_grads = Vec::with_capacity(records.len());
    for (rec, m) in records.iter().zip(&mixtures) {
        let mut g = loss_backward(&scene.gts, m, beta, sg)?;
        report.total += count_anchor(rec, scene.gts.len(), o_anchor, &mut g);
        stage_grads.push(g);
    }
    Ok((report, backward_scene(scene, weights, cfg, &records, &stage_grads)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Momentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    b1t: f64,
    b2t: f64,
}

impl OptState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            b1t: 1.0,
            b2t: 1.0,
        }
    }

    fn step(&mut self, opt: &Optimizer, w: &mut [f64], g: &[f64]) {
        match *opt {
            Optimizer::Sgd { lr } => {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= lr * gi;
                }
            }
            Optimizer::Momentum { lr, momentum } => {
                for ((wi, gi), mi) in w.iter_mut().zip(g).zip(&mut self.m) {
                    *mi = momentum * *mi + gi;
                    *wi -= lr * *mi;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                self.b1t *= beta1;
                self.b2t *= beta2;
                for (i, (wi, gi)) in w.iter_mut().zip(g).enumerate() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * gi;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * gi * gi;
                    let mh = self.m[i] / (1.0 - self.b1t);
                    let vh = self.v[i] / (1.0 - self.b2t);
                    *wi -= lr * mh / (math::sqrt(vh) + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the min-cost-matching term.
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub stopgrad: StopGradConfig,
    /// Weight of the objectness count anchor; 0 disables it.
    pub o_anchor: f64,
    /// Seed for the minibatch shuffle (independent of the weight init seed).
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            steps: 3000,
            batch_size: 32,
            optimizer: Optimizer::default(),
            stopgrad: StopGradConfig::default(),
            o_anchor: DEFAULT_O_ANCHOR,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Model(ModelError),
    NoScenes,
    /// Loss or a gradient stopped being finite; names the step and scene.
    NonFinite { step: usize, scene_id: u64 },
    Objective(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::NoScenes => write!(f, "training set is empty"),
            TrainError::NonFinite { step, scene_id } => {
                write!(f, "non-finite loss or gradient at step {step}, scene {scene_id}")
            }
            TrainError::Objective(msg) => write!(f, "objective error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<crate::mixture::MixtureError> for TrainError {
    fn from(e: crate::mixture::MixtureError) -> Self {
        TrainError::Model(ModelError::Mixture(e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: Weights,
    /// Mean batch loss per step; NaN for a step where every scene was
    /// skipped by the objective.
    pub history: Vec<f64>,
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Minibatch training loop with a pluggable per-scene objective.
///
/// The objective receives the forward records of one scene and returns the
/// scene loss plus per-stage mixture-parameter gradients, or `None` to
/// skip the scene. Everything is sequential and deterministic given the
/// seeds in `cfg` and `tcfg`. When `init` is given it is used as the
/// starting point instead of a fresh initialization, which supports
/// warm-started fine-tuning; its shape must match `cfg`.
pub fn train_with_objective<F>(
    scenes: &[Scene],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    init: Option<Weights>,
    mut objective: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&Scene, &[StageRecord]) -> Result<Option<(f64, Vec<ParamGrads>)>, TrainError>,
{
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let mut weights = match init {
        Some(w) => {
            if !cfg.matches(&w) {
                return Err(TrainError::Objective(String::from(
                    "initial weights do not match the model configuration",
                )));
            }
            w
        }
        None => Weights::init(cfg),
    };
    let mut opt = OptState::new(weights.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.shuffle_seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut cursor = order.len();
    let batch = tcfg.batch_size.max(1).min(scenes.len());
    let mut history = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let mut acc = vec![0.0; weights.num_params()];
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for _ in 0..batch {
            if cursor >= order.len() {
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            let scene = &scenes[order[cursor]];
            cursor += 1;
            let records = forward_records(scene, &weights, cfg)?;
            let Some((loss, grads)) = objective(scene, &records)? else {
                continue;
            };
            let tape = backward_scene(scene, &weights, cfg, &records, &grads);
            let flat = tape.flatten();
            if !loss.is_finite() || flat.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite {
                    step,
                    scene_id: scene.id,
                });
            }
            for (a, v) in acc.iter_mut().zip(&flat) {
                *a += v;
            }
            loss_sum += loss;
            count += 1;
        }
        if count > 0 {
            let scale = 1.0 / count as f64;
            for v in &mut acc {
                *v *= scale;
            }
            let mut flat_w = weights.flatten();
            opt.step(&tcfg.optimizer, &mut flat_w, &acc);
            weights.assign_flat(&flat_w);
            history.push(loss_sum * scale);
        } else {
            history.push(f64::NAN);
        }
    }
    Ok(TrainOutcome { weights, history })
}

/// Trains with the mixture objective `L_NLL + β·L_MCM` (plus the count
/// anchor) summed over stages.
pub fn train(
    scenes: &[Scene],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    init: Option<Weights>,
) -> Result<TrainOutcome, TrainError> {
    let beta = tcfg.beta;
    let anchor = tcfg.o_anchor;
    let sg = tcfg.stopgrad;
    train_with_objective(scenes, cfg, tcfg, init, move |scene, records| {
        let mixtures: Vec<MixtureParams> = records.iter().map(|r| r.mixture.clone()).collect();
        let report = total_loss_multi(&scene.gts, &mixtures, beta, &sg)?;
        let mut total = report.total;
        let mut grads = Vec::with_capacity(mixtures.len());
        for (rec, m) in records.iter().zip(&mixtures) {
            let mut g = loss_backward(&scene.gts, m, beta, &sg)?;
            total += count_anchor(rec, scene.gts.len(), anchor, &mut g);
            grads.push(g);
        }
        Ok(Some((total, grads)))
    })
}
