//! Toy multi-stage detection head: learnable proposal boxes, a bilinear
//! raster crop, a per-proposal MLP, the activation chain producing mixture
//! parameters, stage-wise proposal refinement with optional top-k pruning,
//! and a deterministic first-order trainer.
//!
//! All gradients are written by hand; [`loss_and_grad`] is checked against
//! central finite differences end to end.

mod backward;
mod crop;
mod mlp;

pub use backward::{
    backward_scene, loss_and_grad, train, train_with_objective, Optimizer, TrainConfig, DEFAULT_O_ANCHOR,
    TrainError, TrainOutcome,
};
pub use crop::{crop_backward, crop_features};
pub use mlp::{mlp_backward, mlp_forward, Dense, MlpRecord, Weights};

use alloc::vec::Vec;
use core::fmt;

use crate::data::Scene;
use crate::geometry::Box;
use crate::math;
use crate::mixture::{ComponentParams, MixtureParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub num_proposals: usize,
    pub num_classes: usize,
    pub hidden_sizes: Vec<usize>,
    /// Side length of the bilinear crop lattice.
    pub out_size: usize,
    /// Fraction of proposals, ranked by objectness, kept between stages.
    pub topk_ratio: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_stages: 3,
            num_proposals: 20,
            num_classes: 4,
            hidden_sizes: alloc::vec![64],
            out_size: 4,
            topk_ratio: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    InvalidConfig(&'static str),
    ShapeMismatch,
    Mixture(crate::mixture::MixtureError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidConfig(msg) => write!(f, "invalid model config: {msg}"),
            ModelError::ShapeMismatch => write!(f, "weights do not match model config"),
            ModelError::Mixture(e) => write!(f, "mixture error: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

impl From<crate::mixture::MixtureError> for ModelError {
    fn from(e: crate::mixture::MixtureError) -> Self {
        ModelError::Mixture(e)
    }
}

/// Extra per-proposal inputs fed to the head MLP alongside the crop
/// features: the proposal's own previous-stage objectness, the
/// kernel-weighted objectness mass of the other previous-stage components
/// around it, and the plain kernel mass. The first stage has no previous
/// mixture and receives zeros. A per-proposal crop alone cannot tell a
/// component that another component already claims its object; these
/// inputs stand in for the proposal self-attention of full-scale heads and
/// give refinement stages the signal needed to learn duplicate
/// suppression.
pub const CTX_DIM: usize = 3;

/// Length scale (per box coordinate) of the Gaussian kernel used for the
/// context inputs; smooth everywhere so gradients are exact.
pub(crate) const CTX_KERNEL_W: f64 = 0.25;

pub(crate) fn ctx_kernel(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let mut ssd = 0.0;
    for c in 0..4 {
        let d = (a[c] - b[c]) / CTX_KERNEL_W;
        ssd += d * d;
    }
    math::exp(-ssd)
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.out_size * self.out_size * 3
    }

    /// Head MLP input width: crop features plus the context inputs.
    pub fn mlp_in_dim(&self) -> usize {
        self.feature_dim() + CTX_DIM
    }

    pub fn head_out_dim(&self) -> usize {
        4 + 4 + self.num_classes + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_stages < 1 {
            return Err(ModelError::InvalidConfig("num_stages must be >= 1"));
        }
        if self.num_proposals < 1 {
            return Err(ModelError::InvalidConfig("num_proposals must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig("num_classes must be >= 2"));
        }
        if self.out_size < 1 {
            return Err(ModelError::InvalidConfig("out_size must be >= 1"));
        }
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return Err(ModelError::InvalidConfig("topk_ratio must be in (0, 1]"));
        }
        // at least one proposal must survive every pruning step
        let mut k = self.num_proposals;
        for _ in 1..self.num_stages {
            k = pruned_count(k, self.topk_ratio);
        }
        if k < 1 {
            return Err(ModelError::InvalidConfig("topk_ratio prunes all proposals"));
        }
        Ok(())
    }

    fn matches(&self, w: &Weights) -> bool {
        if w.init_proposals.len() != self.num_proposals || w.stages.len() != self.num_stages {
            return false;
        }
        if w.head_bias.len() != self.num_stages
            || w
                .head_bias
                .iter()
                .any(|b| b.len() != self.num_proposals * self.head_out_dim())
        {
            return false;
        }
        for layers in &w.stages {
            let mut dims = alloc::vec![self.mlp_in_dim()];
            dims.extend_from_slice(&self.hidden_sizes);
            dims.push(self.head_out_dim());
            if layers.len() != dims.len() - 1 {
                return false;
            }
            for (layer, pair) in layers.iter().zip(dims.windows(2)) {
                if layer.in_dim != pair[0] || layer.out_dim != pair[1] {
                    return false;
                }
            }
        }
        true
    }
}

pub(crate) fn pruned_count(k: usize, ratio: f64) -> usize {
    if ratio >= 1.0 {
        k
    } else {
        let kept = math::floor(ratio * k as f64 + 1e-9) as usize;
        kept.max(1)
    }
}

/// Raw head outputs before the activation chain. Also reused as the
/// container for gradients with respect to those outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRawOutput {
    pub mu_bar: [f64; 4],
    pub gamma_bar: [f64; 4],
    pub p_bar: Vec<f64>,
    pub o_bar: f64,
}

/// Public per-stage view of a forward pass.
#[derive(Debug, Clone)]
pub struct StageState {
    pub proposals: Vec<Box>,
    pub features: Vec<Vec<f64>>,
    pub mixture: MixtureParams,
}

/// Coordinates may drift during refinement; boxes are clamped to this
/// range and re-ordered before being used as proposals or locations.
const COORD_MIN: f64 = -0.5;
const COORD_MAX: f64 = 1.5;

/// Numerical floors keeping the activation outputs inside their open
/// domains even for saturated pre-activations.
const GAMMA_FLOOR: f64 = 1e-12;
const O_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default)]
pub struct SanitizeTrace {
    clamped: [bool; 4],
    swapped_lr: bool,
    swapped_tb: bool,
}

pub(crate) fn sanitize(raw: [f64; 4]) -> ([f64; 4], SanitizeTrace) {
    let mut trace = SanitizeTrace::default();
    let mut v = raw;
    for (i, x) in v.iter_mut().enumerate() {
        let c = x.clamp(COORD_MIN, COORD_MAX);
        trace.clamped[i] = c != *x;
        *x = c;
    }
    if v[0] > v[2] {
        v.swap(0, 2);
        trace.swapped_lr = true;
    }
    if v[1] > v[3] {
        v.swap(1, 3);
        trace.swapped_tb = true;
    }
    (v, trace)
}

pub(crate) fn sanitize_backward(trace: &SanitizeTrace, d_out: [f64; 4]) -> [f64; 4] {
    let mut d = d_out;
    if trace.swapped_lr {
        d.swap(0, 2);
    }
    if trace.swapped_tb {
        d.swap(1, 3);
    }
    for (i, v) in d.iter_mut().enumerate() {
        if trace.clamped[i] {
            *v = 0.0;
        }
    }
    d
}

/// Where a stage's proposal came from: a learnable initial box or a
/// component of the previous stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropSrc {
    Init(usize),
    Prev(usize),
}

/// Saved forward state of one stage, enough to run the backward pass.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub prop_src: Vec<PropSrc>,
    /// Original slot index of each proposal (stable across pruning); selects
    /// the per-proposal head bias row.
    pub slot: Vec<usize>,
    /// Context inputs (see [`CTX_DIM`]) appended to each proposal's crop
    /// features; all-zero on the first stage.
    pub ctx: Vec<[f64; CTX_DIM]>,
    pub prop_trace: Vec<SanitizeTrace>,
    pub prop: Vec<[f64; 4]>,
    pub mlp: Vec<MlpRecord>,
    pub raw: Vec<HeadRawOutput>,
    pub mu_trace: Vec<SanitizeTrace>,
    pub o_sum: f64,
    pub mixture: MixtureParams,
}

/// Applies the activation chain to one component's raw output.
///
/// `all_o_bar` must contain the pre-sigmoid objectness of every component
/// of the stage (including this one); the mixing coefficient is this
/// component's objectness normalized by the stage total.
pub fn activate(raw: &HeadRawOutput, proposal: &Box, all_o_bar: &[f64]) -> ComponentParams {
    let (mu, _) = sanitize([
        proposal.l() + raw.mu_bar[0],
        proposal.t() + raw.mu_bar[1],
        proposal.r() + raw.mu_bar[2],
        proposal.b() + raw.mu_bar[3],
    ]);
    let gamma = core::array::from_fn(|j| math::softplus(raw.gamma_bar[j]).max(GAMMA_FLOOR));
    let p = math::softmax(&raw.p_bar);
    let o = clamp_o(math::sigmoid(raw.o_bar));
    let o_sum: f64 = all_o_bar
        .iter()
        .map(|&ob| clamp_o(math::sigmoid(ob)))
        .sum();
    ComponentParams {
        pi: o / o_sum,
        mu,
        gamma,
        p,
        o,
    }
}

#[inline]
fn clamp_o(o: f64) -> f64 {
    o.clamp(O_FLOOR, 1.0 - O_FLOOR)
}

/// Runs the forward pass keeping every intermediate needed for
/// [`backward_scene`].
pub fn forward_records(
    scene: &Scene,
    weights: &Weights,
    cfg: &ModelConfig,
) -> Result<Vec<StageRecord>, ModelError> {
    cfg.validate()?;
    if !cfg.matches(weights) {
        return Err(ModelError::ShapeMismatch);
    }

    let mut records: Vec<StageRecord> = Vec::with_capacity(cfg.num_stages);
    // (source, original slot, raw proposal coords) for the upcoming stage
    let mut pending: Vec<(PropSrc, usize, [f64; 4])> = weights
        .init_proposals
        .iter()
        .enumerate()
        .map(|(k, p)| (PropSrc::Init(k), k, *p))
        .collect();

    for s in 0..cfg.num_stages {
        let layers = &weights.stages[s];
        let hd = cfg.head_out_dim();
        let k = pending.len();
        let mut rec = StageRecord {
            prop_src: Vec::with_capacity(k),
            slot: Vec::with_capacity(k),
            ctx: Vec::with_capacity(k),
            prop_trace: Vec::with_capacity(k),
            prop: Vec::with_capacity(k),
            mlp: Vec::with_capacity(k),
            raw: Vec::with_capacity(k),
            mu_trace: Vec::with_capacity(k),
            o_sum: 0.0,
            mixture: MixtureParams {
                components: Vec::with_capacity(k),
                num_classes: cfg.num_classes,
            },
        };

        let mut o_values = Vec::with_capacity(k);
        for (src, slot, raw_prop) in &pending {
            let (prop, trace) = sanitize(*raw_prop);
            let ctx: [f64; CTX_DIM] = match *src {
                PropSrc::Init(_) => [0.0; CTX_DIM],
                PropSrc::Prev(kp) => {
                    let prev = &records[s - 1].mixture.components;
                    let own = &prev[kp];
                    // sum over every component in one fixed order and
                    // subtract the self term (kernel 1 at zero distance):
                    // components that are exact twins then see bitwise
                    // identical context, keeping their tie exact
                    let mut mass = 0.0;
                    let mut count = 0.0;
                    for other in prev.iter() {
                        let kern = ctx_kernel(&other.mu, &own.mu);
                        mass += other.o * kern;
                        count += kern;
                    }
                    [own.o, mass - own.o, count - 1.0]
                }
            };
            let mut feats = crop_features(&scene.raster, prop, cfg.out_size);
            feats.extend_from_slice(&ctx);
            let mlp_rec = mlp_forward(layers, &feats);
            let bias = &weights.head_bias[s][slot * hd..(slot + 1) * hd];
            let out: Vec<f64> = mlp_rec
                .acts
                .last()
                .unwrap()
                .iter()
                .zip(bias)
                .map(|(a, b)| a + b)
                .collect();
            let c = cfg.num_classes;
            let raw = HeadRawOutput {
                mu_bar: [out[0], out[1], out[2], out[3]],
                gamma_bar: [out[4], out[5], out[6], out[7]],
                p_bar: out[8..8 + c].to_vec(),
                o_bar: out[8 + c],
            };
            o_values.push(clamp_o(math::sigmoid(raw.o_bar)));
            rec.prop_src.push(*src);
            rec.slot.push(*slot);
            rec.ctx.push(ctx);
            rec.prop_trace.push(trace);
            rec.prop.push(prop);
            rec.mlp.push(mlp_rec);
            rec.raw.push(raw);
        }

        let o_sum: f64 = o_values.iter().sum();
        rec.o_sum = o_sum;
        for (ki, raw) in rec.raw.iter().enumerate() {
            let prop = rec.prop[ki];
            let (mu, mu_trace) = sanitize([
                prop[0] + raw.mu_bar[0],
                prop[1] + raw.mu_bar[1],
                prop[2] + raw.mu_bar[2],
                prop[3] + raw.mu_bar[3],
            ]);
            rec.mu_trace.push(mu_trace);
            rec.mixture.components.push(ComponentParams {
                pi: o_values[ki] / o_sum,
                mu,
                gamma: core::array::from_fn(|j| {
                    math::softplus(raw.gamma_bar[j]).max(GAMMA_FLOOR)
                }),
                p: math::softmax(&raw.p_bar),
                o: o_values[ki],
            });
        }

        if s + 1 < cfg.num_stages {
            let keep = pruned_count(k, cfg.topk_ratio);
            let mut order: Vec<usize> = (0..k).collect();
            // descending objectness, ties to the lower index
            order.sort_by(|&a, &b| {
                o_values[b]
                    .partial_cmp(&o_values[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut selected: Vec<usize> = order[..keep].to_vec();
            selected.sort_unstable();
            pending = selected
                .into_iter()
                .map(|ki| (PropSrc::Prev(ki), rec.slot[ki], rec.mixture.components[ki].mu))
                .collect();
        }
        records.push(rec);
    }
    Ok(records)
}

/// Runs the full multi-stage forward pass.
pub fn forward(
    scene: &Scene,
    weights: &Weights,
    cfg: &ModelConfig,
) -> Result<Vec<StageState>, ModelError> {
    let records = forward_records(scene, weights, cfg)?;
    Ok(records
        .into_iter()
        .map(|rec| StageState {
            proposals: rec
                .prop
                .iter()
                .map(|p| Box::unnormalized(p[0], p[1], p[2], p[3]).expect("sanitized box"))
                .collect(),
            features: rec.mlp.iter().map(|m| m.acts[0].clone()).collect(),
            mixture: rec.mixture,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};
    use alloc::vec;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            num_stages: 2,
            num_proposals: 8,
            num_classes: 4,
            hidden_sizes: vec![16],
            out_size: 2,
            topk_ratio: 1.0,
            seed: 7,
        }
    }

    fn one_scene() -> Scene {
        generate(3, 1, &GenConfig::default()).unwrap().pop().unwrap()
    }

    #[test]
    fn activate_softplus_and_pi_examples() {
        let raw = HeadRawOutput {
            mu_bar: [0.0; 4],
            gamma_bar: [0.0; 4],
            p_bar: vec![0.0, 0.0, 0.0],
            o_bar: 0.0,
        };
        let prop = Box::new(0.1, 0.1, 0.9, 0.9).unwrap();
        // softplus(0) = ln 2; uniform softmax; sigmoid(0) = 0.5
        let c = activate(&raw, &prop, &[0.0, 0.0, 0.0, 0.0]);
        assert!((c.gamma[0] - math::ln(2.0)).abs() < 1e-15);
        assert!((c.p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.o - 0.5).abs() < 1e-15);
        assert!((c.pi - 0.25).abs() < 1e-15);
    }

    #[test]
    fn activate_preserves_already_normalized_objectness() {
        // o values (0.2, 0.2, 0.6) already sum to 1 -> π equals o
        let inv_sigmoid = |o: f64| math::ln(o / (1.0 - o));
        let obars = [inv_sigmoid(0.2), inv_sigmoid(0.2), inv_sigmoid(0.6)];
        let prop = Box::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let raw = HeadRawOutput {
            mu_bar: [0.0; 4],
            gamma_bar: [0.0; 4],
            p_bar: vec![0.0, 0.0],
            o_bar: obars[2],
        };
        let c = activate(&raw, &prop, &obars);
        assert!((c.pi - 0.6).abs() < 1e-12);
    }

    #[test]
    fn sanitize_clamps_and_reorders() {
        let (v, trace) = sanitize([0.9, 0.2, 0.1, 2.7]);
        assert_eq!(v, [0.1, 0.2, 0.9, 1.5]);
        assert!(trace.swapped_lr);
        assert!(!trace.swapped_tb);
        assert!(trace.clamped[3]);
        // backward routes through the swap and kills the clamped lane
        let d = sanitize_backward(&trace, [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d, [3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_and_satisfies_mixture_invariants() {
        let cfg = toy_cfg();
        let w = Weights::init(&cfg);
        let scene = one_scene();
        let a = forward(&scene, &w, &cfg).unwrap();
        let b = forward(&scene, &w, &cfg).unwrap();
        assert_eq!(a.len(), 2);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.mixture, sb.mixture);
            let pi_sum: f64 = sa.mixture.components.iter().map(|c| c.pi).sum();
            assert!((pi_sum - 1.0).abs() < 1e-9);
            for c in &sa.mixture.components {
                assert!(c.gamma.iter().all(|&g| g > 0.0));
                let p_sum: f64 = c.p.iter().sum();
                assert!((p_sum - 1.0).abs() < 1e-9);
                assert!(c.o > 0.0 && c.o < 1.0);
            }
        }
    }

    #[test]
    fn single_stage_uses_initial_proposals() {
        let cfg = ModelConfig {
            num_stages: 1,
            ..toy_cfg()
        };
        let w = Weights::init(&cfg);
        let scene = one_scene();
        let states = forward(&scene, &w, &cfg).unwrap();
        assert_eq!(states.len(), 1);
        for (k, p) in states[0].proposals.iter().enumerate() {
            let (expected, _) = sanitize(w.init_proposals[k]);
            assert_eq!(p.coords(), expected);
        }
    }

    #[test]
    fn second_stage_proposals_come_from_first_stage_mu() {
        let cfg = toy_cfg();
        let w = Weights::init(&cfg);
        let scene = one_scene();
        let states = forward(&scene, &w, &cfg).unwrap();
        for (k, p) in states[1].proposals.iter().enumerate() {
            assert_eq!(p.coords(), states[0].mixture.components[k].mu);
        }
    }

    #[test]
    fn topk_pruning_keeps_highest_objectness() {
        let cfg = ModelConfig {
            topk_ratio: 0.5,
            ..toy_cfg()
        };
        let w = Weights::init(&cfg);
        let scene = one_scene();
        let states = forward(&scene, &w, &cfg).unwrap();
        assert_eq!(states[0].mixture.components.len(), 8);
        assert_eq!(states[1].mixture.components.len(), 4);
        let mut o: Vec<f64> = states[0].mixture.components.iter().map(|c| c.o).collect();
        o.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let cutoff = o[3];
        // every survivor's proposal matches a stage-1 μ with o >= cutoff
        for p in &states[1].proposals {
            let src = states[0]
                .mixture
                .components
                .iter()
                .find(|c| c.mu == p.coords())
                .expect("proposal must come from stage 1");
            assert!(src.o >= cutoff);
        }
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let cfg = toy_cfg();
        let w = Weights::init(&cfg);
        let other = ModelConfig {
            num_proposals: 5,
            ..toy_cfg()
        };
        let scene = one_scene();
        assert!(matches!(
            forward(&scene, &w, &other),
            Err(ModelError::ShapeMismatch)
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig {
            topk_ratio: 0.0,
            ..toy_cfg()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            num_stages: 0,
            ..toy_cfg()
        };
        assert!(cfg.validate().is_err());
    }
}
