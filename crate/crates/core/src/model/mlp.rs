//! Dense layers with tanh hidden activations, plus the flat weight view
//! used by the optimizer, the gradient checker, and serialization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![0.0; out_dim * in_dim],
            b: vec![0.0; out_dim],
        }
    }

    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / math::sqrt(in_dim as f64);
        let mut layer = Self::zeros(in_dim, out_dim);
        for v in &mut layer.w {
            *v = rng.gen_range(-bound..bound);
        }
        for v in &mut layer.b {
            *v = rng.gen_range(-bound..bound);
        }
        layer
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (o, row) in out.iter_mut().zip(self.w.chunks_exact(self.in_dim)) {
            for (wi, xi) in row.iter().zip(input) {
                *o += wi * xi;
            }
        }
        out
    }
}

/// Forward pass record: `acts[0]` is the input, `acts[i]` the output of
/// layer `i-1` (tanh applied on hidden layers, last layer linear).
#[derive(Debug, Clone)]
pub struct MlpRecord {
    pub acts: Vec<Vec<f64>>,
}

pub fn mlp_forward(layers: &[Dense], input: &[f64]) -> MlpRecord {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input.to_vec());
    for (li, layer) in layers.iter().enumerate() {
        let mut out = layer.forward(acts.last().unwrap());
        if li + 1 < layers.len() {
            for v in &mut out {
                *v = math::tanh(*v);
            }
        }
        acts.push(out);
    }
    MlpRecord { acts }
}

/// Backpropagates `d_out` through the recorded pass, accumulating layer
/// gradients into `grads` and returning the gradient at the input.
pub fn mlp_backward(
    layers: &[Dense],
    grads: &mut [Dense],
    rec: &MlpRecord,
    d_out: &[f64],
) -> Vec<f64> {
    let mut d = d_out.to_vec();
    for li in (0..layers.len()).rev() {
        let layer = &layers[li];
        let input = &rec.acts[li];
        if li + 1 < layers.len() {
            // undo tanh on this layer's output
            let act = &rec.acts[li + 1];
            for (dv, a) in d.iter_mut().zip(act) {
                *dv *= 1.0 - a * a;
            }
        }
        let g = &mut grads[li];
        let mut d_in = vec![0.0; layer.in_dim];
        for o in 0..layer.out_dim {
            g.b[o] += d[o];
            let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
            let grow = &mut g.w[o * layer.in_dim..(o + 1) * layer.in_dim];
            for i in 0..layer.in_dim {
                grow[i] += d[o] * input[i];
                d_in[i] += d[o] * row[i];
            }
        }
        d = d_in;
    }
    d
}

/// All learnable parameters: the initial proposal boxes, one MLP per
/// stage, and a per-proposal bias on each stage's head output.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub init_proposals: Vec<[f64; 4]>,
    pub stages: Vec<Vec<Dense>>,
    /// Per stage, a flat `num_proposals × head_out_dim` bias added to the
    /// shared MLP's head output, indexed by the proposal's original slot.
    /// This is the only parameter that distinguishes proposals whose boxes
    /// coincide. It starts at zero, so components that are exact twins stay
    /// exactly tied under any permutation-symmetric loss (their bias rows
    /// receive identical gradients); only a tie-breaking term can separate
    /// them, and it gets a scene-independent channel to do so.
    pub head_bias: Vec<Vec<f64>>,
}

/// Initial offset added to the pre-softplus scale bias so training starts
/// with γ around 0.05 rather than softplus(0) ≈ 0.69 (far wider than any
/// object in a unit scene).
const GAMMA_BAR_BIAS_INIT: f64 = -3.0;

impl Weights {
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init_proposals = Vec::with_capacity(cfg.num_proposals);
        let mut group = 0usize;
        while init_proposals.len() < cfg.num_proposals {
            // full-scene boxes pulled inward by a small deterministic
            // jitter, alternately pushed once and as an identical pair: a
            // likelihood-only objective gives two identical components
            // identical gradients and so can never separate them, while
            // the tie-breaking term can — which is exactly the failure
            // mode this lab probes. The mixed multiplicity means a
            // likelihood-only model splits some objects' confidence in
            // two and leaves others whole.
            let mut jitter = || rng.gen_range(0.0..0.02);
            let base = [jitter(), jitter(), 1.0 - jitter(), 1.0 - jitter()];
            init_proposals.push(base);
            if group % 2 == 0 && init_proposals.len() < cfg.num_proposals {
                init_proposals.push(base);
            }
            group += 1;
        }
        let mut stages = Vec::with_capacity(cfg.num_stages);
        for _ in 0..cfg.num_stages {
            let mut dims = vec![cfg.mlp_in_dim()];
            dims.extend_from_slice(&cfg.hidden_sizes);
            dims.push(cfg.head_out_dim());
            let mut layers = Vec::with_capacity(dims.len() - 1);
            for w in dims.windows(2) {
                layers.push(Dense::init(w[0], w[1], &mut rng));
            }
            // bias the scale channel toward narrow components
            let last = layers.last_mut().unwrap();
            for j in 4..8 {
                last.b[j] += GAMMA_BAR_BIAS_INIT;
            }
            stages.push(layers);
        }
        let head_bias =
            vec![vec![0.0; cfg.num_proposals * cfg.head_out_dim()]; cfg.num_stages];
        Self {
            init_proposals,
            stages,
            head_bias,
        }
    }

    /// [`Weights::init`] plus a distinct nudge per proposal box. The paired
    /// init deliberately creates exact component ties, which sit on argmax
    /// kinks of the matching/MCM terms; finite-difference gradient checks
    /// need a tie-free starting point.
    pub fn init_desymmetrized(cfg: &ModelConfig) -> Self {
        let mut w = Self::init(cfg);
        for (i, p) in w.init_proposals.iter_mut().enumerate() {
            let nudge = 4e-3 * (i + 1) as f64;
            p[0] += nudge;
            p[1] += 0.5 * nudge;
            p[2] -= nudge;
            p[3] -= 0.7 * nudge;
        }
        w
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            init_proposals: vec![[0.0; 4]; self.init_proposals.len()],
            stages: self
                .stages
                .iter()
                .map(|layers| {
                    layers
                        .iter()
                        .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                        .collect()
                })
                .collect(),
            head_bias: self.head_bias.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = self.init_proposals.len() * 4;
        for layers in &self.stages {
            for l in layers {
                n += l.w.len() + l.b.len();
            }
        }
        for b in &self.head_bias {
            n += b.len();
        }
        n
    }

    /// Flat parameter vector; order matches [`Weights::assign_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in &self.init_proposals {
            out.extend_from_slice(p);
        }
        for layers in &self.stages {
            for l in layers {
                out.extend_from_slice(&l.w);
                out.extend_from_slice(&l.b);
            }
        }
        for b in &self.head_bias {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        let mut next = || *it.next().expect("flat vector too short");
        for p in &mut self.init_proposals {
            for v in p.iter_mut() {
                *v = next();
            }
        }
        for layers in &mut self.stages {
            for l in layers {
                for v in &mut l.w {
                    *v = next();
                }
                for v in &mut l.b {
                    *v = next();
                }
            }
        }
        for b in &mut self.head_bias {
            for v in b.iter_mut() {
                *v = next();
            }
        }
        assert!(it.next().is_none(), "flat vector too long");
    }

    /// Named-array view used by the weight file format.
    pub fn to_named_arrays(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let mut flat_props = Vec::with_capacity(self.init_proposals.len() * 4);
        for p in &self.init_proposals {
            flat_props.extend_from_slice(p);
        }
        out.push((String::from("init_proposals"), flat_props));
        for (s, layers) in self.stages.iter().enumerate() {
            for (l, layer) in layers.iter().enumerate() {
                out.push((format!("stage{s}.layer{l}.w"), layer.w.clone()));
                out.push((format!("stage{s}.layer{l}.b"), layer.b.clone()));
            }
        }
        for (s, b) in self.head_bias.iter().enumerate() {
            out.push((format!("stage{s}.head_bias"), b.clone()));
        }
        out
    }

    /// Rebuilds weights from named arrays; shapes come from `template`.
    pub fn from_named_arrays(
        template: &Weights,
        arrays: &[(String, Vec<f64>)],
    ) -> Result<Self, String> {
        let mut w = template.zeros_like();
        let lookup = |name: &str| -> Result<&Vec<f64>, String> {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v)
                .ok_or_else(|| format!("missing weight array {name}"))
        };
        let props = lookup("init_proposals")?;
        if props.len() != w.init_proposals.len() * 4 {
            return Err(format!(
                "init_proposals has {} values, expected {}",
                props.len(),
                w.init_proposals.len() * 4
            ));
        }
        for (i, p) in w.init_proposals.iter_mut().enumerate() {
            p.copy_from_slice(&props[i * 4..(i + 1) * 4]);
        }
        for (s, layers) in w.stages.iter_mut().enumerate() {
            for (l, layer) in layers.iter_mut().enumerate() {
                let wv = lookup(&format!("stage{s}.layer{l}.w"))?;
                let bv = lookup(&format!("stage{s}.layer{l}.b"))?;
                if wv.len() != layer.w.len() || bv.len() != layer.b.len() {
                    return Err(format!("stage{s}.layer{l} has wrong shape"));
                }
                layer.w.copy_from_slice(wv);
                layer.b.copy_from_slice(bv);
            }
        }
        for (s, b) in w.head_bias.iter_mut().enumerate() {
            let hv = lookup(&format!("stage{s}.head_bias"))?;
            if hv.len() != b.len() {
                return Err(format!("stage{s}.head_bias has wrong shape"));
            }
            b.copy_from_slice(hv);
        }
        Ok(w)
    }
}
