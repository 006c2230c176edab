//! Training objectives: negative log-likelihood of the mixture, the
//! maximum-component regularizer, and their analytic gradients with
//! configurable stop-gradient routing inside the regularizer.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::GroundTruth;
use crate::math;
use crate::mixture::{
    self, cauchy_logpdf_1d_grad, MixtureError, MixtureParams, PROB_FLOOR,
};

/// Which likelihood factors the MCM term's gradient is allowed to reach.
/// The NLL term is never stop-gradiented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopGradConfig {
    pub stop_pi: bool,
    pub stop_cauchy: bool,
    pub stop_categorical: bool,
}

impl Default for StopGradConfig {
    fn default() -> Self {
        Self {
            stop_pi: false,
            stop_cauchy: true,
            stop_categorical: false,
        }
    }
}

impl StopGradConfig {
    pub fn none() -> Self {
        Self {
            stop_pi: false,
            stop_cauchy: false,
            stop_categorical: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageLoss {
    pub nll: f64,
    pub mcm: f64,
    pub exp_neg_mcm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub nll: f64,
    pub mcm: f64,
    pub total: f64,
    pub per_stage: Vec<StageLoss>,
}

/// Gradients of a scalar loss with respect to every mixture parameter
/// entry, treating each entry as a free input of the likelihood formula.
/// The activation-chain Jacobians (softmax, softplus, sigmoid, objectness
/// normalization) are applied by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub d_pi: Vec<f64>,
    pub d_mu: Vec<[f64; 4]>,
    pub d_gamma: Vec<[f64; 4]>,
    pub d_p: Vec<Vec<f64>>,
    /// Direct objectness gradients, bypassing the π normalization. The
    /// mixture losses leave these zero; the bipartite baseline's
    /// background term and the count anchor write here.
    pub d_o: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(k: usize, c: usize) -> Self {
        Self {
            d_pi: vec![0.0; k],
            d_mu: vec![[0.0; 4]; k],
            d_gamma: vec![[0.0; 4]; k],
            d_p: vec![vec![0.0; c]; k],
            d_o: vec![0.0; k],
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.d_pi.iter_mut().for_each(|v| *v *= s);
        self.d_o.iter_mut().for_each(|v| *v *= s);
        for g in &mut self.d_mu {
            g.iter_mut().for_each(|v| *v *= s);
        }
        for g in &mut self.d_gamma {
            g.iter_mut().for_each(|v| *v *= s);
        }
        for g in &mut self.d_p {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Mean over ground truths of `-log p(g_i | X)`. Empty `gts` contributes 0.
pub fn nll_loss(gts: &[GroundTruth], m: &MixtureParams) -> Result<f64, MixtureError> {
    if gts.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for g in gts {
        sum -= mixture_loglik_checked(g, m)?;
    }
    Ok(sum / gts.len() as f64)
}

/// Mean over ground truths of `-log(max_k ℓ_k / Σ_k ℓ_k)`; always ≥ 0.
pub fn mcm_loss(gts: &[GroundTruth], m: &MixtureParams) -> Result<f64, MixtureError> {
    if gts.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for g in gts {
        let logliks = mixture::component_logliks(g, m)?;
        sum += per_gt_mcm(&logliks);
    }
    Ok(sum / gts.len() as f64)
}

/// MCM for a single ground truth from its component log-likelihoods.
/// Ties for the max break toward the lowest index.
pub(crate) fn per_gt_mcm(logliks: &[f64]) -> f64 {
    let lse = math::logsumexp(logliks);
    let max = argmax(logliks);
    // lse >= max always; clamp tiny negative rounding away
    (lse - logliks[max]).max(0.0)
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut idx = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[idx] {
            idx = i;
        }
    }
    idx
}

/// Total loss `L = L_NLL + β · L_MCM` for a single stage.
pub fn total_loss(
    gts: &[GroundTruth],
    m: &MixtureParams,
    beta: f64,
    _cfg: &StopGradConfig,
) -> Result<LossReport, MixtureError> {
    total_loss_multi(gts, core::slice::from_ref(m), beta, _cfg)
}

/// Total loss over all stages: per-stage losses are computed independently
/// and summed. Stop-gradient flags never change forward values.
pub fn total_loss_multi(
    gts: &[GroundTruth],
    stages: &[MixtureParams],
    beta: f64,
    _cfg: &StopGradConfig,
) -> Result<LossReport, MixtureError> {
    let mut per_stage = Vec::with_capacity(stages.len());
    let mut nll_sum = 0.0;
    let mut mcm_sum = 0.0;
    for m in stages {
        let nll = nll_loss(gts, m)?;
        let mcm = mcm_loss(gts, m)?;
        per_stage.push(StageLoss {
            nll,
            mcm,
            exp_neg_mcm: math::exp(-mcm),
        });
        nll_sum += nll;
        mcm_sum += mcm;
    }
    Ok(LossReport {
        nll: nll_sum,
        mcm: mcm_sum,
        total: nll_sum + beta * mcm_sum,
        per_stage,
    })
}

/// Analytic gradient of `L = L_NLL + β·L_MCM` (mean over `gts`) with
/// respect to every mixture parameter entry.
///
/// Override `chosen` to route the MCM "max" component per ground truth
/// (used by the bipartite-matched MCM variant); `None` uses the argmax.
pub fn loss_backward(
    gts: &[GroundTruth],
    m: &MixtureParams,
    beta: f64,
    cfg: &StopGradConfig,
) -> Result<ParamGrads, MixtureError> {
    loss_backward_with_max(gts, m, beta, cfg, None)
}

pub fn loss_backward_with_max(
    gts: &[GroundTruth],
    m: &MixtureParams,
    beta: f64,
    cfg: &StopGradConfig,
    chosen: Option<&[usize]>,
) -> Result<ParamGrads, MixtureError> {
    let k = m.num_components();
    if k == 0 {
        return Err(MixtureError::EmptyMixture);
    }
    let mut grads = ParamGrads::zeros(k, m.num_classes);
    if gts.is_empty() {
        return Ok(grads);
    }
    let inv_n = 1.0 / gts.len() as f64;

    for (gi, g) in gts.iter().enumerate() {
        let logliks = mixture::component_logliks(g, m)?;
        let lse = math::logsumexp(&logliks);
        let max_idx = match chosen {
            Some(c) => c[gi],
            None => argmax(&logliks),
        };
        let class = mixture::one_hot_index(&g.class_onehot).ok_or(MixtureError::NotOneHot)?;

        for ki in 0..k {
            let r = math::exp(logliks[ki] - lse);
            // d(-loglik)/da_k = -r_k; dMCM/da_k = r_k - [k = max]
            let nll_coef = -r * inv_n;
            let mcm_coef = beta * (r - if ki == max_idx { 1.0 } else { 0.0 }) * inv_n;

            let comp = &m.components[ki];
            let pi_coef = nll_coef + if cfg.stop_pi { 0.0 } else { mcm_coef };
            let cauchy_coef = nll_coef + if cfg.stop_cauchy { 0.0 } else { mcm_coef };
            let cat_coef = nll_coef + if cfg.stop_categorical { 0.0 } else { mcm_coef };

            if comp.pi > PROB_FLOOR {
                grads.d_pi[ki] += pi_coef / comp.pi;
            }
            let coords = g.bbox.coords();
            for j in 0..4 {
                let (d_mu, d_gamma) = cauchy_logpdf_1d_grad(coords[j], comp.mu[j], comp.gamma[j]);
                grads.d_mu[ki][j] += cauchy_coef * d_mu;
                grads.d_gamma[ki][j] += cauchy_coef * d_gamma;
            }
            if comp.p[class] > PROB_FLOOR {
                grads.d_p[ki][class] += cat_coef / comp.p[class];
            }
        }
    }
    Ok(grads)
}

fn mixture_loglik_checked(g: &GroundTruth, m: &MixtureParams) -> Result<f64, MixtureError> {
    mixture::mixture_loglik(g, m)
}
