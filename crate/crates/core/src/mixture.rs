//! Probability kernels: factorized 4-D Cauchy, categorical, and the full
//! mixture likelihood, all computed in log domain.
//!
//! Per-coordinate densities multiply across the four box sides, so linear
//! domain products underflow quickly; every likelihood here is a sum of
//! log-densities combined with log-sum-exp.

use alloc::vec::Vec;
use core::fmt;

use crate::data::GroundTruth;
use crate::geometry::Box;
use crate::math;

/// Floor applied to class probabilities and mixing coefficients before
/// taking logs, so that rounded-to-zero softmax outputs cannot poison the
/// loss with `-inf`.
pub const PROB_FLOOR: f64 = 1e-12;

/// One mixture component: mixing coefficient, 4-D Cauchy location/scale,
/// class distribution, and objectness.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentParams {
    pub pi: f64,
    pub mu: [f64; 4],
    pub gamma: [f64; 4],
    pub p: Vec<f64>,
    pub o: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub components: Vec<ComponentParams>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MixtureError {
    NonPositiveScale,
    NotOneHot,
    EmptyMixture,
    InvalidDistribution,
}

impl fmt::Display for MixtureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixtureError::NonPositiveScale => write!(f, "cauchy scale must be positive"),
            MixtureError::NotOneHot => write!(f, "class vector is not one-hot"),
            MixtureError::EmptyMixture => write!(f, "mixture must have at least one component"),
            MixtureError::InvalidDistribution => write!(f, "probability vector is invalid"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MixtureError {}

impl ComponentParams {
    pub fn validate(&self) -> Result<(), MixtureError> {
        if self.gamma.iter().any(|&g| !(g > 0.0)) {
            return Err(MixtureError::NonPositiveScale);
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(MixtureError::InvalidDistribution);
        }
        let sum: f64 = self.p.iter().sum();
        if math::abs(sum - 1.0) > 1e-9 || self.p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(MixtureError::InvalidDistribution);
        }
        Ok(())
    }
}

impl MixtureParams {
    pub fn validate(&self) -> Result<(), MixtureError> {
        if self.components.is_empty() {
            return Err(MixtureError::EmptyMixture);
        }
        let pi_sum: f64 = self.components.iter().map(|c| c.pi).sum();
        if math::abs(pi_sum - 1.0) > 1e-9 {
            return Err(MixtureError::InvalidDistribution);
        }
        for c in &self.components {
            c.validate()?;
        }
        Ok(())
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }
}

/// Log-density of the 1-D Cauchy: `f(x) = 1 / (π γ (1 + ((x-μ)/γ)²))`.
pub fn cauchy_logpdf_1d(x: f64, mu: f64, gamma: f64) -> Result<f64, MixtureError> {
    if !(gamma > 0.0) {
        return Err(MixtureError::NonPositiveScale);
    }
    let z = (x - mu) / gamma;
    Ok(-math::ln(math::PI * gamma) - math::ln_1p(z * z))
}

/// Partials of `cauchy_logpdf_1d` with respect to `(mu, gamma)`.
pub fn cauchy_logpdf_1d_grad(x: f64, mu: f64, gamma: f64) -> (f64, f64) {
    let z = (x - mu) / gamma;
    let denom = 1.0 + z * z;
    let d_mu = 2.0 * z / (gamma * denom);
    let d_gamma = -1.0 / gamma + 2.0 * z * z / (gamma * denom);
    (d_mu, d_gamma)
}

/// Factorized 4-D Cauchy log-density: sum of the per-side 1-D terms.
pub fn cauchy_logpdf_box(b: &Box, mu: &[f64; 4], gamma: &[f64; 4]) -> Result<f64, MixtureError> {
    let coords = b.coords();
    let mut sum = 0.0;
    for j in 0..4 {
        sum += cauchy_logpdf_1d(coords[j], mu[j], gamma[j])?;
    }
    Ok(sum)
}

/// Log-pmf of a one-hot draw from a categorical distribution, with the
/// probability floored at [`PROB_FLOOR`].
pub fn categorical_logpmf(c: &[f64], p: &[f64]) -> Result<f64, MixtureError> {
    let idx = one_hot_index(c).ok_or(MixtureError::NotOneHot)?;
    if idx >= p.len() {
        return Err(MixtureError::InvalidDistribution);
    }
    Ok(math::ln(p[idx].clamp(PROB_FLOOR, 1.0)))
}

pub(crate) fn one_hot_index(c: &[f64]) -> Option<usize> {
    let mut idx = None;
    for (i, &v) in c.iter().enumerate() {
        if v == 1.0 {
            if idx.is_some() {
                return None;
            }
            idx = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    idx
}

/// Log of a single summand of the mixture: `log(π_k F(b) P(c))`.
pub fn component_loglik(g: &GroundTruth, comp: &ComponentParams) -> Result<f64, MixtureError> {
    let log_pi = math::ln(comp.pi.clamp(PROB_FLOOR, 1.0));
    let log_f = cauchy_logpdf_box(&g.bbox, &comp.mu, &comp.gamma)?;
    let log_p = categorical_logpmf(&g.class_onehot, &comp.p)?;
    Ok(log_pi + log_f + log_p)
}

/// Log-likelihood of one ground truth under the full mixture.
pub fn mixture_loglik(g: &GroundTruth, m: &MixtureParams) -> Result<f64, MixtureError> {
    let logliks = component_logliks(g, m)?;
    Ok(math::logsumexp(&logliks))
}

/// Per-component log-likelihood vector for one ground truth.
pub fn component_logliks(g: &GroundTruth, m: &MixtureParams) -> Result<Vec<f64>, MixtureError> {
    if m.components.is_empty() {
        return Err(MixtureError::EmptyMixture);
    }
    m.components
        .iter()
        .map(|c| component_loglik(g, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(coords: [f64; 4], class: usize, num_classes: usize) -> GroundTruth {
        let b = Box::unnormalized(coords[0], coords[1], coords[2], coords[3]).unwrap();
        GroundTruth::new(b, class, num_classes)
    }

    fn comp(pi: f64, mu: [f64; 4], gamma: [f64; 4], p: Vec<f64>) -> ComponentParams {
        ComponentParams {
            pi,
            mu,
            gamma,
            p,
            o: 0.5,
        }
    }

    #[test]
    fn cauchy_1d_examples() {
        // peak of standard Cauchy is 1/(π γ)
        let peak = cauchy_logpdf_1d(0.3, 0.3, 1.0).unwrap();
        assert!((peak - math::ln(1.0 / math::PI)).abs() < 1e-14);
        // half-maximum point at x = μ + γ
        let half = cauchy_logpdf_1d(1.3, 0.3, 1.0).unwrap();
        assert!((half - math::ln(1.0 / (2.0 * math::PI))).abs() < 1e-14);
        // direct formula evaluation
        let v = cauchy_logpdf_1d(5.0, 0.0, 2.0).unwrap();
        assert!((v - math::ln(2.0 / (math::PI * 29.0))).abs() < 1e-14);
    }

    #[test]
    fn cauchy_rejects_nonpositive_scale() {
        assert_eq!(
            cauchy_logpdf_1d(0.0, 0.0, 0.0).unwrap_err(),
            MixtureError::NonPositiveScale
        );
        assert_eq!(
            cauchy_logpdf_1d(0.0, 0.0, -1.0).unwrap_err(),
            MixtureError::NonPositiveScale
        );
    }

    #[test]
    fn cauchy_box_examples() {
        let b = Box::unnormalized(0.1, 0.2, 0.6, 0.7).unwrap();
        let mu = b.coords();
        let ones = [1.0; 4];
        let at_peak = cauchy_logpdf_box(&b, &mu, &ones).unwrap();
        assert!((at_peak - 4.0 * math::ln(1.0 / math::PI)).abs() < 1e-12);
        // one side offset by γ
        let mut mu_off = mu;
        mu_off[2] += 1.0;
        let v = cauchy_logpdf_box(&b, &mu_off, &ones).unwrap();
        let expected = 3.0 * math::ln(1.0 / math::PI) + math::ln(1.0 / (2.0 * math::PI));
        assert!((v - expected).abs() < 1e-12);
        // wider scales
        let twos = [2.0; 4];
        let wide = cauchy_logpdf_box(&b, &mu, &twos).unwrap();
        assert!((wide - 4.0 * math::ln(1.0 / (2.0 * math::PI))).abs() < 1e-12);
    }

    #[test]
    fn categorical_examples() {
        assert_eq!(categorical_logpmf(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let uniform = categorical_logpmf(&[0.0, 0.0, 1.0, 0.0], &[0.25; 4]).unwrap();
        assert!((uniform - math::ln(0.25)).abs() < 1e-15);
        let v = categorical_logpmf(&[0.0, 1.0], &[0.7, 0.3]).unwrap();
        assert!((v - math::ln(0.3)).abs() < 1e-15);
        // exact zero probability is floored, not -inf
        let floored = categorical_logpmf(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((floored - math::ln(PROB_FLOOR)).abs() < 1e-9);
    }

    #[test]
    fn categorical_rejects_non_one_hot() {
        assert_eq!(
            categorical_logpmf(&[0.5, 0.5], &[0.5, 0.5]).unwrap_err(),
            MixtureError::NotOneHot
        );
        assert_eq!(
            categorical_logpmf(&[1.0, 1.0], &[0.5, 0.5]).unwrap_err(),
            MixtureError::NotOneHot
        );
    }

    #[test]
    fn component_loglik_examples() {
        let g = gt([0.2, 0.2, 0.8, 0.8], 0, 3);
        let c_full = comp(1.0, g.bbox.coords(), [1.0; 4], vec![1.0, 0.0, 0.0]);
        let v = component_loglik(&g, &c_full).unwrap();
        assert!((v - 4.0 * math::ln(1.0 / math::PI)).abs() < 1e-12);

        // π = 0 hits the log-domain floor
        let c_zero = comp(0.0, g.bbox.coords(), [1.0; 4], vec![1.0, 0.0, 0.0]);
        let z = component_loglik(&g, &c_zero).unwrap();
        assert!((z - (math::ln(PROB_FLOOR) + 4.0 * math::ln(1.0 / math::PI))).abs() < 1e-9);

        // halving π subtracts log 2
        let c_half = comp(0.5, g.bbox.coords(), [1.0; 4], vec![1.0, 0.0, 0.0]);
        let h = component_loglik(&g, &c_half).unwrap();
        assert!((h - (v + math::ln(0.5))).abs() < 1e-12);
    }

    #[test]
    fn mixture_loglik_identities() {
        let g = gt([0.2, 0.2, 0.8, 0.8], 1, 3);
        let single = comp(1.0, [0.1, 0.1, 0.9, 0.9], [0.5; 4], vec![0.2, 0.7, 0.1]);
        let m1 = MixtureParams {
            components: vec![single.clone()],
            num_classes: 3,
        };
        let mut halved = single.clone();
        halved.pi = 0.5;
        let m2 = MixtureParams {
            components: vec![halved.clone(), halved],
            num_classes: 3,
        };
        let a = mixture_loglik(&g, &m1).unwrap();
        let b = mixture_loglik(&g, &m2).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((a - component_loglik(&g, &single).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn mixture_loglik_matches_two_component_logsumexp() {
        let g = gt([0.3, 0.1, 0.7, 0.5], 0, 2);
        let c1 = comp(0.3, [0.2, 0.2, 0.6, 0.6], [0.1, 0.2, 0.3, 0.4], vec![0.8, 0.2]);
        let c2 = comp(0.7, [0.4, 0.0, 0.8, 0.4], [0.5, 0.4, 0.3, 0.2], vec![0.1, 0.9]);
        let a = component_loglik(&g, &c1).unwrap();
        let b = component_loglik(&g, &c2).unwrap();
        let m = MixtureParams {
            components: vec![c1, c2],
            num_classes: 2,
        };
        let v = mixture_loglik(&g, &m).unwrap();
        assert!((v - math::ln(math::exp(a) + math::exp(b))).abs() < 1e-12);
    }

    #[test]
    fn empty_mixture_is_an_error() {
        let g = gt([0.2, 0.2, 0.8, 0.8], 0, 2);
        let m = MixtureParams {
            components: vec![],
            num_classes: 2,
        };
        assert_eq!(mixture_loglik(&g, &m).unwrap_err(), MixtureError::EmptyMixture);
    }

    #[test]
    fn cauchy_pdf_integrates_to_one() {
        // trapezoidal quadrature over μ ± 1000γ captures >= 0.999 of the mass
        let (mu, gamma) = (0.3, 0.7);
        let lo = mu - 1000.0 * gamma;
        let hi = mu + 1000.0 * gamma;
        let n = 2_000_000usize;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| math::exp(cauchy_logpdf_1d(x, mu, gamma).unwrap());
        let mut sum = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            sum += f(lo + i as f64 * h);
        }
        let mass = sum * h;
        assert!(mass >= 0.999, "quadrature mass {mass}");
        assert!(mass <= 1.0 + 1e-6);
    }

    fn random_mixture(rng: &mut ChaCha8Rng, k: usize, c: usize) -> MixtureParams {
        let mut pis: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = pis.iter().sum();
        pis.iter_mut().for_each(|p| *p /= s);
        let components = pis
            .into_iter()
            .map(|pi| {
                let mut p: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
                let ps: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= ps);
                ComponentParams {
                    pi,
                    mu: core::array::from_fn(|_| rng.gen_range(-0.2..1.2)),
                    gamma: core::array::from_fn(|_| rng.gen_range(0.02..0.8)),
                    p,
                    o: rng.gen_range(0.1..0.9),
                }
            })
            .collect();
        MixtureParams {
            components,
            num_classes: c,
        }
    }

    #[test]
    fn analytic_partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let h = 1e-5;
        for _ in 0..50 {
            let k = rng.gen_range(1..5);
            let m = random_mixture(&mut rng, k, 3);
            let g = gt(
                {
                    let l = rng.gen_range(0.0..0.5);
                    let t = rng.gen_range(0.0..0.5);
                    [l, t, l + rng.gen_range(0.1..0.5), t + rng.gen_range(0.1..0.5)]
                },
                rng.gen_range(0..3),
                3,
            );
            let class = g.class_index().unwrap();
            let logliks = component_logliks(&g, &m).unwrap();
            let lse = math::logsumexp(&logliks);
            for ki in 0..k {
                let r = math::exp(logliks[ki] - lse);
                let comp = &m.components[ki];
                // μ and γ partials
                for j in 0..4 {
                    let (d_mu, d_gamma) =
                        cauchy_logpdf_1d_grad(g.bbox.coords()[j], comp.mu[j], comp.gamma[j]);
                    let check = |analytic: f64, fd: f64| {
                        let denom = analytic.abs().max(fd.abs()).max(1e-8);
                        assert!(
                            (analytic - fd).abs() / denom < 1e-5,
                            "analytic {analytic} vs fd {fd}"
                        );
                    };
                    let mut m_hi = m.clone();
                    let mut m_lo = m.clone();
                    m_hi.components[ki].mu[j] += h;
                    m_lo.components[ki].mu[j] -= h;
                    let fd = (mixture_loglik(&g, &m_hi).unwrap()
                        - mixture_loglik(&g, &m_lo).unwrap())
                        / (2.0 * h);
                    check(r * d_mu, fd);

                    let mut m_hi = m.clone();
                    let mut m_lo = m.clone();
                    m_hi.components[ki].gamma[j] += h;
                    m_lo.components[ki].gamma[j] -= h;
                    let fd = (mixture_loglik(&g, &m_hi).unwrap()
                        - mixture_loglik(&g, &m_lo).unwrap())
                        / (2.0 * h);
                    check(r * d_gamma, fd);
                }
                // π partial: treat entries as free formula inputs. At the
                // clamp boundary π = 1 (the K=1 case) a two-sided
                // difference straddles the kink, so skip it there.
                if comp.pi < 1.0 - h {
                    let mut m_hi = m.clone();
                    let mut m_lo = m.clone();
                    m_hi.components[ki].pi += h;
                    m_lo.components[ki].pi -= h;
                    let fd = (mixture_loglik(&g, &m_hi).unwrap()
                        - mixture_loglik(&g, &m_lo).unwrap())
                        / (2.0 * h);
                    let analytic = r / comp.pi;
                    assert!(
                        (analytic - fd).abs() / analytic.abs().max(1e-8) < 1e-5,
                        "pi partial: analytic {analytic} vs fd {fd}"
                    );
                }
                // p partial for the ground-truth class
                let mut m_hi = m.clone();
                let mut m_lo = m.clone();
                m_hi.components[ki].p[class] += h;
                m_lo.components[ki].p[class] -= h;
                let fd = (mixture_loglik(&g, &m_hi).unwrap() - mixture_loglik(&g, &m_lo).unwrap())
                    / (2.0 * h);
                let analytic = r / comp.p[class];
                assert!((analytic - fd).abs() / analytic.abs().max(1e-8) < 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn loglik_is_invariant_under_component_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(2..6);
            let m = random_mixture(&mut rng, k, 3);
            let g = gt([0.2, 0.3, 0.7, 0.9], 1, 3);
            let mut rev = m.clone();
            rev.components.reverse();
            let a = mixture_loglik(&g, &m).unwrap();
            let b = mixture_loglik(&g, &rev).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
