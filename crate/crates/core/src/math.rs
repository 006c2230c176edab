//! Scalar math helpers.
//!
//! All transcendental functions go through `libm` so that results are
//! bit-identical whether the crate is built with or without `std`.

use alloc::vec::Vec;

pub const PI: f64 = core::f64::consts::PI;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

/// Numerically stable log(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + ln_1p(exp(-x))
    } else {
        ln_1p(exp(x))
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// log Σ exp(x_i), stable for terms spanning many hundreds of nats.
///
/// Returns `-inf` for an empty slice or when every term is `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for &x in xs {
        sum += exp(x - m);
    }
    m + ln(sum)
}

/// Softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in logits {
        if x > m {
            m = x;
        }
    }
    let mut out: Vec<f64> = logits.iter().map(|&x| exp(x - m)).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}
