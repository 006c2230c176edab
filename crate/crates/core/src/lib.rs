//! Multi-object detection as regularized mixture-density estimation.
//!
//! The detector models the set of ground-truth boxes of a scene as samples
//! from a mixture of factorized 4-D Cauchy × categorical components and is
//! trained by minimizing a negative log-likelihood plus a maximum-component
//! regularizer that concentrates each object's probability mass onto a
//! single component. Everything here is desk-scale: scenes are small
//! synthetic rasters, the head is a per-proposal MLP, and all gradients are
//! coded by hand.
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats and the
//! command-line front end live in the companion `drmm-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baselines;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod math;
pub mod mixture;
pub mod model;

pub use geometry::Box;
pub use mixture::{ComponentParams, MixtureParams};
