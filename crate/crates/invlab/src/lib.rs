//! A laboratory for training and benchmarking inventory-control policies on
//! differentiable simulators.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`autodiff`]) that is sufficient to differentiate a full multi-period
//! rollout of a neural buying policy ([`policy`]) through any of the five
//! inventory environments ([`envs`]). Policies are trained end-to-end by
//! backpropagating the total rollout reward ([`trainer`]), optionally with
//! structural penalties that nudge the learned policy towards known
//! monotonicity properties. Classical order-up-to heuristics and the Gamma
//! distribution math they rely on live in [`heuristics`]; [`evaluator`] rolls
//! any actor (neural or heuristic) through the same reward accounting so
//! comparisons are apples-to-apples. Synthetic product populations and demand
//! traces come from [`datagen`].

pub mod autodiff;
pub mod datagen;
pub mod envs;
pub mod error;
pub mod evaluator;
pub mod heuristics;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
