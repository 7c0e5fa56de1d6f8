//! Adaptive risk-aware track driving at desk scale.
//!
//! The crate bundles everything needed to study adaptation across randomized
//! vehicle dynamics: a planar vehicle simulator with per-system parameter
//! randomization ([`sim`]), random track generation and the geometric task
//! functionals ([`track`]), a small reverse-mode autodiff engine and the
//! neural layers built on it ([`autodiff`], [`nn`]), the two learned models —
//! a set-transformer system encoder and a recurrent probabilistic dynamics
//! model ([`models`]) — a CVaR-based MPPI controller ([`controller`]), the
//! collect/train loop ([`training`]), and the experiment harness that drives
//! trials and emits result tables ([`harness`]).
//!
//! Candidate evaluation and trial execution are data-parallel via rayon when
//! the `parallel` feature (default) is enabled; disabling it yields a fully
//! sequential build with identical outputs.

pub mod autodiff;
pub mod config;
pub mod controller;
pub mod error;
pub mod exec;
pub mod harness;
pub mod models;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod track;
pub mod training;

pub use error::{Error, Result};
