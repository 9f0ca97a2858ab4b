//! Numerical laboratory for in-context learning of linear regression with a
//! single-layer linear attention model.
//!
//! The crate is organised bottom-up:
//!
//! * [`taskgen`] samples tasks and prompts (Gaussian design, Gaussian prior,
//!   plus three misspecified label models).
//! * [`predictors`] holds the one-step-GD attention model, the explicit
//!   attention-block forward pass, Bayes-optimal ridge and OLS.
//! * [`theory`] evaluates the closed forms: `H̃_N`, `Γ*_N`, minimum and excess
//!   risk, effective dimension, the pretraining bound and rate predictions.
//! * [`pretrain`] runs online SGD with the geometric stepsize schedule and
//!   estimates risks by Monte Carlo.
//! * [`opcalc`] materialises operators on `d×d` matrices as `d²×d²` kernels and
//!   checks the operator identities and dominations used in the SGD analysis.
//! * [`harness`] wires everything into sweeps, a key=value config format, and
//!   CSV/SVG reports.
//!
//! All closed forms work in the eigenbasis of the covariate covariance `H`, so
//! `H = diag(λ)` throughout.

pub mod harness;
pub mod opcalc;
pub mod predictors;
pub mod pretrain;
pub mod rng;
pub mod stats;
pub mod taskgen;
pub mod theory;

pub use predictors::{AttentionBlocks, GammaMatrix};
pub use rng::RandomStream;
pub use taskgen::{Episode, LabelModel, SpectrumSpec, TaskDistribution};
pub use theory::PopulationContext;
