//! Online SGD pretraining of `Γ` and Monte Carlo risk estimation.
//!
//! Each step draws a fresh task and prompt, and applies
//! `Γ ← Γ − γₜ r x uᵀ` with `u = Xᵀy/N` and `r = ⟨Γu, x⟩ − y`. Stepsizes follow
//! a geometric schedule: `L = max(1, ⌊log₂ T⌋)` epochs of `K = ⌈T/L⌉` steps,
//! halving after each epoch.

use log::warn;
use thiserror::Error;

use crate::predictors::{predict_attention, GammaMatrix, PredictError};
use crate::rng::{domain, RandomStream};
use crate::stats::{par_estimate, Estimate};
use crate::taskgen::{sample_episode, Episode, LabelModel, TaskDistribution};
use crate::theory::{self, PopulationContext, PreconditionMode};

/// Iterates are aborted once `‖Γ‖_F` exceeds this multiple of `‖Γ*‖_F`.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PretrainError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("SGD diverged at step {step}: excess risk {excess_risk:.3e}")]
    Diverged { step: usize, excess_risk: f64 },
    #[error(transparent)]
    Predict(#[from] PredictError),
}

/// Geometrically decaying stepsize schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepsizeSchedule {
    gamma0: f64,
    t_total: usize,
    epoch_len: usize,
    num_epochs: usize,
}

impl StepsizeSchedule {
    pub fn new(gamma0: f64, t_total: usize) -> Result<Self, PretrainError> {
        if !(gamma0 >= 0.0 && gamma0.is_finite()) {
            return Err(PretrainError::Invalid(format!("γ₀ must be >= 0, got {gamma0}")));
        }
        if t_total == 0 {
            return Err(PretrainError::Invalid("schedule needs T >= 1".into()));
        }
        let num_epochs = (t_total.ilog2() as usize).max(1);
        let epoch_len = t_total.div_ceil(num_epochs);
        Ok(Self {
            gamma0,
            t_total,
            epoch_len,
            num_epochs,
        })
    }

    pub fn gamma0(&self) -> f64 {
        self.gamma0
    }

    pub fn t_total(&self) -> usize {
        self.t_total
    }

    /// `K`.
    pub fn epoch_len(&self) -> usize {
        self.epoch_len
    }

    /// `L`.
    pub fn num_epochs(&self) -> usize {
        self.num_epochs
    }

    /// `γₜ` for `1 ≤ t ≤ T`.
    pub fn stepsize_at(&self, t: usize) -> Result<f64, PretrainError> {
        if t == 0 || t > self.t_total {
            return Err(PretrainError::Invalid(format!(
                "step {t} outside 1..={}",
                self.t_total
            )));
        }
        let level = (t - 1) / self.epoch_len;
        Ok(self.gamma0 / 2f64.powi(level as i32))
    }

    /// `(γ, number of steps)` for each epoch actually visited.
    pub fn epochs(&self) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut level = 0;
        while start < self.t_total {
            let steps = self.epoch_len.min(self.t_total - start);
            out.push((self.gamma0 / 2f64.powi(level), steps));
            start += steps;
            level += 1;
        }
        out
    }
}

/// One SGD step on the halved squared loss.
pub fn sgd_step(current: &GammaMatrix, ep: &Episode, gamma: f64) -> Result<GammaMatrix, PretrainError> {
    let mut next = current.clone();
    sgd_step_in_place(&mut next, ep, gamma)?;
    Ok(next)
}

fn sgd_step_in_place(gamma_mat: &mut GammaMatrix, ep: &Episode, gamma: f64) -> Result<(), PretrainError> {
    let pred = predict_attention(gamma_mat, ep)?;
    if ep.is_empty() {
        return Ok(());
    }
    let u = ep.moment_vector();
    let r = pred - ep.label();
    gamma_mat.matrix_mut().ger(-gamma * r, ep.query_x(), &u, 1.0);
    Ok(())
}

/// Which iterates to keep.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointPolicy {
    None,
    /// `{1, 2, 5} × 10^k` up to `T`, plus `T`.
    LogGrid,
    Explicit(Vec<usize>),
}

/// `{1, 2, 5} × 10^k ∩ [1, T]`, with `T` appended if absent.
pub fn log_grid(t_total: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut base = 1usize;
    'outer: loop {
        for m in [1, 2, 5] {
            let Some(v) = base.checked_mul(m) else { break 'outer };
            if v > t_total {
                break 'outer;
            }
            out.push(v);
        }
        let Some(b) = base.checked_mul(10) else { break };
        base = b;
    }
    if t_total > 0 && out.last() != Some(&t_total) {
        out.push(t_total);
    }
    out
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub dist: TaskDistribution,
    pub context_len: usize,
    pub t_total: usize,
    /// `None` selects `1/(2 tr H tr H̃)`.
    pub gamma0: Option<f64>,
    /// `None` selects `Γ₀ = 0`.
    pub gamma_init: Option<GammaMatrix>,
    pub label_model: LabelModel,
    pub seed: u64,
    pub checkpoints: CheckpointPolicy,
}

impl PretrainConfig {
    pub fn new(dist: TaskDistribution, context_len: usize, t_total: usize, seed: u64) -> Self {
        Self {
            dist,
            context_len,
            t_total,
            gamma0: None,
            gamma_init: None,
            label_model: LabelModel::Gaussian,
            seed,
            checkpoints: CheckpointPolicy::None,
        }
    }

    pub fn with_gamma0(mut self, gamma0: f64) -> Self {
        self.gamma0 = Some(gamma0);
        self
    }

    pub fn with_label_model(mut self, model: LabelModel) -> Self {
        self.label_model = model;
        self
    }

    pub fn with_checkpoints(mut self, policy: CheckpointPolicy) -> Self {
        self.checkpoints = policy;
        self
    }

    pub fn with_gamma_init(mut self, init: GammaMatrix) -> Self {
        self.gamma_init = Some(init);
        self
    }

    /// Stepsize actually used.
    pub fn resolved_gamma0(&self) -> Result<f64, PretrainError> {
        match self.gamma0 {
            Some(g) => Ok(g),
            None => {
                let ctx = PopulationContext::new(&self.dist, self.context_len)
                    .map_err(|e| PretrainError::Invalid(e.to_string()))?;
                Ok(theory::max_stepsize(&ctx, PreconditionMode::Practical))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub gamma: GammaMatrix,
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub config: PretrainConfig,
    pub gamma0: f64,
    pub trajectory: Vec<Checkpoint>,
    pub final_gamma: GammaMatrix,
}

/// Runs `T` SGD steps, one fresh episode per step, and returns the last
/// iterate. Step `t` uses the stream `(seed, PRETRAIN, t)`.
pub fn pretrain(config: &PretrainConfig) -> Result<PretrainRun, PretrainError> {
    let dim = config.dist.dim();
    let ctx = PopulationContext::new(&config.dist, config.context_len)
        .map_err(|e| PretrainError::Invalid(e.to_string()))?;
    config
        .label_model
        .validate()
        .map_err(|e| PretrainError::Invalid(e.to_string()))?;
    let gamma0 = config.resolved_gamma0()?;
    let mut gamma_mat = config.gamma_init.clone().unwrap_or_else(|| GammaMatrix::zeros(dim));
    if gamma_mat.dim() != dim {
        return Err(PretrainError::Invalid(format!(
            "initialization is {0}x{0}, distribution has dimension {dim}",
            gamma_mat.dim()
        )));
    }
    if !gamma_mat.is_diagonal() {
        warn!("initialization does not commute with H; the pretraining bound does not apply");
    }
    let wanted: Vec<usize> = match &config.checkpoints {
        CheckpointPolicy::None => Vec::new(),
        CheckpointPolicy::LogGrid => log_grid(config.t_total),
        CheckpointPolicy::Explicit(v) => {
            let mut v: Vec<usize> = v.iter().copied().filter(|&t| t <= config.t_total).collect();
            v.sort_unstable();
            v.dedup();
            if config.t_total > 0 && v.last() != Some(&config.t_total) {
                v.push(config.t_total);
            }
            v
        }
    };
    let mut trajectory = Vec::with_capacity(wanted.len());
    let mut next_ck = wanted.iter().peekable();
    if next_ck.peek() == Some(&&0) {
        trajectory.push(Checkpoint { step: 0, gamma: gamma_mat.clone() });
        next_ck.next();
    }
    if config.t_total > 0 {
        let schedule = StepsizeSchedule::new(gamma0, config.t_total)?;
        let limit = DIVERGENCE_FACTOR * theory::gamma_star(&ctx).matrix().norm();
        for t in 1..=config.t_total {
            let mut rng = RandomStream::derive(config.seed, domain::PRETRAIN, t as u64);
            let ep = sample_episode(&config.dist, config.context_len, config.label_model, &mut rng);
            sgd_step_in_place(&mut gamma_mat, &ep, schedule.stepsize_at(t)?)?;
            let norm = gamma_mat.matrix().norm();
            if norm.is_nan() || norm > limit {
                let excess = theory::excess_risk(&gamma_mat, &ctx).unwrap_or(f64::INFINITY);
                return Err(PretrainError::Diverged { step: t, excess_risk: excess });
            }
            if next_ck.peek() == Some(&&t) {
                trajectory.push(Checkpoint { step: t, gamma: gamma_mat.clone() });
                next_ck.next();
            }
        }
    }
    Ok(PretrainRun {
        config: config.clone(),
        gamma0,
        trajectory,
        final_gamma: gamma_mat,
    })
}

/// Mean and standard error of `f(episode)` over `num_episodes` episodes, the
/// `i`-th drawn from stream `(seed, EVAL, i)`. The result is bit-identical for
/// any rayon thread count.
pub fn mc_mean<F>(
    dist: &TaskDistribution,
    n: usize,
    model: LabelModel,
    num_episodes: usize,
    seed: u64,
    f: F,
) -> Estimate
where
    F: Fn(&Episode) -> f64 + Sync,
{
    par_estimate(num_episodes, |i| {
        let mut rng = RandomStream::derive(seed, domain::EVAL, i as u64);
        f(&sample_episode(dist, n, model, &mut rng))
    })
}

/// Monte Carlo ICL risk `E(⟨Γ Xᵀy/n, x⟩ − y)²`.
pub fn mc_risk(
    params: &GammaMatrix,
    dist: &TaskDistribution,
    n: usize,
    model: LabelModel,
    num_episodes: usize,
    seed: u64,
) -> Result<Estimate, PretrainError> {
    if num_episodes < 2 {
        return Err(PretrainError::Invalid("mc_risk needs at least 2 episodes".into()));
    }
    if params.dim() != dist.dim() {
        return Err(PretrainError::Invalid(format!(
            "Γ is {0}x{0}, distribution has dimension {1}",
            params.dim(),
            dist.dim()
        )));
    }
    Ok(mc_mean(dist, n, model, num_episodes, seed, |ep| {
        let pred = predict_attention(params, ep).expect("dimension checked above");
        (pred - ep.label()).powi(2)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn dist(spec: &[f64]) -> TaskDistribution {
        TaskDistribution::new(1.0, 1.0, spec.to_vec()).unwrap()
    }

    #[test]
    fn schedule_shape() {
        let s = StepsizeSchedule::new(0.3, 100).unwrap();
        assert_eq!((s.num_epochs(), s.epoch_len()), (6, 17));
        assert_eq!(s.stepsize_at(1).unwrap(), 0.3);
        assert_eq!(s.stepsize_at(17).unwrap(), 0.3);
        assert_eq!(s.stepsize_at(18).unwrap(), 0.15);
        assert!(s.stepsize_at(0).is_err());
        assert!(s.stepsize_at(101).is_err());
    }

    #[test]
    fn schedule_distinct_values() {
        for t_total in [1usize, 2, 3, 7, 100, 1000, 1023, 1024, 100_000] {
            let s = StepsizeSchedule::new(1.0, t_total).unwrap();
            let vals: Vec<f64> = (1..=t_total).map(|t| s.stepsize_at(t).unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]));
            let mut distinct = vals.clone();
            distinct.dedup();
            let expected = s.num_epochs().min(t_total.div_ceil(s.epoch_len()));
            assert_eq!(distinct.len(), expected);
            assert!(s.epoch_len() * s.num_epochs() >= t_total);
            let steps: usize = s.epochs().iter().map(|e| e.1).sum();
            assert_eq!(steps, t_total);
        }
    }

    #[test]
    fn scalar_sgd_step() {
        // u = Xᵀy/n = 2, x = 3, y = 1, Γ = 0 → r = −1, Γ' = 0 + 0.1·3·2 = 0.6
        let ep = Episode::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 2.0),
            DVector::from_element(1, 3.0),
            1.0,
        )
        .unwrap();
        let next = sgd_step(&GammaMatrix::zeros(1), &ep, 0.1).unwrap();
        assert!((next.matrix()[(0, 0)] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_leaves_gamma() {
        // Γ = 1, u = 2, x = 3 → prediction 6 = label
        let ep = Episode::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 2.0),
            DVector::from_element(1, 3.0),
            6.0,
        )
        .unwrap();
        let g = GammaMatrix::identity(1);
        assert_eq!(sgd_step(&g, &ep, 0.5).unwrap(), g);
    }

    #[test]
    fn log_grid_values() {
        assert_eq!(log_grid(1), vec![1]);
        assert_eq!(log_grid(100), vec![1, 2, 5, 10, 20, 50, 100]);
        assert_eq!(log_grid(300), vec![1, 2, 5, 10, 20, 50, 100, 200, 300]);
        assert!(log_grid(0).is_empty());
    }

    #[test]
    fn trivial_runs_return_init() {
        let d = dist(&[1.0, 0.5]);
        let init = GammaMatrix::from_diagonal(&[0.3, -0.2]);
        let run = pretrain(&PretrainConfig::new(d.clone(), 4, 0, 1).with_gamma_init(init.clone())).unwrap();
        assert_eq!(run.final_gamma, init);
        let run = pretrain(
            &PretrainConfig::new(d, 4, 500, 1)
                .with_gamma0(0.0)
                .with_gamma_init(init.clone()),
        )
        .unwrap();
        assert_eq!(run.final_gamma, init);
    }

    #[test]
    fn checkpoints_end_at_final() {
        let d = dist(&[1.0, 0.5]);
        let run = pretrain(&PretrainConfig::new(d, 4, 300, 2).with_checkpoints(CheckpointPolicy::LogGrid)).unwrap();
        let steps: Vec<usize> = run.trajectory.iter().map(|c| c.step).collect();
        assert_eq!(steps, log_grid(300));
        assert_eq!(run.trajectory.last().unwrap().gamma, run.final_gamma);
    }

    #[test]
    fn divergence_detected() {
        let d = dist(&[1.0, 0.5]);
        let err = pretrain(&PretrainConfig::new(d, 4, 2000, 3).with_gamma0(50.0)).unwrap_err();
        assert!(matches!(err, PretrainError::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn pretraining_is_deterministic() {
        let d = dist(&[1.0, 0.5, 0.25]);
        let cfg = PretrainConfig::new(d, 6, 200, 9).with_gamma0(0.1);
        assert_eq!(pretrain(&cfg).unwrap().final_gamma, pretrain(&cfg).unwrap().final_gamma);
    }

    #[test]
    fn zero_predictor_risk() {
        let d = dist(&[1.0, 0.5, 0.25]);
        let est = mc_risk(&GammaMatrix::zeros(3), &d, 5, LabelModel::Gaussian, 20_000, 4).unwrap();
        assert!(est.within(1.0 + d.trace(), 3.0), "{est:?}");
    }

    #[test]
    fn mc_risk_needs_two_episodes() {
        let d = dist(&[1.0]);
        assert!(mc_risk(&GammaMatrix::zeros(1), &d, 2, LabelModel::Gaussian, 1, 0).is_err());
    }

    #[test]
    fn mc_risk_independent_of_thread_count() {
        let d = dist(&[1.0, 0.5, 0.25]);
        let g = GammaMatrix::from_diagonal(&[0.5, 0.4, 0.3]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mc_risk(&g, &d, 5, LabelModel::Gaussian, 10_000, 8).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }
}
