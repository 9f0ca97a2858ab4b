//! Closed-form risk quantities, all evaluated spectrally in the eigenbasis of
//! `H`.
//!
//! Notation: `λ` is the spectrum of `H`, `N` the context length, `c_N =
//! (tr H + σ²/ψ²)/N`. Then
//!
//! * `λ̃ⱼ = ψ² λⱼ (c_N + (N+1)/N λⱼ)` (second moment of `u = Xᵀy/N`),
//! * `Γ*ᵢ = 1 / (c_N + (N+1)/N λᵢ)`,
//! * `min risk = σ² + ψ² Σᵢ Γ*ᵢ λᵢ (c_N + λᵢ/N)`,
//! * `excess(Γ) = Σᵢⱼ λᵢ (Γ − Γ*)ᵢⱼ² λ̃ⱼ`.

use log::warn;
use thiserror::Error;

use crate::predictors::GammaMatrix;
use crate::pretrain::StepsizeSchedule;
use crate::taskgen::{SpectrumSpec, TaskDistribution, UNIFORM_FLOOR};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("shape mismatch: Γ is {found}x{found}, distribution has dimension {expected}")]
    Shape { expected: usize, found: usize },
}

/// A distribution paired with a context length (`N` for pretraining, `M` for
/// inference).
#[derive(Debug, Clone, Copy)]
pub struct PopulationContext<'a> {
    dist: &'a TaskDistribution,
    context_len: usize,
}

impl<'a> PopulationContext<'a> {
    pub fn new(dist: &'a TaskDistribution, context_len: usize) -> Result<Self, TheoryError> {
        if context_len == 0 {
            return Err(TheoryError::Invalid("context length must be at least 1".into()));
        }
        Ok(Self { dist, context_len })
    }

    pub fn dist(&self) -> &'a TaskDistribution {
        self.dist
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    /// `(tr H + σ²/ψ²)/N`.
    fn shift(&self) -> f64 {
        let d = self.dist;
        (d.trace() + d.noise_var() / d.prior_var()) / self.context_len as f64
    }

    fn growth(&self) -> f64 {
        (self.context_len as f64 + 1.0) / self.context_len as f64
    }
}

/// Eigenvalues of `H̃_N`.
pub fn tilde_h(ctx: &PopulationContext) -> Vec<f64> {
    let (c, g, psi2) = (ctx.shift(), ctx.growth(), ctx.dist.prior_var());
    ctx.dist
        .spectrum()
        .iter()
        .map(|&l| psi2 * l * (c + g * l))
        .collect()
}

/// Diagonal of `Γ*_N`.
pub fn gamma_star_diag(ctx: &PopulationContext) -> Vec<f64> {
    let (c, g) = (ctx.shift(), ctx.growth());
    ctx.dist.spectrum().iter().map(|&l| 1.0 / (c + g * l)).collect()
}

/// `Γ*_N`, the unique minimizer of the population ICL risk.
pub fn gamma_star(ctx: &PopulationContext) -> GammaMatrix {
    GammaMatrix::from_diagonal(&gamma_star_diag(ctx))
}

/// Minimum ICL risk `risk_N(Γ*_N)`.
pub fn min_risk(ctx: &PopulationContext) -> f64 {
    let d = ctx.dist;
    let n = ctx.context_len as f64;
    let c = ctx.shift();
    let gs = gamma_star_diag(ctx);
    let tr: f64 = d
        .spectrum()
        .iter()
        .zip(&gs)
        .map(|(&l, &g)| g * l * (c + l / n))
        .sum();
    d.noise_var() + d.prior_var() * tr
}

/// Excess risk `⟨H, (Γ − Γ*) H̃ (Γ − Γ*)ᵀ⟩`.
pub fn excess_risk(params: &GammaMatrix, ctx: &PopulationContext) -> Result<f64, TheoryError> {
    let dim = ctx.dist.dim();
    if params.dim() != dim {
        return Err(TheoryError::Shape {
            expected: dim,
            found: params.dim(),
        });
    }
    let lam = ctx.dist.spectrum();
    let lt = tilde_h(ctx);
    let gs = gamma_star_diag(ctx);
    let g = params.matrix();
    let mut total = 0.0;
    for i in 0..dim {
        let mut row = 0.0;
        for j in 0..dim {
            let dij = g[(i, j)] - if i == j { gs[i] } else { 0.0 };
            row += dij * dij * lt[j];
        }
        total += lam[i] * row;
    }
    Ok(total)
}

/// `risk_N(Γ) = min_risk + excess_risk`.
pub fn risk(params: &GammaMatrix, ctx: &PopulationContext) -> Result<f64, TheoryError> {
    Ok(min_risk(ctx) + excess_risk(params, ctx)?)
}

/// `T_eff = T / log₂ T`, matching the base of the stepsize schedule.
pub fn effective_tasks(t_total: usize) -> f64 {
    let t = t_total as f64;
    t / t.log2()
}

/// `(D_eff, T_eff)` with `D_eff = Σᵢⱼ min{1, T_eff² γ₀² λᵢ² λ̃ⱼ²}`.
pub fn effective_dim(
    ctx: &PopulationContext,
    t_total: usize,
    gamma0: f64,
) -> Result<(f64, f64), TheoryError> {
    if t_total < 2 {
        return Err(TheoryError::Invalid(format!("effective dimension needs T >= 2, got {t_total}")));
    }
    if !(gamma0 > 0.0 && gamma0.is_finite()) {
        return Err(TheoryError::Invalid(format!("γ₀ must be positive, got {gamma0}")));
    }
    let t_eff = effective_tasks(t_total);
    let lt = tilde_h(ctx);
    let scale = t_eff * gamma0;
    let d_eff = ctx
        .dist
        .spectrum()
        .iter()
        .map(|&l| lt.iter().map(|&m| (scale * l * m).powi(2).min(1.0)).sum::<f64>())
        .sum();
    Ok((d_eff, t_eff))
}

/// Which constant the stepsize precondition `γ₀ ≤ 1/(c tr H tr H̃)` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreconditionMode {
    /// `c = 16·3⁷`, the conservative constant of the operator analysis.
    Strict,
    /// `c = 2`, the regime of tuned stepsizes used in practice.
    Practical,
}

impl PreconditionMode {
    pub fn constant(&self) -> f64 {
        match self {
            PreconditionMode::Strict => 16.0 * 3f64.powi(7),
            PreconditionMode::Practical => 2.0,
        }
    }
}

/// The two terms of the pretraining excess-risk bound (constants set to 1).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub bias_term: f64,
    pub variance_term: f64,
    pub d_eff: f64,
    pub t_eff: f64,
    pub gamma0: f64,
    pub precondition_met: bool,
    pub warnings: Vec<String>,
}

impl BoundReport {
    pub fn total(&self) -> f64 {
        self.bias_term + self.variance_term
    }
}

/// Largest stepsize allowed by the precondition in `mode`.
pub fn max_stepsize(ctx: &PopulationContext, mode: PreconditionMode) -> f64 {
    let tr_tilde: f64 = tilde_h(ctx).iter().sum();
    1.0 / (mode.constant() * ctx.dist.trace() * tr_tilde)
}

/// Evaluates the pretraining bound
/// `Σᵢ λᵢλ̃ᵢ Πₜ(1 − γₜλᵢλ̃ᵢ)² (Γ₀ − Γ*)ᵢ² + V · D_eff/T_eff`
/// where `V = ψ² tr H + σ²`, plus `⟨HH̃, (Γ₀ − Γ*)²⟩` when `Γ₀ ≠ 0`.
pub fn pretrain_bound(
    ctx: &PopulationContext,
    t_total: usize,
    gamma0: f64,
    gamma_init: &GammaMatrix,
    mode: PreconditionMode,
) -> Result<BoundReport, TheoryError> {
    let dim = ctx.dist.dim();
    if gamma_init.dim() != dim {
        return Err(TheoryError::Shape {
            expected: dim,
            found: gamma_init.dim(),
        });
    }
    if !gamma_init.is_diagonal() {
        return Err(TheoryError::Invalid(
            "the bound requires an initialization that commutes with H (diagonal)".into(),
        ));
    }
    let schedule = StepsizeSchedule::new(gamma0, t_total)
        .map_err(|e| TheoryError::Invalid(e.to_string()))?;
    let (d_eff, t_eff) = effective_dim(ctx, t_total, gamma0)?;
    let mut warnings = Vec::new();
    let limit = max_stepsize(ctx, mode);
    let precondition_met = gamma0 <= limit;
    if !precondition_met {
        let msg = format!(
            "γ₀ = {gamma0} exceeds 1/(c tr H tr H̃) = {limit:.3e} (c = {}); bound not guaranteed",
            mode.constant()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let lam = ctx.dist.spectrum();
    let lt = tilde_h(ctx);
    let gs = gamma_star_diag(ctx);
    let init = gamma_init.diagonal();
    let mut bias = 0.0;
    let mut init_energy = 0.0;
    for i in 0..dim {
        let a = lam[i] * lt[i];
        let e2 = (init[i] - gs[i]).powi(2);
        let mut contraction = 1.0;
        for (gamma, steps) in schedule.epochs() {
            contraction *= ((1.0 - gamma * a).powi(2)).powi(steps as i32);
        }
        bias += a * contraction * e2;
        init_energy += a * e2;
    }
    let d = ctx.dist;
    let mut noise = d.prior_var() * d.trace() + d.noise_var();
    if init.iter().any(|&g| g != 0.0) {
        noise += init_energy;
    }
    Ok(BoundReport {
        bias_term: bias,
        variance_term: noise * d_eff / t_eff,
        d_eff,
        t_eff,
        gamma0,
        precondition_met,
        warnings,
    })
}

/// Exact average risk at inference length `M` of the attention model
/// pretrained to optimality at length `N`: `risk_M(Γ*_N)`.
pub fn avg_risk_attention_exact(
    n: usize,
    m: usize,
    dist: &TaskDistribution,
) -> Result<f64, TheoryError> {
    let ctx_n = PopulationContext::new(dist, n)?;
    let ctx_m = PopulationContext::new(dist, m)?;
    risk(&gamma_star(&ctx_n), &ctx_m)
}

/// Rate predictions for the average risk above `σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgRiskRates {
    pub ridge: f64,
    pub attention: f64,
    pub warnings: Vec<String>,
}

/// Ridge rate `ψ² Σ min{μ_M, λᵢ}` and attention rate, which adds
/// `ψ² (μ_M − μ_N)² Σ min{λᵢ/μ_N², 1/λᵢ} min{λᵢ/μ_M, 1}`, with
/// `μ_K = σ²/(ψ² K)`. Floored uniform directions are truncated.
pub fn avg_risk_rates(n: usize, m: usize, dist: &TaskDistribution) -> Result<AvgRiskRates, TheoryError> {
    if n == 0 || m == 0 {
        return Err(TheoryError::Invalid("context lengths must be at least 1".into()));
    }
    let dist = dist.truncated(UNIFORM_FLOOR);
    let (psi2, sigma2) = (dist.prior_var(), dist.noise_var());
    let mut warnings = Vec::new();
    if psi2 * dist.trace() > sigma2 {
        let msg = format!(
            "signal-to-noise condition ψ² tr H <= σ² fails ({} > {sigma2})",
            psi2 * dist.trace()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let mu_m = sigma2 / (psi2 * m as f64);
    let mu_n = sigma2 / (psi2 * n as f64);
    let lam = dist.spectrum();
    let ridge = psi2 * lam.iter().map(|&l| mu_m.min(l)).sum::<f64>();
    let gap = if mu_n > 0.0 {
        lam.iter()
            .map(|&l| (l / (mu_n * mu_n)).min(1.0 / l) * (l / mu_m).min(1.0))
            .sum::<f64>()
    } else {
        0.0
    };
    let attention = ridge + psi2 * (mu_m - mu_n).powi(2) * gap;
    Ok(AvgRiskRates {
        ridge,
        attention,
        warnings,
    })
}

/// Parameters selecting which rate statement to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateRegime {
    /// Pretraining excess risk after `t_total` tasks at context length `n`.
    Pretrain { n: usize, t_total: usize },
    /// Ridge average risk at inference length `m`.
    InferenceRidge { m: usize },
    /// Attention pretrained at `n`, evaluated at inference length `m`.
    InferenceAttention { n: usize, m: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateEstimate {
    pub value: f64,
    pub in_regime: bool,
    pub warnings: Vec<String>,
}

/// Rate expressions for the uniform, polynomial and exponential spectra with
/// constants set to 1 (natural logarithms). Out-of-regime arguments still
/// return a value but carry a warning.
pub fn rate_estimate(spec: &SpectrumSpec, regime: RateRegime) -> Result<RateEstimate, TheoryError> {
    let mut warnings = Vec::new();
    let mut check = |ok: bool, msg: String| {
        if !ok {
            warn!("{msg}");
            warnings.push(msg);
        }
    };
    let value = match regime {
        RateRegime::Pretrain { n, t_total } => {
            if t_total < 2 || n == 0 {
                return Err(TheoryError::Invalid("rate needs T >= 2 and N >= 1".into()));
            }
            let t_eff = effective_tasks(t_total);
            let nf = n as f64;
            match spec {
                SpectrumSpec::Uniform { s, .. } => {
                    let s = *s as f64;
                    check(nf <= s, format!("uniform rate assumes N <= s (N={n}, s={s})"));
                    if t_eff <= s * s {
                        nf / s + t_eff / (s * s)
                    } else {
                        s * s / t_eff
                    }
                }
                SpectrumSpec::Polynomial { a } => {
                    check(nf.powi(3) <= t_eff, format!("rate assumes N³ << T_eff (N={n}, T_eff={t_eff:.1})"));
                    t_eff.powf(1.0 / a - 1.0)
                        * (1.0
                            + nf.powf(-1.0 / a) * t_eff.ln()
                            + t_eff.powf(-1.0 / (2.0 * a)) * nf.powf(2.0 - 1.0 / (2.0 * a)))
                }
                SpectrumSpec::Exponential => {
                    check(nf.powi(3) <= t_eff, format!("rate assumes N³ << T_eff (N={n}, T_eff={t_eff:.1})"));
                    (nf * nf + t_eff.ln().powi(2)) / t_eff
                }
                SpectrumSpec::Explicit(_) => {
                    return Err(TheoryError::Invalid("no rate statement for explicit spectra".into()))
                }
            }
        }
        RateRegime::InferenceRidge { m } => {
            if m == 0 {
                return Err(TheoryError::Invalid("M must be at least 1".into()));
            }
            let mf = m as f64;
            match spec {
                SpectrumSpec::Uniform { s, .. } => (*s as f64 / mf).min(1.0),
                SpectrumSpec::Polynomial { a } => mf.powf(1.0 / a - 1.0),
                SpectrumSpec::Exponential => mf.ln().max(1.0) / mf,
                SpectrumSpec::Explicit(_) => {
                    return Err(TheoryError::Invalid("no rate statement for explicit spectra".into()))
                }
            }
        }
        RateRegime::InferenceAttention { n, m } => {
            if m == 0 || n == 0 {
                return Err(TheoryError::Invalid("N and M must be at least 1".into()));
            }
            let (nf, mf) = (n as f64, m as f64);
            check(m <= n, format!("attention rate assumes M < N (M={m}, N={n})"));
            match spec {
                SpectrumSpec::Uniform { s, .. } => {
                    let s = *s as f64;
                    check(
                        s < mf || s > nf * nf / mf,
                        format!("uniform attention rate assumes s < M or s > N²/M (s={s})"),
                    );
                    (s / mf).min(1.0)
                }
                SpectrumSpec::Polynomial { a } => nf.powf(1.0 / a) / mf,
                SpectrumSpec::Exponential => nf.ln().max(1.0) / mf,
                SpectrumSpec::Explicit(_) => {
                    return Err(TheoryError::Invalid("no rate statement for explicit spectra".into()))
                }
            }
        }
    };
    Ok(RateEstimate {
        value,
        in_regime: warnings.is_empty(),
        warnings,
    })
}
