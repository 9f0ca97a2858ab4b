//! Runs the operator-calculus suites and tabulates pass/fail results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::opcalc::{self, CheckResult};
use crate::predictors::GammaMatrix;
use crate::pretrain::StepsizeSchedule;
use crate::theory::{self, PopulationContext, PreconditionMode};

use super::config::{ExperimentConfig, ExperimentKind};
use super::HarnessError;

pub const OPCHECK_HEADER: &str = "check,kind,statistic,threshold,passed";

/// Relative tolerance for exact identities.
pub const EXACT_TOL: f64 = 1e-10;
/// Width of the Monte Carlo acceptance band in standard errors.
pub const MC_BAND: f64 = 4.0;
/// Pretraining length used by the bias/variance check.
pub const BIAS_VARIANCE_STEPS: usize = 50;
/// Cap on trajectories for the bias/variance check.
pub const BIAS_VARIANCE_RUNS: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct OpcheckRow {
    pub check: String,
    /// `exact` or `monte_carlo`.
    pub kind: &'static str,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl OpcheckRow {
    fn from_check(c: CheckResult, kind: &'static str) -> Self {
        Self {
            check: c.name,
            kind,
            statistic: c.deviation,
            threshold: c.tolerance,
            passed: c.passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpcheckReport {
    pub config: ExperimentConfig,
    pub rows: Vec<OpcheckRow>,
    pub notes: Vec<String>,
}

impl OpcheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn row(&self, check: &str) -> Option<&OpcheckRow> {
        self.rows.iter().find(|r| r.check == check)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{OPCHECK_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.check, r.kind, r.statistic, r.threshold, r.passed).expect("writing to a String");
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
        let mut echo = self.config.emit();
        for n in &self.notes {
            writeln!(echo, "# note: {n}").expect("writing to a String");
        }
        let mut out = Vec::new();
        for (name, body) in [("opcheck.csv", self.to_csv()), ("opcheck.cfg", echo)] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
            out.push(path);
        }
        Ok(out)
    }
}

/// Largest `f(x)/min{8/K, 2Kx²}` over `xs` and the `(K, L)` pairs, or
/// infinity if some `f(x) ≤ 0`.
pub fn f_scalar_statistic(pairs: &[(usize, usize)], xs: &[f64]) -> Result<f64, HarnessError> {
    let mut worst = 0.0f64;
    for &(k, l) in pairs {
        for &x in xs {
            let f = opcalc::f_scalar(x, k, l)?;
            if f <= 0.0 {
                return Ok(f64::INFINITY);
            }
            let kf = k as f64;
            worst = worst.max(f / (8.0 / kf).min(2.0 * kf * x * x));
        }
    }
    Ok(worst)
}

/// `(K, L)` pairs produced by the stepsize schedule for `T` between 2 and
/// 10⁷.
pub fn schedule_pairs() -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (1..=7)
        .flat_map(|e| [1usize, 2, 3, 5].map(|m| m * 10usize.pow(e)))
        .chain([2, 3, 5, 7])
        .map(|t| {
            let s = StepsizeSchedule::new(1.0, t).expect("t >= 1");
            (s.epoch_len(), s.num_epochs())
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Log-spaced grid on `[1e-8, 0.999]`.
pub fn f_scalar_xs() -> Vec<f64> {
    (0..=120).map(|j| 10f64.powf(-8.0 + 8.0 * j as f64 / 120.0).min(0.999)).collect()
}

/// Exact identities, Monte Carlo dominations, the `H̃` moment identity, the
/// bias/variance decomposition (for `d ≤ 4`) and the scalar `f` bound at the
/// `(K, L)` pairs the schedule produces.
pub fn run_opcheck(cfg: &ExperimentConfig) -> Result<OpcheckReport, HarnessError> {
    if cfg.experiment != ExperimentKind::Opcheck {
        return Err(HarnessError::Config(format!("config is for '{}', expected 'opcheck'", cfg.experiment)));
    }
    cfg.validate()?;
    let dist = cfg.distribution(cfg.dim)?;
    let ctx = PopulationContext::new(&dist, cfg.context_len)?;
    let seed = cfg.seeds[0];
    let mut rows = Vec::new();
    let mut notes = Vec::new();

    for c in opcalc::exact_identity_suite(&ctx, seed, EXACT_TOL)? {
        rows.push(OpcheckRow::from_check(c, "exact"));
    }
    for c in opcalc::domination_suite(&ctx, cfg.opcheck_samples, seed, MC_BAND)? {
        rows.push(OpcheckRow::from_check(c, "monte_carlo"));
    }

    let (mean, se) = opcalc::estimate_tilde_h(&ctx, cfg.opcheck_samples, seed);
    let target = theory::tilde_h(&ctx);
    let d = dist.dim();
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let t = if i == j { target[i] } else { 0.0 };
            worst = worst.max((mean[(i, j)] - t).abs() / se[(i, j)].max(f64::MIN_POSITIVE));
        }
    }
    rows.push(OpcheckRow {
        check: "tilde_h_moment_se".into(),
        kind: "monte_carlo",
        statistic: worst,
        threshold: 3.0,
        passed: worst <= 3.0,
    });

    if d <= 4 {
        let gamma0 = cfg
            .gamma0
            .unwrap_or_else(|| theory::max_stepsize(&ctx, PreconditionMode::Practical));
        let runs = cfg.opcheck_samples.min(BIAS_VARIANCE_RUNS);
        let rep = opcalc::bias_variance_recursion(&ctx, gamma0, BIAS_VARIANCE_STEPS, &GammaMatrix::zeros(d), runs, seed)?;
        let slack = rep.a_est.mean - 2.0 * rep.b_bound - 2.0 * rep.c_bound;
        let stat = slack / rep.a_est.stderr.max(f64::MIN_POSITIVE);
        rows.push(OpcheckRow {
            check: "bias_variance_decomposition_se".into(),
            kind: "monte_carlo",
            statistic: stat,
            threshold: MC_BAND,
            passed: rep.decomposition_holds(MC_BAND),
        });
    } else {
        notes.push(format!("bias/variance decomposition skipped: d = {d} > 4"));
    }

    let f_stat = f_scalar_statistic(&schedule_pairs(), &f_scalar_xs())?;
    rows.push(OpcheckRow {
        check: "f_scalar_bound".into(),
        kind: "exact",
        statistic: f_stat,
        threshold: 1.0,
        passed: f_stat <= 1.0,
    });
    Ok(OpcheckReport {
        config: cfg.clone(),
        rows,
        notes,
    })
}
