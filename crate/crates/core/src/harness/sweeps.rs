//! Experiment protocols. Each seed gets its own evaluation set, shared by
//! every estimator and every sweep point evaluated at the same inference
//! length, so attention/ridge comparisons are paired.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::predictors::{predict_bayes_ridge, predict_ols, GammaMatrix};
use crate::pretrain::{pretrain, PretrainConfig, PretrainError};
use crate::rng::{domain, RandomStream};
use crate::stats::{par_estimate, Accumulator, Estimate};
use crate::taskgen::{sample_episode, LabelModel, SpectrumSpec, TaskDistribution};
use crate::theory::{self, PopulationContext, PreconditionMode, RateRegime};

use super::config::{ExperimentConfig, ExperimentKind};
use super::report::{ReportRow, RiskReport};
use super::HarnessError;

/// Per-episode quantities needed to score any `Γ` and the baselines.
pub struct EvalSet {
    u: Vec<DVector<f64>>,
    x: Vec<DVector<f64>>,
    y: Vec<f64>,
    ridge: Vec<f64>,
    ols: Vec<f64>,
    pub build_ms: u64,
}

impl EvalSet {
    /// `episodes` prompts of length `m`; episode `i` comes from a stream keyed
    /// by `(seed, m)` and `i`.
    pub fn build(
        dist: &TaskDistribution,
        m: usize,
        model: LabelModel,
        episodes: usize,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        let start = Instant::now();
        let key = RandomStream::derive(seed, domain::EVAL, m as u64).next_u64();
        let rows: Vec<_> = (0..episodes)
            .into_par_iter()
            .map(|i| {
                let mut rng = RandomStream::derive(key, domain::EVAL, i as u64);
                let ep = sample_episode(dist, m, model, &mut rng);
                let ridge = predict_bayes_ridge(&ep, dist)?;
                let ols = predict_ols(&ep)?;
                Ok((ep.moment_vector(), ep.query_x().clone(), ep.label(), ridge, ols))
            })
            .collect::<Result<_, crate::predictors::PredictError>>()?;
        let mut set = Self {
            u: Vec::with_capacity(episodes),
            x: Vec::with_capacity(episodes),
            y: Vec::with_capacity(episodes),
            ridge: Vec::with_capacity(episodes),
            ols: Vec::with_capacity(episodes),
            build_ms: 0,
        };
        for (u, x, y, r, o) in rows {
            set.u.push(u);
            set.x.push(x);
            set.y.push(y);
            set.ridge.push(r);
            set.ols.push(o);
        }
        set.build_ms = start.elapsed().as_millis() as u64;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn attention_pred(&self, g: &GammaMatrix, i: usize) -> f64 {
        self.x[i].dot(&(g.matrix() * &self.u[i]))
    }

    pub fn attention(&self, g: &GammaMatrix) -> Estimate {
        par_estimate(self.len(), |i| (self.attention_pred(g, i) - self.y[i]).powi(2))
    }

    /// Paired per-episode difference of attention and ridge squared errors.
    pub fn gap_to_ridge(&self, g: &GammaMatrix) -> Estimate {
        par_estimate(self.len(), |i| {
            (self.attention_pred(g, i) - self.y[i]).powi(2) - (self.ridge[i] - self.y[i]).powi(2)
        })
    }

    pub fn ridge(&self) -> Estimate {
        par_estimate(self.len(), |i| (self.ridge[i] - self.y[i]).powi(2))
    }

    pub fn ols(&self) -> Estimate {
        par_estimate(self.len(), |i| (self.ols[i] - self.y[i]).powi(2))
    }
}

/// Combines per-seed estimates: a single seed keeps its Monte Carlo error,
/// several seeds use the spread of the per-seed means.
pub fn aggregate(per_seed: &[Estimate]) -> Estimate {
    match per_seed {
        [] => Estimate {
            mean: f64::NAN,
            stderr: 0.0,
        },
        [one] => *one,
        many => many.iter().map(|e| e.mean).collect::<Accumulator>().estimate(),
    }
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn push_note(notes: &mut Vec<String>, msg: String) {
    if !notes.contains(&msg) {
        notes.push(msg);
    }
}

/// Distribution under which the closed-form risk is exact for `model`:
/// Gaussian labels, or uniform noise with matching variance.
fn closed_form_dist(dist: &TaskDistribution, model: LabelModel) -> Option<TaskDistribution> {
    match model {
        LabelModel::Gaussian => Some(dist.clone()),
        LabelModel::UniformNoise { c } => dist.with_noise_var(c * c / 3.0).ok(),
        _ => None,
    }
}

fn build_evals(
    cfg: &ExperimentConfig,
    dist: &TaskDistribution,
    m: usize,
    model: LabelModel,
) -> Result<Vec<EvalSet>, HarnessError> {
    cfg.seeds
        .par_iter()
        .map(|&s| EvalSet::build(dist, m, model, cfg.eval_episodes, s))
        .collect()
}

struct SeedRun {
    seed: u64,
    gamma: Result<GammaMatrix, usize>,
    runtime_ms: u64,
}

fn pretrain_seeds(
    cfg: &ExperimentConfig,
    dist: &TaskDistribution,
    t_total: usize,
    model: LabelModel,
) -> Result<Vec<SeedRun>, HarnessError> {
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let start = Instant::now();
            let mut pc = PretrainConfig::new(dist.clone(), cfg.context_len, t_total, seed).with_label_model(model);
            pc.gamma0 = cfg.gamma0;
            let gamma = match pretrain(&pc) {
                Ok(run) => Ok(run.final_gamma),
                Err(PretrainError::Diverged { step, .. }) => Err(step),
                Err(e) => return Err(HarnessError::from(e)),
            };
            Ok(SeedRun {
                seed,
                gamma,
                runtime_ms: start.elapsed().as_millis() as u64,
            })
        })
        .collect()
}

fn note_divergence(runs: &[SeedRun], point: &str, notes: &mut Vec<String>) {
    let diverged: Vec<usize> = runs.iter().filter_map(|r| r.gamma.as_ref().err().copied()).collect();
    if let Some(first) = diverged.iter().min() {
        push_note(
            notes,
            format!(
                "{point}: {} of {} seeds diverged (earliest at step {first})",
                diverged.len(),
                runs.len()
            ),
        );
    }
}

fn baseline_rows(cfg: &ExperimentConfig, point: &str, m: usize, d: usize, evals: &[EvalSet], notes: &mut Vec<String>) -> Vec<ReportRow> {
    let runtime = cfg.record_runtime.then(|| evals.iter().map(|e| e.build_ms).sum());
    let ridge: Vec<Estimate> = evals.iter().map(EvalSet::ridge).collect();
    let ols: Vec<Estimate> = evals.iter().map(EvalSet::ols).collect();
    let mut r = ReportRow::new(point, "ridge", cfg.seeds.clone(), aggregate(&ridge).mean, aggregate(&ridge).stderr);
    r.runtime_ms = runtime;
    let mut o = ReportRow::new(point, "ols", cfg.seeds.clone(), aggregate(&ols).mean, aggregate(&ols).stderr);
    o.runtime_ms = runtime;
    if m <= d {
        push_note(notes, format!("{point}: OLS is degenerate (M = {m} <= d = {d})"));
    }
    vec![r, o]
}

/// Rows for one pretraining configuration evaluated at `M = N`: attention,
/// ridge, OLS, the paired attention−ridge gap, and the bound and rate
/// companions where theory defines them.
fn pretrained_point(
    cfg: &ExperimentConfig,
    dist: &TaskDistribution,
    t_total: usize,
    model: LabelModel,
    evals: &[EvalSet],
    point: &str,
    notes: &mut Vec<String>,
) -> Result<Vec<ReportRow>, HarnessError> {
    let n = cfg.context_len;
    let runs = pretrain_seeds(cfg, dist, t_total, model)?;
    note_divergence(&runs, point, notes);
    let exact_dist = closed_form_dist(dist, model);
    let mut ok_seeds = Vec::new();
    let (mut mse, mut gap, mut exact) = (Vec::new(), Vec::new(), Vec::new());
    let mut runtime = 0;
    for (run, ev) in runs.iter().zip(evals) {
        runtime += run.runtime_ms;
        if let Ok(g) = &run.gamma {
            ok_seeds.push(run.seed);
            mse.push(ev.attention(g));
            gap.push(ev.gap_to_ridge(g));
            if let Some(ed) = &exact_dist {
                exact.push(theory::risk(g, &PopulationContext::new(ed, n)?)?);
            }
        }
    }

    let ctx = PopulationContext::new(dist, n)?;
    let min_risk = theory::min_risk(&ctx);
    let well_specified = model == LabelModel::Gaussian;
    let gamma0 = match cfg.gamma0 {
        Some(g) => g,
        None => theory::max_stepsize(&ctx, PreconditionMode::Practical),
    };
    let bound = if well_specified && t_total >= 2 {
        let rep = theory::pretrain_bound(&ctx, t_total, gamma0, &GammaMatrix::zeros(dist.dim()), PreconditionMode::Practical)?;
        for w in rep.warnings.iter() {
            push_note(notes, format!("{point}: {w}"));
        }
        Some(min_risk + rep.total())
    } else {
        None
    };
    let rate = match (&cfg.spectrum, well_specified && t_total >= 2) {
        (SpectrumSpec::Explicit(_), _) | (_, false) => None,
        (spec, true) => {
            let r = theory::rate_estimate(spec, RateRegime::Pretrain { n, t_total })?;
            for w in r.warnings.iter() {
                push_note(notes, format!("{point}: {w}"));
            }
            Some(min_risk + r.value)
        }
    };

    let att = aggregate(&mse);
    let mut a = ReportRow::new(point, "attention", ok_seeds.clone(), att.mean, att.stderr);
    a.closed_form = (!exact.is_empty()).then(|| mean_of(&exact));
    a.bound = bound;
    a.rate = rate;
    a.runtime_ms = cfg.record_runtime.then_some(runtime);
    let mut rows = vec![a];
    rows.extend(baseline_rows(cfg, point, n, dist.dim(), evals, notes));
    let g = aggregate(&gap);
    rows.push(ReportRow::new(point, "paired_gap", ok_seeds, g.mean, g.stderr));
    if let Some(b) = bound {
        rows.push(ReportRow::theory(point, "bound", b));
    }
    if let Some(r) = rate {
        rows.push(ReportRow::theory(point, "rate", r));
    }
    Ok(rows)
}

fn expect_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<(), HarnessError> {
    if cfg.experiment != kind {
        return Err(HarnessError::Config(format!(
            "config is for '{}', expected '{kind}'",
            cfg.experiment
        )));
    }
    cfg.validate()
}

/// Pretrains for every `T` in `tasks` and evaluates at `M = N`.
pub fn run_task_sweep(cfg: &ExperimentConfig) -> Result<RiskReport, HarnessError> {
    expect_kind(cfg, ExperimentKind::TaskSweep)?;
    let dist = cfg.distribution(cfg.dim)?;
    let model = cfg.label_models[0];
    let evals = build_evals(cfg, &dist, cfg.context_len, model)?;
    let mut report = RiskReport::new(cfg.clone());
    for &t in &cfg.tasks {
        let rows = pretrained_point(cfg, &dist, t, model, &evals, &t.to_string(), &mut report.notes)?;
        report.rows.extend(rows);
    }
    Ok(report)
}

/// Pretrains at the largest `T` for every `d` in `dims`, holding `N` fixed.
pub fn run_dim_sweep(cfg: &ExperimentConfig) -> Result<RiskReport, HarnessError> {
    expect_kind(cfg, ExperimentKind::DimSweep)?;
    let model = cfg.label_models[0];
    let mut report = RiskReport::new(cfg.clone());
    for &d in &cfg.dims {
        let dist = cfg.distribution(d)?;
        let evals = build_evals(cfg, &dist, cfg.context_len, model)?;
        let rows = pretrained_point(cfg, &dist, cfg.final_tasks(), model, &evals, &d.to_string(), &mut report.notes)?;
        report.rows.extend(rows);
    }
    Ok(report)
}

/// Pretrains once per seed at `N` and the largest `T`, then evaluates the
/// pretrained `Γ`, the exact `Γ*_N`, ridge and OLS at every `M`.
pub fn run_inference_sweep(cfg: &ExperimentConfig) -> Result<RiskReport, HarnessError> {
    expect_kind(cfg, ExperimentKind::InferenceSweep)?;
    let dist = cfg.distribution(cfg.dim)?;
    let model = cfg.label_models[0];
    let n = cfg.context_len;
    let mut report = RiskReport::new(cfg.clone());
    let runs = pretrain_seeds(cfg, &dist, cfg.final_tasks(), model)?;
    note_divergence(&runs, "pretraining", &mut report.notes);
    let gamma_opt = theory::gamma_star(&PopulationContext::new(&dist, n)?);
    let exact_dist = closed_form_dist(&dist, model);
    let sigma2 = dist.noise_var();
    for &m in &cfg.inference_lens {
        let point = m.to_string();
        let evals = build_evals(cfg, &dist, m, model)?;
        let rates = if model == LabelModel::Gaussian {
            let r = theory::avg_risk_rates(n, m, &dist)?;
            for w in r.warnings.iter() {
                push_note(&mut report.notes, w.clone());
            }
            Some(r)
        } else {
            None
        };
        let (mut ok_seeds, mut mse, mut gap, mut exact) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (run, ev) in runs.iter().zip(&evals) {
            if let Ok(g) = &run.gamma {
                ok_seeds.push(run.seed);
                mse.push(ev.attention(g));
                gap.push(ev.gap_to_ridge(g));
                if let Some(ed) = &exact_dist {
                    exact.push(theory::risk(g, &PopulationContext::new(ed, m)?)?);
                }
            }
        }
        let att = aggregate(&mse);
        let mut a = ReportRow::new(point.clone(), "attention", ok_seeds.clone(), att.mean, att.stderr);
        a.closed_form = (!exact.is_empty()).then(|| mean_of(&exact));
        a.rate = rates.as_ref().map(|r| sigma2 + r.attention);
        if cfg.record_runtime {
            a.runtime_ms = Some(runs.iter().map(|r| r.runtime_ms).sum());
        }
        report.rows.push(a);

        let opt: Vec<Estimate> = evals.iter().map(|e| e.attention(&gamma_opt)).collect();
        let opt = aggregate(&opt);
        let mut o = ReportRow::new(point.clone(), "attention_opt", cfg.seeds.clone(), opt.mean, opt.stderr);
        if let Some(ed) = &exact_dist {
            o.closed_form = Some(theory::avg_risk_attention_exact(n, m, ed)?);
        }
        o.rate = a_rate(&rates, sigma2);
        report.rows.push(o);

        let mut base = baseline_rows(cfg, &point, m, dist.dim(), &evals, &mut report.notes);
        base[0].rate = rates.as_ref().map(|r| sigma2 + r.ridge);
        report.rows.extend(base);
        let g = aggregate(&gap);
        report.rows.push(ReportRow::new(point.clone(), "paired_gap", ok_seeds, g.mean, g.stderr));
        if let Some(r) = a_rate(&rates, sigma2) {
            report.rows.push(ReportRow::theory(point, "rate", r));
        }
    }
    Ok(report)
}

fn a_rate(rates: &Option<theory::AvgRiskRates>, sigma2: f64) -> Option<f64> {
    rates.as_ref().map(|r| sigma2 + r.attention)
}

/// Pretrains and evaluates under each label model at the largest `T`.
pub fn run_misspec(cfg: &ExperimentConfig) -> Result<RiskReport, HarnessError> {
    expect_kind(cfg, ExperimentKind::Misspec)?;
    let dist = cfg.distribution(cfg.dim)?;
    let mut report = RiskReport::new(cfg.clone());
    for &model in &cfg.label_models {
        let evals = build_evals(cfg, &dist, cfg.context_len, model)?;
        let rows = pretrained_point(cfg, &dist, cfg.final_tasks(), model, &evals, model.name(), &mut report.notes)?;
        report.rows.extend(rows);
    }
    Ok(report)
}

/// Monte Carlo risk of fixed parameters against the closed form: `0`,
/// `Γ*/2`, `Γ*`, `2Γ*` and the pretrained iterate at the largest `T`, with
/// ridge and OLS under the point `baseline`.
pub fn run_risk_compare(cfg: &ExperimentConfig) -> Result<RiskReport, HarnessError> {
    expect_kind(cfg, ExperimentKind::RiskCompare)?;
    let dist = cfg.distribution(cfg.dim)?;
    let model = cfg.label_models[0];
    let n = cfg.context_len;
    let ctx = PopulationContext::new(&dist, n)?;
    let exact_dist = closed_form_dist(&dist, model);
    let exact_risk = |g: &GammaMatrix| -> Result<Option<f64>, HarnessError> {
        match &exact_dist {
            Some(ed) => Ok(Some(theory::risk(g, &PopulationContext::new(ed, n)?)?)),
            None => Ok(None),
        }
    };
    let evals = build_evals(cfg, &dist, n, model)?;
    let mut report = RiskReport::new(cfg.clone());
    let star = theory::gamma_star(&ctx);
    let fixed = [
        ("zero", 0.0),
        ("half_gamma_star", 0.5),
        ("gamma_star", 1.0),
        ("double_gamma_star", 2.0),
    ];
    for (name, scale) in fixed {
        let g = GammaMatrix::new(star.matrix() * scale)?;
        let est = aggregate(&evals.iter().map(|e| e.attention(&g)).collect::<Vec<_>>());
        let mut row = ReportRow::new(name, "attention", cfg.seeds.clone(), est.mean, est.stderr);
        row.closed_form = exact_risk(&g)?;
        report.rows.push(row);
    }
    let runs = pretrain_seeds(cfg, &dist, cfg.final_tasks(), model)?;
    note_divergence(&runs, "pretrained", &mut report.notes);
    let (mut ok_seeds, mut mse, mut exact) = (Vec::new(), Vec::new(), Vec::new());
    for (run, ev) in runs.iter().zip(&evals) {
        if let Ok(g) = &run.gamma {
            ok_seeds.push(run.seed);
            mse.push(ev.attention(g));
            if let Some(v) = exact_risk(g)? {
                exact.push(v);
            }
        }
    }
    let est = aggregate(&mse);
    let mut row = ReportRow::new("pretrained", "attention", ok_seeds, est.mean, est.stderr);
    row.closed_form = (!exact.is_empty()).then(|| mean_of(&exact));
    row.runtime_ms = cfg.record_runtime.then(|| runs.iter().map(|r| r.runtime_ms).sum());
    report.rows.push(row);
    let rows = baseline_rows(cfg, "baseline", n, dist.dim(), &evals, &mut report.notes);
    report.rows.extend(rows);
    report.rows.push(ReportRow::theory("baseline", "min_risk", theory::min_risk(&ctx)));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Preset;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(kind, Preset::Desk);
        cfg.dim = 3;
        cfg.dims = vec![2, 3];
        cfg.context_len = 6;
        cfg.inference_lens = vec![2, 6];
        cfg.tasks = vec![10, 200];
        cfg.seeds = vec![1, 2];
        cfg.eval_episodes = 500;
        cfg
    }

    #[test]
    fn aggregate_cases() {
        let e = Estimate { mean: 2.0, stderr: 0.1 };
        assert_eq!(aggregate(&[e]), e);
        assert!(aggregate(&[]).mean.is_nan());
        let two = aggregate(&[Estimate { mean: 1.0, stderr: 0.0 }, Estimate { mean: 3.0, stderr: 0.0 }]);
        assert_eq!(two.mean, 2.0);
        assert!((two.stderr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn task_sweep_schema() {
        let rep = run_task_sweep(&small(ExperimentKind::TaskSweep)).unwrap();
        for t in ["10", "200"] {
            for est in ["attention", "ridge", "ols", "paired_gap", "bound", "rate"] {
                assert!(rep.row(t, est).is_some(), "{t} {est}");
            }
            let a = rep.row(t, "attention").unwrap();
            assert!(a.closed_form.is_some() && a.bound.is_some() && a.rate.is_some());
            assert_eq!(a.seeds, vec![1, 2]);
        }
    }

    #[test]
    fn wrong_kind_rejected() {
        let cfg = small(ExperimentKind::Misspec);
        assert!(matches!(run_task_sweep(&cfg), Err(HarnessError::Config(_))));
    }

    #[test]
    fn divergence_recorded_and_sweep_continues() {
        let mut cfg = small(ExperimentKind::TaskSweep);
        cfg.gamma0 = Some(50.0);
        cfg.tasks = vec![2, 2000];
        let rep = run_task_sweep(&cfg).unwrap();
        assert!(rep.notes.iter().any(|n| n.contains("diverged")), "{:?}", rep.notes);
        let a = rep.row("2000", "attention").unwrap();
        assert!(a.seeds.len() < 2);
        assert!(rep.row("2000", "ridge").is_some());
    }

    #[test]
    fn inference_sweep_flags_degenerate_ols() {
        let rep = run_inference_sweep(&small(ExperimentKind::InferenceSweep)).unwrap();
        assert!(rep.notes.iter().any(|n| n.contains("OLS is degenerate (M = 2")));
        let o = rep.row("6", "attention_opt").unwrap();
        assert!(o.closed_form.is_some());
    }

    #[test]
    fn risk_compare_zero_point() {
        let rep = run_risk_compare(&small(ExperimentKind::RiskCompare)).unwrap();
        let z = rep.row("zero", "attention").unwrap();
        assert!((z.closed_form.unwrap() - (1.0 + rep.config.distribution(3).unwrap().trace())).abs() < 1e-12);
        assert!(rep.row("baseline", "ridge").is_some());
    }
}
