//! Pretrains Γ with online SGD on the geometric schedule and tracks the excess
//! risk along a log grid of checkpoints.
//!
//! ```text
//! cargo run --release --example pretrain_sgd
//! ```

use icl_lab::pretrain::{pretrain, CheckpointPolicy, PretrainConfig, StepsizeSchedule};
use icl_lab::theory::{self, PreconditionMode};
use icl_lab::{GammaMatrix, PopulationContext, SpectrumSpec, TaskDistribution};

fn main() {
    let (d, n, t) = (10, 20, 20_000);
    let dist = TaskDistribution::from_spec(&SpectrumSpec::Exponential, d, 1.0, 1.0).unwrap();
    let ctx = PopulationContext::new(&dist, n).unwrap();
    let cfg = PretrainConfig::new(dist.clone(), n, t, 11).with_checkpoints(CheckpointPolicy::LogGrid);
    let gamma0 = cfg.resolved_gamma0().unwrap();
    let schedule = StepsizeSchedule::new(gamma0, t).unwrap();
    println!(
        "γ₀ = {gamma0:.4e}, {} epochs of {} steps",
        schedule.num_epochs(),
        schedule.epoch_len()
    );

    let run = pretrain(&cfg).unwrap();
    let bound = |step: usize| {
        theory::pretrain_bound(&ctx, step, gamma0, &GammaMatrix::zeros(d), PreconditionMode::Practical)
            .map(|b| b.total())
            .unwrap_or(f64::NAN)
    };
    println!("{:>8} {:>12} {:>12}", "step", "excess", "bound");
    for ck in &run.trajectory {
        let excess = theory::excess_risk(&ck.gamma, &ctx).unwrap();
        println!("{:>8} {excess:>12.4e} {:>12.4e}", ck.step, bound(ck.step));
    }
}
