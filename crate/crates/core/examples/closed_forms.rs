//! Closed-form quantities for one population: H̃, Γ*, minimum risk, the
//! pretraining bound at a few task counts, and the rate predictions.
//!
//! ```text
//! cargo run --release --example closed_forms
//! ```

use icl_lab::theory::{self, PreconditionMode, RateRegime};
use icl_lab::{GammaMatrix, PopulationContext, SpectrumSpec, TaskDistribution};

fn main() {
    let spec = SpectrumSpec::polynomial(2.0);
    let (d, n) = (20, 40);
    let dist = TaskDistribution::from_spec(&spec, d, 1.0, 1.0).unwrap();
    let ctx = PopulationContext::new(&dist, n).unwrap();

    let lt = theory::tilde_h(&ctx);
    let gs = theory::gamma_star_diag(&ctx);
    println!("{:>3} {:>10} {:>10} {:>10}", "i", "lambda", "tilde_h", "gamma*");
    for i in 0..5 {
        println!("{i:>3} {:>10.4e} {:>10.4e} {:>10.4e}", dist.spectrum()[i], lt[i], gs[i]);
    }
    println!("min risk {:.6}", theory::min_risk(&ctx));
    println!("risk at Γ=0 {:.6}", theory::risk(&GammaMatrix::zeros(d), &ctx).unwrap());

    let gamma0 = theory::max_stepsize(&ctx, PreconditionMode::Practical);
    println!("\nγ₀ = {gamma0:.4e} (practical)");
    println!("{:>8} {:>8} {:>8} {:>12} {:>12} {:>12}", "T", "T_eff", "D_eff", "bias", "variance", "rate");
    for t in [100, 1_000, 10_000, 100_000] {
        let b = theory::pretrain_bound(&ctx, t, gamma0, &GammaMatrix::zeros(d), PreconditionMode::Practical).unwrap();
        let r = theory::rate_estimate(&spec, RateRegime::Pretrain { n, t_total: t }).unwrap();
        println!(
            "{t:>8} {:>8.1} {:>8.2} {:>12.4e} {:>12.4e} {:>12.4e}",
            b.t_eff, b.d_eff, b.bias_term, b.variance_term, r.value
        );
    }

    println!("\ninference length M with N = {n}");
    for m in [5, 10, 20, 40] {
        let exact = theory::avg_risk_attention_exact(n, m, &dist).unwrap();
        let rates = theory::avg_risk_rates(n, m, &dist).unwrap();
        println!("M={m:>3} attention {exact:.4}  rate(ridge) {:.4}  rate(attention) {:.4}", rates.ridge, rates.attention);
    }
}
