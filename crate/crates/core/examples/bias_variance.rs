//! Bias/variance operator recursions against Monte Carlo SGD excess risk.
//!
//! ```text
//! cargo run --release --example bias_variance
//! ```

use icl_lab::opcalc::bias_variance_recursion;
use icl_lab::theory::{self, PreconditionMode};
use icl_lab::{GammaMatrix, PopulationContext, TaskDistribution};

fn main() {
    let dist = TaskDistribution::new(1.0, 1.0, vec![1.0, 0.5]).unwrap();
    let ctx = PopulationContext::new(&dist, 4).unwrap();
    let strict = theory::max_stepsize(&ctx, PreconditionMode::Strict);
    let practical = theory::max_stepsize(&ctx, PreconditionMode::Practical);
    println!("d=2 N=4 T=50, Γ₀ = 0");
    println!("{:>12} {:>12} {:>10} {:>12} {:>12}", "gamma0", "A (MC)", "SE", "B", "C");
    for gamma0 in [strict, practical / 100.0, practical / 10.0, practical] {
        let rep = bias_variance_recursion(&ctx, gamma0, 50, &GammaMatrix::zeros(2), 20_000, 7).unwrap();
        println!(
            "{gamma0:>12.4e} {:>12.4e} {:>10.2e} {:>12.4e} {:>12.4e}",
            rep.a_est.mean, rep.a_est.stderr, rep.b_bound, rep.c_bound
        );
    }
}
