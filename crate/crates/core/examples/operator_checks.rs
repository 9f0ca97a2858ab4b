//! Builds a few operators on 3×3 matrices and runs the exact and Monte Carlo
//! operator suites.
//!
//! ```text
//! cargo run --release --example operator_checks
//! ```

use icl_lab::opcalc::{self, MatrixOperator};
use icl_lab::{PopulationContext, TaskDistribution};
use nalgebra::DMatrix;

fn main() {
    let dist = TaskDistribution::new(1.0, 0.5, vec![1.0, 0.5, 0.25]).unwrap();
    let ctx = PopulationContext::new(&dist, 4).unwrap();
    let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(dist.spectrum().to_vec()));

    let op = MatrixOperator::sandwich(&h, &h);
    let a = DMatrix::from_fn(3, 3, |i, j| (i + 2 * j) as f64);
    println!("H∘A∘H applied to A:\n{}", op.apply(&a).unwrap());
    let mcal = opcalc::mcal_exact(&dist).unwrap();
    println!("M applied to I has trace {:.4}", mcal.apply(&DMatrix::identity(3, 3)).unwrap().trace());

    println!("\nexact identities");
    for c in opcalc::exact_identity_suite(&ctx, 1, 1e-10).unwrap() {
        println!("  {:<34} {:.2e} {}", c.name, c.deviation, if c.passed { "ok" } else { "FAILED" });
    }
    println!("dominations, 200k samples");
    for c in opcalc::domination_suite(&ctx, 200_000, 1, 4.0).unwrap() {
        println!("  {:<34} {:>8.3} {}", c.name, c.deviation, if c.passed { "ok" } else { "FAILED" });
    }
}
