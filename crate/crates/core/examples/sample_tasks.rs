//! Draws prompts from each spectrum family and label model and prints sample
//! moments next to their population values.
//!
//! ```text
//! cargo run --release --example sample_tasks
//! ```

use icl_lab::pretrain::mc_mean;
use icl_lab::rng::{domain, RandomStream};
use icl_lab::taskgen::{sample_episode, spectrum_eigenvalues};
use icl_lab::{LabelModel, SpectrumSpec, TaskDistribution};

fn main() {
    let d = 8;
    for spec in [SpectrumSpec::uniform(4), SpectrumSpec::polynomial(2.0), SpectrumSpec::Exponential] {
        let lam = spectrum_eigenvalues(&spec, d).unwrap();
        let shown: Vec<String> = lam.iter().map(|l| format!("{l:.3}")).collect();
        println!("{spec:?}: [{}]", shown.join(", "));
    }

    let dist = TaskDistribution::from_spec(&SpectrumSpec::polynomial(1.5), d, 1.0, 0.25).unwrap();
    let mut rng = RandomStream::derive(1, domain::EVAL, 0);
    let ep = sample_episode(&dist, 5, LabelModel::Gaussian, &mut rng);
    println!("\none episode: {} contexts of dimension {}", ep.len(), ep.dim());
    println!("query label {:.4}", ep.label());

    // E y² = ψ² tr H + σ² under the Gaussian model
    let target = dist.prior_var() * dist.trace() + dist.noise_var();
    println!("\nE[y^2], target {target:.4} for the Gaussian model");
    for model in [
        LabelModel::Gaussian,
        LabelModel::UniformNoise { c: 0.5 },
        LabelModel::SigmoidMean,
        LabelModel::SquareMean,
    ] {
        let est = mc_mean(&dist, 1, model, 200_000, 2, |ep| ep.label().powi(2));
        println!("{:>14}: {:.4} ± {:.4}", model.name(), est.mean, est.stderr);
    }
}
