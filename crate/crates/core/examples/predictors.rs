//! Compares the attention model at Γ* against Bayes ridge and OLS on shared
//! prompts, and checks that the explicit attention block computes the same
//! prediction as the Γ form.
//!
//! ```text
//! cargo run --release --example predictors
//! ```

use icl_lab::predictors::{forward_blocks, predict_attention, predict_bayes_ridge, predict_ols};
use icl_lab::pretrain::mc_mean;
use icl_lab::rng::{domain, RandomStream};
use icl_lab::taskgen::sample_episode;
use icl_lab::theory;
use icl_lab::{AttentionBlocks, LabelModel, PopulationContext, SpectrumSpec, TaskDistribution};

fn main() {
    let dist = TaskDistribution::from_spec(&SpectrumSpec::polynomial(1.5), 10, 1.0, 1.0).unwrap();
    let n = 20;
    let ctx = PopulationContext::new(&dist, n).unwrap();
    let gs = theory::gamma_star(&ctx);

    println!("d=10 N={n}, 100k prompts");
    let episodes = 100_000;
    let att = mc_mean(&dist, n, LabelModel::Gaussian, episodes, 5, |ep| {
        (predict_attention(&gs, ep).unwrap() - ep.label()).powi(2)
    });
    let ridge = mc_mean(&dist, n, LabelModel::Gaussian, episodes, 5, |ep| {
        (predict_bayes_ridge(ep, &dist).unwrap() - ep.label()).powi(2)
    });
    let ols = mc_mean(&dist, n, LabelModel::Gaussian, episodes, 5, |ep| {
        (predict_ols(ep).unwrap() - ep.label()).powi(2)
    });
    println!("attention(Γ*) {:.4} ± {:.4}  closed form {:.4}", att.mean, att.stderr, theory::min_risk(&ctx));
    println!("bayes ridge   {:.4} ± {:.4}", ridge.mean, ridge.stderr);
    println!("ols           {:.4} ± {:.4}", ols.mean, ols.stderr);

    let blocks = AttentionBlocks::new(1.0, gs.matrix().clone()).unwrap();
    let mut rng = RandomStream::derive(6, domain::EVAL, 0);
    let ep = sample_episode(&dist, n, LabelModel::Gaussian, &mut rng);
    let a = predict_attention(&gs, &ep).unwrap();
    let b = forward_blocks(&blocks, &ep).unwrap();
    println!("\nΓ form {a:.12}\nblocks {b:.12}");
}
