//! Pretrains under each label model and compares the resulting ICL risk with
//! the Gaussian closed form.
//!
//! ```text
//! cargo run --release --example misspecification
//! ```

use icl_lab::harness::{self, ExperimentConfig, ExperimentKind, Preset};

fn main() {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::Misspec, Preset::Desk);
    cfg.dim = 8;
    cfg.context_len = 16;
    cfg.tasks = vec![10_000];
    cfg.seeds = vec![1, 2, 3];
    cfg.eval_episodes = 5_000;

    let report = harness::run_misspec(&cfg).unwrap();
    for r in report.series("attention") {
        let cf = r.closed_form.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into());
        println!("{:>14} {:.4} ± {:.4}   closed form {cf}", r.point, r.mean, r.stderr);
    }
}
