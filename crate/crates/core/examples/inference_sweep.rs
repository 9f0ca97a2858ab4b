//! Attention pretrained at context length N and evaluated at shorter lengths
//! M, against ridge tuned at each M.
//!
//! ```text
//! cargo run --release --example inference_sweep
//! ```

use icl_lab::harness::{self, ExperimentConfig, ExperimentKind, Preset};

fn main() {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::InferenceSweep, Preset::Desk);
    cfg.dim = 10;
    cfg.context_len = 20;
    cfg.inference_lens = vec![2, 5, 10, 20];
    cfg.tasks = vec![20_000];
    cfg.seeds = vec![1, 2];
    cfg.eval_episodes = 5_000;

    let report = harness::run_inference_sweep(&cfg).unwrap();
    println!("{:>4} {:>10} {:>10} {:>10}", "M", "attention", "optimal", "ridge");
    for m in &cfg.inference_lens {
        let p = m.to_string();
        let att = report.row(&p, "attention").unwrap();
        let opt = report.row(&p, "attention_opt").unwrap();
        let ridge = report.row(&p, "ridge").unwrap();
        println!("{m:>4} {:>10.4} {:>10.4} {:>10.4}", att.mean, opt.closed_form.unwrap_or(f64::NAN), ridge.mean);
    }
}
