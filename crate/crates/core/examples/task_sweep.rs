//! Small task-count sweep through the harness; writes CSV, SVG and the config
//! echo into a temporary directory.
//!
//! ```text
//! cargo run --release --example task_sweep
//! ```

use icl_lab::harness::{self, ExperimentConfig, ExperimentKind, Preset};

fn main() {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::TaskSweep, Preset::Desk);
    cfg.dim = 10;
    cfg.context_len = 20;
    cfg.tasks = vec![100, 1_000, 10_000];
    cfg.seeds = vec![1, 2, 3];
    cfg.eval_episodes = 5_000;
    cfg.output_dir = std::env::temp_dir().join("icl-lab-task-sweep");

    let report = harness::run_task_sweep(&cfg).unwrap();
    print!("{}", report.to_csv());
    for n in &report.notes {
        println!("note: {n}");
    }
    for p in report.write(&cfg.output_dir).unwrap() {
        println!("wrote {}", p.display());
    }
}
