//! Command-line front end for the experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icl_lab::harness::{self, ExperimentConfig, ExperimentKind, HarnessError, Outcome, Preset};

#[derive(Parser)]
#[command(name = "icl-lab", version, about = "In-context linear regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Vary the number of pretraining tasks.
    TaskSweep(RunArgs),
    /// Vary the ambient dimension at fixed N and T.
    DimSweep(RunArgs),
    /// Vary the inference context length M.
    InferenceSweep(RunArgs),
    /// Compare label models.
    Misspec(RunArgs),
    /// Monte Carlo risk against the closed form for fixed parameters.
    RiskCompare(RunArgs),
    /// Operator identities and dominations; exits with 2 if any check fails.
    Opcheck(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// key = value config file, parsed on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-base the seed list to S, S+1, ...
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Output directory (overrides output_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, default_value = "desk", value_parser = ["desk", "base"])]
    preset: String,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

fn resolve(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig, HarnessError> {
    let preset: Preset = args.preset.parse()?;
    let mut cfg = ExperimentConfig::preset(kind, preset);
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg = ExperimentConfig::parse_onto(cfg, &text)?;
        if cfg.experiment != kind {
            return Err(HarnessError::Config(format!(
                "{} is a '{}' config, not '{kind}'",
                path.display(),
                cfg.experiment
            )));
        }
    }
    if let Some(s) = args.seed {
        cfg = cfg.with_base_seed(s);
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::TaskSweep(a) => (ExperimentKind::TaskSweep, a),
        Command::DimSweep(a) => (ExperimentKind::DimSweep, a),
        Command::InferenceSweep(a) => (ExperimentKind::InferenceSweep, a),
        Command::Misspec(a) => (ExperimentKind::Misspec, a),
        Command::RiskCompare(a) => (ExperimentKind::RiskCompare, a),
        Command::Opcheck(a) => (ExperimentKind::Opcheck, a),
    };
    let cfg = match resolve(kind, args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    if args.dry_run {
        print!("{}", cfg.emit());
        return ExitCode::SUCCESS;
    }
    let outcome = match harness::run(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    for n in outcome.notes() {
        eprintln!("note: {n}");
    }
    match outcome.write() {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
        }
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    }
    if let Outcome::Opcheck(rep) = &outcome {
        for r in &rep.rows {
            println!(
                "{:<5} {:<40} {:.3e} (threshold {:.3e})",
                if r.passed { "PASS" } else { "FAIL" },
                r.check,
                r.statistic,
                r.threshold
            );
        }
        if !rep.all_passed() {
            return ExitCode::from(2);
        }
    }
    ExitCode::SUCCESS
}
