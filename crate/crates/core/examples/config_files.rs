//! Parses a key=value experiment config, applies overrides, validates and
//! prints the canonical form.
//!
//! ```text
//! cargo run --release --example config_files
//! ```

use icl_lab::harness::ExperimentConfig;

const TEXT: &str = "\
# small dimension sweep
experiment = dim-sweep
dims = 5, 10, 20
spectrum = polynomial:1.5
seeds = 1, 2, 3
gamma0 = auto
";

fn main() {
    let mut cfg = ExperimentConfig::parse(TEXT).unwrap();
    cfg.set("context_len", "30").unwrap();
    cfg.validate().unwrap();
    let emitted = cfg.emit();
    print!("{emitted}");
    assert_eq!(ExperimentConfig::parse(&emitted).unwrap(), cfg);

    match ExperimentConfig::parse("experiment = opcheck\ndim = 12\n") {
        Ok(_) => println!("unexpectedly valid"),
        Err(e) => println!("\nrejected: {e}"),
    }
}
