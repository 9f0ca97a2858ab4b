//! Line-oriented `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Keys missing from a file keep the value of the preset the
//! file is parsed on top of; unknown and repeated keys are errors.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::opcalc;
use crate::taskgen::{LabelModel, SpectrumSpec, TaskDistribution};

use super::HarnessError;

/// Largest dimension accepted by `opcheck` (the exact identity suite
/// materializes degree-10 operator polynomials).
pub const OPCHECK_DIM_CAP: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExperimentKind {
    TaskSweep,
    DimSweep,
    InferenceSweep,
    Misspec,
    RiskCompare,
    Opcheck,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::TaskSweep,
        ExperimentKind::DimSweep,
        ExperimentKind::InferenceSweep,
        ExperimentKind::Misspec,
        ExperimentKind::RiskCompare,
        ExperimentKind::Opcheck,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::TaskSweep => "task_sweep",
            ExperimentKind::DimSweep => "dim_sweep",
            ExperimentKind::InferenceSweep => "inference_sweep",
            ExperimentKind::Misspec => "misspec",
            ExperimentKind::RiskCompare => "risk_compare",
            ExperimentKind::Opcheck => "opcheck",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    /// `d = 20`, `N = 40`, `T ≤ 10⁵`, 10⁴ evaluation episodes.
    #[default]
    Desk,
    /// `d = 100`, `N = 200`.
    Base,
}

impl FromStr for Preset {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "desk" => Ok(Preset::Desk),
            "base" => Ok(Preset::Base),
            other => Err(HarnessError::Config(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Ambient dimension (all experiments except `dim_sweep`).
    pub dim: usize,
    /// Dimensions visited by `dim_sweep`.
    pub dims: Vec<usize>,
    pub spectrum: SpectrumSpec,
    pub prior_var: f64,
    pub noise_var: f64,
    /// Pretraining context length `N`.
    pub context_len: usize,
    /// Inference lengths `M` for `inference_sweep`.
    pub inference_lens: Vec<usize>,
    /// Task counts `T`; sweeps with a single `T` use the largest.
    pub tasks: Vec<usize>,
    /// `None` selects `1/(2 tr H tr H̃)`.
    pub gamma0: Option<f64>,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub opcheck_samples: usize,
    /// `misspec` runs every model; other sweeps use the first.
    pub label_models: Vec<LabelModel>,
    pub record_runtime: bool,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn preset(experiment: ExperimentKind, preset: Preset) -> Self {
        let (dim, dims, context_len, inference_lens) = match preset {
            Preset::Desk => (20, vec![10, 20, 40], 40, vec![5, 10, 20, 40]),
            Preset::Base => (100, vec![10, 20, 50, 100], 200, vec![10, 25, 50, 100, 200]),
        };
        let label_models = if experiment == ExperimentKind::Misspec {
            vec![
                LabelModel::Gaussian,
                LabelModel::uniform_unit(),
                LabelModel::SigmoidMean,
                LabelModel::SquareMean,
            ]
        } else {
            vec![LabelModel::Gaussian]
        };
        let mut cfg = Self {
            experiment,
            dim,
            dims,
            spectrum: SpectrumSpec::Exponential,
            prior_var: 1.0,
            noise_var: 1.0,
            context_len,
            inference_lens,
            tasks: vec![10, 100, 1_000, 10_000, 100_000],
            gamma0: Some(0.1),
            seeds: (1..=10).collect(),
            eval_episodes: 10_000,
            opcheck_samples: 1_000_000,
            label_models,
            record_runtime: false,
            output_dir: PathBuf::from("out"),
        };
        if experiment == ExperimentKind::Opcheck {
            cfg.dim = 3;
            cfg.context_len = 4;
            cfg.seeds = vec![1];
        }
        cfg
    }

    /// Parses `text` on top of `base`.
    pub fn parse_onto(base: Self, text: &str) -> Result<Self, HarnessError> {
        let mut cfg = base;
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| HarnessError::Config(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key '{key}'")));
            }
            seen.push(key.to_string());
            cfg.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a file that must name its experiment; missing keys come from
    /// the desk preset.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let kind = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.starts_with('#'))
            .find_map(|l| {
                l.split_once('=')
                    .filter(|(k, _)| k.trim() == "experiment")
                    .map(|(_, v)| v.trim().to_string())
            })
            .ok_or_else(|| HarnessError::Config("missing key 'experiment'".into()))?;
        Self::parse_onto(Self::preset(kind.parse()?, Preset::Desk), text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
            v.parse()
                .map_err(|_| HarnessError::Config(format!("cannot parse {key} = '{v}'")))
        }
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, HarnessError> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        match key {
            "experiment" => self.experiment = value.parse()?,
            "dim" => self.dim = num(key, value)?,
            "dims" => self.dims = list(key, value)?,
            "spectrum" => {
                self.spectrum = value
                    .parse()
                    .map_err(|e: crate::taskgen::TaskgenError| HarnessError::Config(e.to_string()))?
            }
            "prior_var" => self.prior_var = num(key, value)?,
            "noise_var" => self.noise_var = num(key, value)?,
            "context_len" => self.context_len = num(key, value)?,
            "inference_lens" => self.inference_lens = list(key, value)?,
            "tasks" => self.tasks = list(key, value)?,
            "gamma0" => {
                self.gamma0 = if value == "auto" { None } else { Some(num(key, value)?) }
            }
            "seeds" => self.seeds = list(key, value)?,
            "eval_episodes" => self.eval_episodes = num(key, value)?,
            "opcheck_samples" => self.opcheck_samples = num(key, value)?,
            "label_models" => {
                self.label_models = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|m| m.parse().map_err(|e: crate::taskgen::TaskgenError| HarnessError::Config(e.to_string())))
                        .collect::<Result<_, _>>()?
                }
            }
            "record_runtime" => self.record_runtime = num(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            other => return Err(HarnessError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Writes every key in a fixed order.
    pub fn emit(&self) -> String {
        fn join<T: fmt::Display>(v: &[T]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        let gamma0 = match self.gamma0 {
            Some(g) => format!("{g:?}"),
            None => "auto".into(),
        };
        let lines = [
            format!("experiment = {}", self.experiment),
            format!("dim = {}", self.dim),
            format!("dims = {}", join(&self.dims)),
            format!("spectrum = {}", self.spectrum),
            format!("prior_var = {:?}", self.prior_var),
            format!("noise_var = {:?}", self.noise_var),
            format!("context_len = {}", self.context_len),
            format!("inference_lens = {}", join(&self.inference_lens)),
            format!("tasks = {}", join(&self.tasks)),
            format!("gamma0 = {gamma0}"),
            format!("seeds = {}", join(&self.seeds)),
            format!("eval_episodes = {}", self.eval_episodes),
            format!("opcheck_samples = {}", self.opcheck_samples),
            format!("label_models = {}", join(&self.label_models)),
            format!("record_runtime = {}", self.record_runtime),
            format!("output_dir = {}", self.output_dir.display()),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Re-bases the seed list to `s, s+1, …`, keeping its length.
    pub fn with_base_seed(mut self, seed: u64) -> Self {
        let len = self.seeds.len().max(1) as u64;
        self.seeds = (0..len).map(|i| seed.wrapping_add(i)).collect();
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let nonempty = [
            ("dims", self.dims.is_empty()),
            ("inference_lens", self.inference_lens.is_empty()),
            ("tasks", self.tasks.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("label_models", self.label_models.is_empty()),
        ];
        for (name, empty) in nonempty {
            if empty {
                return bad(format!("{name} must not be empty"));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return bad("seeds must be distinct".into());
        }
        if self.dim == 0 || self.dims.contains(&0) {
            return bad("dimensions must be positive".into());
        }
        if self.context_len == 0 || self.inference_lens.contains(&0) {
            return bad("context lengths must be positive".into());
        }
        if self.tasks.contains(&0) {
            return bad("task counts must be positive".into());
        }
        if self.eval_episodes < 2 || self.opcheck_samples < 2 {
            return bad("sample counts must be at least 2".into());
        }
        if let Some(g) = self.gamma0 {
            if !(g > 0.0 && g.is_finite()) {
                return bad(format!("gamma0 must be positive, got {g}"));
            }
        }
        for m in &self.label_models {
            m.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        let dims: &[usize] = if self.experiment == ExperimentKind::DimSweep {
            &self.dims
        } else {
            std::slice::from_ref(&self.dim)
        };
        for &d in dims {
            self.distribution(d)?;
        }
        if self.experiment == ExperimentKind::Opcheck {
            let cap = OPCHECK_DIM_CAP.min(opcalc::MAX_OPERATOR_DIM);
            if self.dim > cap {
                return bad(format!("opcheck dimension {} exceeds the operator cap of {cap}", self.dim));
            }
        }
        Ok(())
    }

    /// Task distribution at dimension `d`.
    pub fn distribution(&self, d: usize) -> Result<TaskDistribution, HarnessError> {
        TaskDistribution::from_spec(&self.spectrum, d, self.prior_var, self.noise_var)
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Largest entry of `tasks`.
    pub fn final_tasks(&self) -> usize {
        self.tasks.iter().copied().max().unwrap_or(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for kind in ExperimentKind::ALL {
            for preset in [Preset::Desk, Preset::Base] {
                let cfg = ExperimentConfig::preset(kind, preset);
                cfg.validate().unwrap();
                let text = cfg.emit();
                let back = ExperimentConfig::parse(&text).unwrap();
                assert_eq!(back, cfg);
                assert_eq!(back.emit(), text);
            }
        }
    }

    #[test]
    fn parse_overrides_and_comments() {
        let text = "# sweep\nexperiment = task-sweep\n\ndim = 5\ngamma0 = auto\nlabel_models = uniform_noise:0.5,gaussian\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::TaskSweep);
        assert_eq!(cfg.dim, 5);
        assert_eq!(cfg.gamma0, None);
        assert_eq!(cfg.label_models[0], LabelModel::UniformNoise { c: 0.5 });
        assert_eq!(cfg.context_len, 40);
    }

    #[test]
    fn rejects_bad_files() {
        let base = "experiment = task_sweep\n";
        for extra in [
            "tasks =\n",
            "seeds = 1,2,1\n",
            "bogus = 3\n",
            "dim = 4\ndim = 5\n",
            "dim = x\n",
            "gamma0 = -1\n",
            "spectrum = uniform:30\n",
            "no equals sign\n",
        ] {
            let text = format!("{base}{extra}");
            assert!(ExperimentConfig::parse(&text).is_err(), "{extra}");
        }
        assert!(ExperimentConfig::parse("dim = 3\n").is_err());
    }

    #[test]
    fn opcheck_cap_named() {
        let err = ExperimentConfig::parse("experiment = opcheck\ndim = 9\n").unwrap_err();
        assert!(err.to_string().contains("cap of 6"), "{err}");
    }

    #[test]
    fn base_seed_keeps_length() {
        let cfg = ExperimentConfig::preset(ExperimentKind::TaskSweep, Preset::Desk).with_base_seed(100);
        assert_eq!(cfg.seeds, (100..110).collect::<Vec<_>>());
    }
}
