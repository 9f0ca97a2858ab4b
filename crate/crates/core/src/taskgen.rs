//! Task, prompt and label generation.
//!
//! A task is `β ~ N(0, ψ² I)`. Covariates are `N(0, H)` with `H = diag(λ)` in
//! its eigenbasis, and labels follow one of the [`LabelModel`] variants. One
//! [`Episode`] holds `n` context pairs plus a query pair that share one `β`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::rng::RandomStream;

/// Floor used for the zero eigenvalues of the uniform spectrum.
pub const UNIFORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskgenError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("invalid label model: {0}")]
    InvalidLabelModel(String),
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
}

/// Eigenvalue family of the covariate covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectrumSpec {
    /// `λᵢ = 1/s` for `i ≤ s`, `floor` afterwards.
    Uniform { s: usize, floor: f64 },
    /// `λᵢ = i^{-a}`.
    Polynomial { a: f64 },
    /// `λᵢ = 2^{-i}`.
    Exponential,
    Explicit(Vec<f64>),
}

impl SpectrumSpec {
    pub fn uniform(s: usize) -> Self {
        SpectrumSpec::Uniform {
            s,
            floor: UNIFORM_FLOOR,
        }
    }

    pub fn polynomial(a: f64) -> Self {
        SpectrumSpec::Polynomial { a }
    }

    /// Checks the family parameters against dimension `d`.
    pub fn validate(&self, d: usize) -> Result<(), TaskgenError> {
        if d == 0 {
            return Err(TaskgenError::InvalidSpectrum("dimension must be positive".into()));
        }
        match self {
            SpectrumSpec::Uniform { s, floor } => {
                if *s < 1 || *s > d {
                    return Err(TaskgenError::InvalidSpectrum(format!(
                        "uniform spectrum needs 1 <= s <= d, got s={s}, d={d}"
                    )));
                }
                if !(*floor > 0.0 && floor.is_finite()) {
                    return Err(TaskgenError::InvalidSpectrum(format!(
                        "uniform floor must be positive, got {floor}"
                    )));
                }
            }
            SpectrumSpec::Polynomial { a } => {
                if !(*a > 1.0 && a.is_finite()) {
                    return Err(TaskgenError::InvalidSpectrum(format!(
                        "polynomial spectrum needs a > 1, got {a}"
                    )));
                }
            }
            SpectrumSpec::Exponential => {}
            SpectrumSpec::Explicit(v) => {
                if v.len() != d {
                    return Err(TaskgenError::InvalidSpectrum(format!(
                        "explicit spectrum has {} values, expected {d}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                    return Err(TaskgenError::InvalidSpectrum(
                        "explicit eigenvalues must be positive and finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for SpectrumSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectrumSpec::Uniform { s, floor } => {
                if *floor == UNIFORM_FLOOR {
                    write!(f, "uniform:{s}")
                } else {
                    write!(f, "uniform:{s}:{floor:?}")
                }
            }
            SpectrumSpec::Polynomial { a } => write!(f, "polynomial:{a:?}"),
            SpectrumSpec::Exponential => write!(f, "exponential"),
            SpectrumSpec::Explicit(v) => {
                let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
                write!(f, "explicit:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for SpectrumSpec {
    type Err = TaskgenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TaskgenError::InvalidSpectrum(format!("cannot parse spectrum '{s}'"));
        let mut parts = s.trim().splitn(2, ':');
        let kind = parts.next().unwrap_or("");
        let rest = parts.next();
        match (kind, rest) {
            ("exponential", None) => Ok(SpectrumSpec::Exponential),
            ("uniform", Some(r)) => {
                let mut it = r.split(':');
                let s_val = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let floor = match it.next() {
                    Some(v) => v.parse().map_err(|_| bad())?,
                    None => UNIFORM_FLOOR,
                };
                Ok(SpectrumSpec::Uniform { s: s_val, floor })
            }
            ("polynomial", Some(r)) => Ok(SpectrumSpec::Polynomial {
                a: r.parse().map_err(|_| bad())?,
            }),
            ("explicit", Some(r)) => {
                let vals: Result<Vec<f64>, _> = r.split(',').map(|v| v.trim().parse()).collect();
                Ok(SpectrumSpec::Explicit(vals.map_err(|_| bad())?))
            }
            _ => Err(bad()),
        }
    }
}

/// Eigenvalues `λ₁ ≥ … ≥ λ_d` of the requested family.
pub fn spectrum_eigenvalues(spec: &SpectrumSpec, d: usize) -> Result<Vec<f64>, TaskgenError> {
    spec.validate(d)?;
    let mut v: Vec<f64> = match spec {
        SpectrumSpec::Uniform { s, floor } => (1..=d)
            .map(|i| if i <= *s { 1.0 / *s as f64 } else { *floor })
            .collect(),
        SpectrumSpec::Polynomial { a } => (1..=d).map(|i| (i as f64).powf(-a)).collect(),
        SpectrumSpec::Exponential => (1..=d).map(|i| 0.5f64.powi(i as i32)).collect(),
        SpectrumSpec::Explicit(v) => v.clone(),
    };
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(v)
}

/// Population parameters `(ψ², σ², H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDistribution {
    prior_var: f64,
    noise_var: f64,
    spectrum: Vec<f64>,
    sqrt_spectrum: Vec<f64>,
    basis: Option<DMatrix<f64>>,
}

impl TaskDistribution {
    /// Distribution with `H = diag(spectrum)`. The spectrum is sorted
    /// non-increasing.
    pub fn new(prior_var: f64, noise_var: f64, spectrum: Vec<f64>) -> Result<Self, TaskgenError> {
        if !(prior_var > 0.0 && prior_var.is_finite()) {
            return Err(TaskgenError::InvalidDistribution(format!(
                "prior variance must be positive, got {prior_var}"
            )));
        }
        if !(noise_var >= 0.0 && noise_var.is_finite()) {
            return Err(TaskgenError::InvalidDistribution(format!(
                "noise variance must be non-negative, got {noise_var}"
            )));
        }
        if spectrum.is_empty() {
            return Err(TaskgenError::InvalidDistribution("empty spectrum".into()));
        }
        if spectrum.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(TaskgenError::InvalidDistribution(
                "eigenvalues must be positive and finite".into(),
            ));
        }
        let mut spectrum = spectrum;
        spectrum.sort_by(|a, b| b.total_cmp(a));
        let sqrt_spectrum = spectrum.iter().map(|x| x.sqrt()).collect();
        Ok(Self {
            prior_var,
            noise_var,
            spectrum,
            sqrt_spectrum,
            basis: None,
        })
    }

    pub fn from_spec(
        spec: &SpectrumSpec,
        d: usize,
        prior_var: f64,
        noise_var: f64,
    ) -> Result<Self, TaskgenError> {
        Self::new(prior_var, noise_var, spectrum_eigenvalues(spec, d)?)
    }

    /// Accepts a general symmetric positive definite `H` and keeps its
    /// eigenbasis `U` (columns, matching the sorted spectrum) so that results can
    /// be mapped back with [`TaskDistribution::to_original`].
    pub fn from_covariance(
        prior_var: f64,
        noise_var: f64,
        h: &DMatrix<f64>,
    ) -> Result<Self, TaskgenError> {
        if !h.is_square() || h.nrows() == 0 {
            return Err(TaskgenError::InvalidDistribution("covariance must be square".into()));
        }
        let asym = (h - h.transpose()).amax();
        if asym > 1e-10 * h.amax().max(1.0) {
            return Err(TaskgenError::InvalidDistribution("covariance must be symmetric".into()));
        }
        let eig = SymmetricEigen::new(h.clone());
        let mut order: Vec<usize> = (0..h.nrows()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let basis = DMatrix::from_fn(h.nrows(), h.nrows(), |r, c| eig.eigenvectors[(r, order[c])]);
        let mut dist = Self::new(prior_var, noise_var, spectrum)?;
        dist.basis = Some(basis);
        Ok(dist)
    }

    pub fn dim(&self) -> usize {
        self.spectrum.len()
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn trace(&self) -> f64 {
        self.spectrum.iter().sum()
    }

    /// Eigenbasis of the covariance supplied to [`TaskDistribution::from_covariance`].
    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.basis.as_ref()
    }

    /// `H` in the eigenbasis, i.e. `diag(λ)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.spectrum))
    }

    /// Maps an eigenbasis matrix `A` to `U A Uᵀ` in the original coordinates.
    pub fn to_original(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.basis {
            Some(u) => u * a * u.transpose(),
            None => a.clone(),
        }
    }

    /// Drops eigenvalues at or below `floor`. Used by closed-form evaluators so
    /// the floored directions of a uniform spectrum behave as exact zeros.
    pub fn truncated(&self, floor: f64) -> Self {
        let kept: Vec<f64> = self.spectrum.iter().copied().filter(|&x| x > floor).collect();
        if kept.is_empty() || kept.len() == self.spectrum.len() {
            return self.clone();
        }
        Self::new(self.prior_var, self.noise_var, kept).expect("subset of a valid spectrum")
    }

    pub fn with_noise_var(&self, noise_var: f64) -> Result<Self, TaskgenError> {
        let mut d = Self::new(self.prior_var, noise_var, self.spectrum.clone())?;
        d.basis = self.basis.clone();
        Ok(d)
    }

    fn sample_covariate(&self, rng: &mut RandomStream, out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&self.sqrt_spectrum) {
            *o = s * rng.normal();
        }
    }
}

/// Label-generation variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelModel {
    /// `y ~ N(βᵀx, σ²)`.
    Gaussian,
    /// `y = βᵀx + Uniform[-c, c]`; `σ²` is ignored.
    UniformNoise { c: f64 },
    /// `y ~ N(sigmoid(βᵀx), σ²)`.
    SigmoidMean,
    /// `y ~ N((βᵀx)², σ²)`.
    SquareMean,
}

impl LabelModel {
    /// Uniform noise with `c = √3`, i.e. unit noise variance.
    pub fn uniform_unit() -> Self {
        LabelModel::UniformNoise { c: 3f64.sqrt() }
    }

    pub fn validate(&self) -> Result<(), TaskgenError> {
        if let LabelModel::UniformNoise { c } = self {
            if !(*c > 0.0 && c.is_finite()) {
                return Err(TaskgenError::InvalidLabelModel(format!(
                    "uniform noise half-width must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            LabelModel::Gaussian => "gaussian",
            LabelModel::UniformNoise { .. } => "uniform_noise",
            LabelModel::SigmoidMean => "sigmoid_mean",
            LabelModel::SquareMean => "square_mean",
        }
    }

    fn label(&self, signal: f64, noise_sd: f64, rng: &mut RandomStream) -> f64 {
        match self {
            LabelModel::Gaussian => signal + noise_sd * rng.normal(),
            LabelModel::UniformNoise { c } => signal + rng.uniform(-c, *c),
            LabelModel::SigmoidMean => 1.0 / (1.0 + (-signal).exp()) + noise_sd * rng.normal(),
            LabelModel::SquareMean => signal * signal + noise_sd * rng.normal(),
        }
    }
}

impl fmt::Display for LabelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelModel::UniformNoise { c } => write!(f, "uniform_noise:{c:?}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for LabelModel {
    type Err = TaskgenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let model = match s {
            "gaussian" => LabelModel::Gaussian,
            "uniform_noise" => LabelModel::uniform_unit(),
            "sigmoid_mean" => LabelModel::SigmoidMean,
            "square_mean" => LabelModel::SquareMean,
            _ => match s.strip_prefix("uniform_noise:") {
                Some(c) => LabelModel::UniformNoise {
                    c: c.parse().map_err(|_| {
                        TaskgenError::InvalidLabelModel(format!("cannot parse '{s}'"))
                    })?,
                },
                None => return Err(TaskgenError::InvalidLabelModel(format!("unknown '{s}'"))),
            },
        };
        model.validate()?;
        Ok(model)
    }
}

/// One prompt: `n` context pairs, a query covariate and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    contexts_x: DMatrix<f64>,
    contexts_y: DVector<f64>,
    query_x: DVector<f64>,
    label_y: f64,
    task_beta: Option<DVector<f64>>,
}

impl Episode {
    /// Builds an episode from explicit data (no task vector attached).
    pub fn new(
        contexts_x: DMatrix<f64>,
        contexts_y: DVector<f64>,
        query_x: DVector<f64>,
        label_y: f64,
    ) -> Result<Self, TaskgenError> {
        if contexts_x.nrows() != contexts_y.len() {
            return Err(TaskgenError::InvalidEpisode(format!(
                "{} context rows but {} labels",
                contexts_x.nrows(),
                contexts_y.len()
            )));
        }
        if contexts_x.ncols() != query_x.len() {
            return Err(TaskgenError::InvalidEpisode(format!(
                "context dimension {} differs from query dimension {}",
                contexts_x.ncols(),
                query_x.len()
            )));
        }
        let finite = contexts_x.iter().all(|v| v.is_finite())
            && contexts_y.iter().all(|v| v.is_finite())
            && query_x.iter().all(|v| v.is_finite())
            && label_y.is_finite();
        if !finite {
            return Err(TaskgenError::InvalidEpisode("non-finite entry".into()));
        }
        Ok(Self {
            contexts_x,
            contexts_y,
            query_x,
            label_y,
            task_beta: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.query_x.len()
    }

    /// Number of context pairs `n`.
    pub fn len(&self) -> usize {
        self.contexts_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts_y.is_empty()
    }

    pub fn contexts_x(&self) -> &DMatrix<f64> {
        &self.contexts_x
    }

    pub fn contexts_y(&self) -> &DVector<f64> {
        &self.contexts_y
    }

    pub fn query_x(&self) -> &DVector<f64> {
        &self.query_x
    }

    pub fn label(&self) -> f64 {
        self.label_y
    }

    /// The task vector that generated the episode. Diagnostics only: no
    /// estimator in this crate reads it.
    pub fn task_beta(&self) -> Option<&DVector<f64>> {
        self.task_beta.as_ref()
    }

    /// `Xᵀy / n`, or the zero vector when `n = 0`.
    pub fn moment_vector(&self) -> DVector<f64> {
        if self.is_empty() {
            return DVector::zeros(self.dim());
        }
        self.contexts_x.tr_mul(&self.contexts_y) / self.len() as f64
    }

    /// Same episode with context rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.len(), "permutation length");
        let x = DMatrix::from_fn(self.len(), self.dim(), |r, c| self.contexts_x[(perm[r], c)]);
        let y = DVector::from_fn(self.len(), |r, _| self.contexts_y[perm[r]]);
        Self {
            contexts_x: x,
            contexts_y: y,
            query_x: self.query_x.clone(),
            label_y: self.label_y,
            task_beta: self.task_beta.clone(),
        }
    }
}

/// `β ~ N(0, ψ² I_d)`.
pub fn sample_task(dist: &TaskDistribution, rng: &mut RandomStream) -> DVector<f64> {
    let sd = dist.prior_var.sqrt();
    DVector::from_fn(dist.dim(), |_, _| sd * rng.normal())
}

/// Draws `β`, then `n` context rows and the query pair. Each row draws its
/// covariate followed by its label noise.
pub fn sample_episode(
    dist: &TaskDistribution,
    n: usize,
    model: LabelModel,
    rng: &mut RandomStream,
) -> Episode {
    let d = dist.dim();
    let beta = sample_task(dist, rng);
    let noise_sd = dist.noise_var.sqrt();
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    let mut row = vec![0.0; d];
    for i in 0..n {
        dist.sample_covariate(rng, &mut row);
        let mut signal = 0.0;
        for j in 0..d {
            x[(i, j)] = row[j];
            signal += beta[j] * row[j];
        }
        y[i] = model.label(signal, noise_sd, rng);
    }
    dist.sample_covariate(rng, &mut row);
    let query = DVector::from_column_slice(&row);
    let label = model.label(beta.dot(&query), noise_sd, rng);
    Episode {
        contexts_x: x,
        contexts_y: y,
        query_x: query,
        label_y: label,
        task_beta: Some(beta),
    }
}
