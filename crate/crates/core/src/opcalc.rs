//! Operators on `d×d` matrices, materialized as `d²×d²` kernels.
//!
//! Vectorization is column-major: `vec(A)[i + j·d] = A[i, j]`. With this
//! convention the map `X ↦ A X B` has kernel `kron(Bᵀ, A)`, composition of
//! maps is the matrix product of kernels, and `P⊗Q` below always denotes the
//! kernel `kron(P, Q)`, i.e. the map `X ↦ Q X Pᵀ`.
//!
//! The module also holds the moment operators of the SGD analysis
//! (`M = E(xxᵀ)^{⊗2}`, `L = E(uuᵀ)^{⊗2}`, `N = E Ξ^{⊗2}`), the GD and SGD maps
//! on operators, operator monomials `S^(t) = ⟨H̃^t, ·⟩ H^t` and their formal
//! polynomials, diagonalization, the bias/variance recursions and the scalar
//! schedule function `f`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::predictors::GammaMatrix;
use crate::pretrain::{self, PretrainConfig, StepsizeSchedule};
use crate::rng::{domain, RandomStream};
use crate::stats::{par_estimate, par_estimate_vec, Estimate};
use crate::taskgen::{sample_episode, LabelModel, TaskDistribution};
use crate::theory::{self, PopulationContext};

/// Largest dimension for which operators are materialized.
pub const MAX_OPERATOR_DIM: usize = 8;

/// Eigenvalue slack for PSD checks.
pub const PSD_EIG_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpcalcError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dimension {dim} exceeds the operator cap of {cap}")]
    DimensionCap { dim: usize, cap: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("identity failed at degree {degree}: relative deviation {deviation:.3e}")]
    Tolerance { degree: usize, deviation: f64 },
}

fn check_cap(dim: usize, cap: usize) -> Result<(), OpcalcError> {
    if dim > cap {
        Err(OpcalcError::DimensionCap { dim, cap })
    } else {
        Ok(())
    }
}

fn vec_of(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

fn unvec(v: &DVector<f64>, d: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(d, d, v.as_slice())
}

/// Linear map on `d×d` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixOperator {
    dim: usize,
    kernel: DMatrix<f64>,
}

impl MatrixOperator {
    pub fn new(dim: usize, kernel: DMatrix<f64>) -> Result<Self, OpcalcError> {
        if kernel.shape() != (dim * dim, dim * dim) {
            return Err(OpcalcError::Shape(format!(
                "kernel is {}x{}, expected {n}x{n}",
                kernel.nrows(),
                kernel.ncols(),
                n = dim * dim
            )));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(OpcalcError::Invalid("non-finite kernel entry".into()));
        }
        Ok(Self { dim, kernel })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            kernel: DMatrix::zeros(dim * dim, dim * dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            kernel: DMatrix::identity(dim * dim, dim * dim),
        }
    }

    /// `P⊗Q`, the map `X ↦ Q X Pᵀ`.
    pub fn tensor(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Self {
        Self {
            dim: p.nrows(),
            kernel: p.kronecker(q),
        }
    }

    /// The map `X ↦ A X B`, i.e. `Bᵀ⊗A`.
    pub fn sandwich(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Self {
        Self::tensor(&b.transpose(), a)
    }

    /// `P^{⊗2}`, the map `X ↦ P X Pᵀ`.
    pub fn sym_square(p: &DMatrix<f64>) -> Self {
        Self::tensor(p, p)
    }

    /// `X ↦ ⟨input, X⟩ output`.
    pub fn rank_one(output: &DMatrix<f64>, input: &DMatrix<f64>) -> Self {
        Self {
            dim: output.nrows(),
            kernel: vec_of(output) * vec_of(input).transpose(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn apply(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>, OpcalcError> {
        if a.shape() != (self.dim, self.dim) {
            return Err(OpcalcError::Shape(format!(
                "operator acts on {d}x{d}, got {}x{}",
                a.nrows(),
                a.ncols(),
                d = self.dim
            )));
        }
        Ok(unvec(&(&self.kernel * vec_of(a)), self.dim))
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &MatrixOperator) -> MatrixOperator {
        assert_eq!(self.dim, other.dim, "composing operators of different dimension");
        Self {
            dim: self.dim,
            kernel: &self.kernel * &other.kernel,
        }
    }

    pub fn add(&self, other: &MatrixOperator) -> MatrixOperator {
        Self {
            dim: self.dim,
            kernel: &self.kernel + &other.kernel,
        }
    }

    pub fn sub(&self, other: &MatrixOperator) -> MatrixOperator {
        Self {
            dim: self.dim,
            kernel: &self.kernel - &other.kernel,
        }
    }

    pub fn scale(&self, c: f64) -> MatrixOperator {
        Self {
            dim: self.dim,
            kernel: &self.kernel * c,
        }
    }

    /// `⟨A, O∘B⟩`.
    pub fn bilinear(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        vec_of(a).dot(&(&self.kernel * vec_of(b)))
    }
}

/// `O∘A`.
pub fn tensor_apply(op: &MatrixOperator, a: &DMatrix<f64>) -> Result<DMatrix<f64>, OpcalcError> {
    op.apply(a)
}

/// A Monte Carlo operator estimate with per-entry standard errors.
#[derive(Debug, Clone)]
pub struct OperatorEstimate {
    pub mean: MatrixOperator,
    pub stderr: DMatrix<f64>,
    pub num_samples: usize,
}

impl OperatorEstimate {
    /// `O∘A` and a conservative entrywise standard error `|SE|·|vec A|`.
    pub fn apply_with_se(&self, a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), OpcalcError> {
        let mean = self.mean.apply(a)?;
        let se = &self.stderr * vec_of(a).abs();
        Ok((mean, unvec(&se, self.mean.dim)))
    }

    pub fn max_stderr(&self) -> f64 {
        self.stderr.max()
    }
}

/// Diagonal `H` and `H̃` of a population context.
fn spectra(ctx: &PopulationContext) -> (Vec<f64>, Vec<f64>) {
    (ctx.dist().spectrum().to_vec(), theory::tilde_h(ctx))
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

/// Exact Gaussian fourth moment `M∘A = E[xxᵀAxxᵀ] = tr(HA)H + HAH + HAᵀH`.
pub fn mcal_exact(dist: &TaskDistribution) -> Result<MatrixOperator, OpcalcError> {
    check_cap(dist.dim(), MAX_OPERATOR_DIM)?;
    let h = dist.covariance();
    let d = dist.dim();
    let kernel = DMatrix::from_fn(d * d, d * d, |r, c| {
        let (i, j) = (r % d, r / d);
        let (k, l) = (c % d, c / d);
        h[(i, k)] * h[(l, j)] + h[(i, l)] * h[(k, j)] + h[(l, k)] * h[(i, j)]
    });
    MatrixOperator::new(d, kernel)
}

/// `A ↦ E[XᵀX A XᵀX] = n·M∘A + n(n−1) HAH`; for symmetric `A` this is
/// `n tr(HA) H + n(n+1) HAH`.
pub fn fourth_moment_xtx(dist: &TaskDistribution, n: usize) -> Result<MatrixOperator, OpcalcError> {
    if n == 0 {
        return Err(OpcalcError::Invalid("n must be at least 1".into()));
    }
    let m = mcal_exact(dist)?;
    let h = dist.covariance();
    let nf = n as f64;
    Ok(m.scale(nf).add(&MatrixOperator::sym_square(&h).scale(nf * (nf - 1.0))))
}

fn estimate_kernel<F>(dist: &TaskDistribution, n: usize, num_samples: usize, seed: u64, sample: F) -> Result<OperatorEstimate, OpcalcError>
where
    F: Fn(&crate::taskgen::Episode) -> DMatrix<f64> + Sync,
{
    check_cap(dist.dim(), MAX_OPERATOR_DIM)?;
    if num_samples < 2 {
        return Err(OpcalcError::Invalid("need at least 2 samples".into()));
    }
    let d = dist.dim();
    let len = d.pow(4);
    let est = par_estimate_vec(num_samples, len, |i, out| {
        let mut rng = RandomStream::derive(seed, domain::MOMENT, i as u64);
        let ep = sample_episode(dist, n, LabelModel::Gaussian, &mut rng);
        let p = sample(&ep);
        let k = p.kronecker(&p);
        out.copy_from_slice(k.as_slice());
    });
    let mean = DMatrix::from_iterator(d * d, d * d, est.iter().map(|e| e.mean));
    let stderr = DMatrix::from_iterator(d * d, d * d, est.iter().map(|e| e.stderr));
    Ok(OperatorEstimate {
        mean: MatrixOperator::new(d, mean)?,
        stderr,
        num_samples,
    })
}

/// Monte Carlo `L = E(uuᵀ)^{⊗2}` with `u = Xᵀy/n`.
pub fn estimate_lcal(dist: &TaskDistribution, n: usize, num_samples: usize, seed: u64) -> Result<OperatorEstimate, OpcalcError> {
    if n == 0 {
        return Err(OpcalcError::Invalid("n must be at least 1".into()));
    }
    estimate_kernel(dist, n, num_samples, seed, |ep| {
        let u = ep.moment_vector();
        &u * u.transpose()
    })
}

/// `Ξ = xxᵀΓ*uuᵀ − y x uᵀ` for one episode.
fn xi_sample(ep: &crate::taskgen::Episode, gamma_star: &[f64]) -> DMatrix<f64> {
    let u = ep.moment_vector();
    let x = ep.query_x();
    let gu = DVector::from_fn(u.len(), |i, _| gamma_star[i] * u[i]);
    let coef = x.dot(&gu) - ep.label();
    x * u.transpose() * coef
}

/// Monte Carlo estimate of `N = E Ξ^{⊗2}` together with the estimated mean of
/// `Ξ` (which should vanish).
#[derive(Debug, Clone)]
pub struct NcalEstimate {
    pub op: OperatorEstimate,
    pub xi_mean: DMatrix<f64>,
    pub xi_stderr: DMatrix<f64>,
}

impl NcalEstimate {
    /// `‖E Ξ‖_F ≤ k ‖SE‖_F`.
    pub fn mean_is_zero(&self, k: f64) -> bool {
        self.xi_mean.norm() <= k * self.xi_stderr.norm()
    }
}

pub fn estimate_ncal(dist: &TaskDistribution, n: usize, num_samples: usize, seed: u64) -> Result<NcalEstimate, OpcalcError> {
    let ctx = PopulationContext::new(dist, n).map_err(|e| OpcalcError::Invalid(e.to_string()))?;
    let gs = theory::gamma_star_diag(&ctx);
    let op = estimate_kernel(dist, n, num_samples, seed, |ep| xi_sample(ep, &gs))?;
    let d = dist.dim();
    let mean = par_estimate_vec(num_samples, d * d, |i, out| {
        let mut rng = RandomStream::derive(seed, domain::MOMENT, i as u64);
        let ep = sample_episode(dist, n, LabelModel::Gaussian, &mut rng);
        out.copy_from_slice(xi_sample(&ep, &gs).as_slice());
    });
    Ok(NcalEstimate {
        op,
        xi_mean: DMatrix::from_iterator(d, d, mean.iter().map(|e| e.mean)),
        xi_stderr: DMatrix::from_iterator(d, d, mean.iter().map(|e| e.stderr)),
    })
}

/// Monte Carlo `E[uuᵀ]` (entrywise), to be compared with `diag(λ̃)`.
pub fn estimate_tilde_h(ctx: &PopulationContext, num_samples: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = ctx.dist().dim();
    let est = par_estimate_vec(num_samples, d * d, |i, out| {
        let mut rng = RandomStream::derive(seed, domain::MOMENT, i as u64);
        let ep = sample_episode(ctx.dist(), ctx.context_len(), LabelModel::Gaussian, &mut rng);
        let u = ep.moment_vector();
        out.copy_from_slice((&u * u.transpose()).as_slice());
    });
    (
        DMatrix::from_iterator(d, d, est.iter().map(|e| e.mean)),
        DMatrix::from_iterator(d, d, est.iter().map(|e| e.stderr)),
    )
}

/// Monte Carlo `E[XᵀX A XᵀX]` for a fixed `A` (with `n = 1` this is `M∘A`).
pub fn estimate_xtx_apply(
    dist: &TaskDistribution,
    n: usize,
    a: &DMatrix<f64>,
    num_samples: usize,
    seed: u64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = dist.dim();
    let est = par_estimate_vec(num_samples, d * d, |i, out| {
        let mut rng = RandomStream::derive(seed, domain::MOMENT, i as u64);
        let ep = sample_episode(dist, n, LabelModel::Gaussian, &mut rng);
        let g = ep.contexts_x().tr_mul(ep.contexts_x());
        out.copy_from_slice((&g * a * &g).as_slice());
    });
    (
        DMatrix::from_iterator(d, d, est.iter().map(|e| e.mean)),
        DMatrix::from_iterator(d, d, est.iter().map(|e| e.stderr)),
    )
}

/// GD map on operators:
/// `G(O) = O − γ((H⊗I)∘O∘(H̃⊗I) + (I⊗H)∘O∘(I⊗H̃)) + γ² H^{⊗2}∘O∘H̃^{⊗2}`.
pub fn gd_map(op: &MatrixOperator, gamma: f64, ctx: &PopulationContext) -> Result<MatrixOperator, OpcalcError> {
    let (h, ht) = spectra(ctx);
    if op.dim != h.len() {
        return Err(OpcalcError::Shape(format!("operator dimension {} vs distribution {}", op.dim, h.len())));
    }
    let (hm, htm) = (diag(&h), diag(&ht));
    let id = DMatrix::identity(op.dim, op.dim);
    let k = &op.kernel;
    let first = hm.kronecker(&id) * k * htm.kronecker(&id);
    let second = id.kronecker(&hm) * k * id.kronecker(&htm);
    let quad = hm.kronecker(&hm) * k * htm.kronecker(&htm);
    Ok(MatrixOperator {
        dim: op.dim,
        kernel: k - (first + second) * gamma + quad * (gamma * gamma),
    })
}

/// SGD map: the GD map with the quadratic term replaced by `γ² M∘O∘L`.
pub fn sgd_map(
    op: &MatrixOperator,
    gamma: f64,
    ctx: &PopulationContext,
    mcal: &MatrixOperator,
    lcal: &MatrixOperator,
) -> Result<MatrixOperator, OpcalcError> {
    let (h, ht) = spectra(ctx);
    let (hm, htm) = (diag(&h), diag(&ht));
    let id = DMatrix::identity(op.dim, op.dim);
    let k = &op.kernel;
    let first = hm.kronecker(&id) * k * htm.kronecker(&id);
    let second = id.kronecker(&hm) * k * id.kronecker(&htm);
    let quad = &mcal.kernel * k * &lcal.kernel;
    Ok(MatrixOperator {
        dim: op.dim,
        kernel: k - (first + second) * gamma + quad * (gamma * gamma),
    })
}

fn powers(v: &[f64], t: usize) -> Vec<f64> {
    v.iter().map(|x| x.powi(t as i32)).collect()
}

/// `S^(t)∘A = ⟨H̃^t, A⟩ H^t`; degree 0 gives `tr(A) I`.
pub fn monomial_apply(t: usize, a: &DMatrix<f64>, ctx: &PopulationContext) -> Result<DMatrix<f64>, OpcalcError> {
    let (h, ht) = spectra(ctx);
    let d = h.len();
    if a.shape() != (d, d) {
        return Err(OpcalcError::Shape(format!("expected {d}x{d}")));
    }
    let pht = powers(&ht, t);
    let inner: f64 = (0..d).map(|i| pht[i] * a[(i, i)]).sum();
    Ok(diag(&powers(&h, t)) * inner)
}

/// Kernel of `S^(t)`: `vec(H^t) vec(H̃^t)ᵀ`.
pub fn monomial_operator(t: usize, ctx: &PopulationContext) -> MatrixOperator {
    let (h, ht) = spectra(ctx);
    MatrixOperator::rank_one(&diag(&powers(&h, t)), &diag(&powers(&ht, t)))
}

/// Formal polynomial `Σ_k c_k S^(k)` under the product `S^(i)•S^(j) = S^(i+j)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OperatorPolynomial {
    coeffs: BTreeMap<usize, f64>,
}

impl OperatorPolynomial {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn monomial(degree: usize, coeff: f64) -> Self {
        let mut p = Self::zero();
        p.add_term(degree, coeff);
        p
    }

    /// `S^(0) − γ S^(1)`.
    pub fn gd_factor(gamma: f64) -> Self {
        Self::monomial(0, 1.0).add(&Self::monomial(1, -gamma))
    }

    fn add_term(&mut self, degree: usize, coeff: f64) {
        if coeff != 0.0 {
            *self.coeffs.entry(degree).or_insert(0.0) += coeff;
        }
    }

    pub fn coeffs(&self) -> &BTreeMap<usize, f64> {
        &self.coeffs
    }

    pub fn coeff(&self, degree: usize) -> f64 {
        self.coeffs.get(&degree).copied().unwrap_or(0.0)
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (&k, &c) in &other.coeffs {
            out.add_term(k, c);
        }
        out
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = Self::zero();
        for (&k, &v) in &self.coeffs {
            out.add_term(k, v * c);
        }
        out
    }

    /// The `•` product.
    pub fn bullet(&self, other: &Self) -> Self {
        let mut out = Self::zero();
        for (&i, &a) in &self.coeffs {
            for (&j, &b) in &other.coeffs {
                out.add_term(i + j, a * b);
            }
        }
        out
    }

    pub fn bullet_pow(&self, t: usize) -> Self {
        let mut out = Self::monomial(0, 1.0);
        for _ in 0..t {
            out = out.bullet(self);
        }
        out
    }

    /// `G(Σ c_k S^(k)) = Σ c_k (S^(k) − 2γ S^(k+1) + γ² S^(k+2))`.
    pub fn gd_map(&self, gamma: f64) -> Self {
        self.bullet(&Self::gd_factor(gamma).bullet_pow(2))
    }

    pub fn to_operator(&self, ctx: &PopulationContext) -> MatrixOperator {
        let d = ctx.dist().dim();
        let mut out = MatrixOperator::zeros(d);
        for (&k, &c) in &self.coeffs {
            out = out.add(&monomial_operator(k, ctx).scale(c));
        }
        out
    }

    /// Diagonal kernel `Σ c_k h^{⊙k} (h̃^{⊙k})ᵀ`.
    pub fn to_diagonal(&self, ctx: &PopulationContext) -> DiagonalOperator {
        let (h, ht) = spectra(ctx);
        let d = h.len();
        let mut kernel = DMatrix::zeros(d, d);
        for (&k, &c) in &self.coeffs {
            let a = DVector::from_vec(powers(&h, k));
            let b = DVector::from_vec(powers(&ht, k));
            kernel += a * b.transpose() * c;
        }
        DiagonalOperator { kernel }
    }
}

/// Operator restricted to diagonal matrices with diagonal outputs:
/// `diag(D∘diag(v)) = G v`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalOperator {
    pub kernel: DMatrix<f64>,
}

impl DiagonalOperator {
    pub fn new(kernel: DMatrix<f64>) -> Result<Self, OpcalcError> {
        if !kernel.is_square() {
            return Err(OpcalcError::Shape("diagonal kernel must be square".into()));
        }
        Ok(Self { kernel })
    }

    pub fn dim(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.kernel * v
    }

    /// The `•` product, i.e. the Hadamard product of kernels.
    pub fn bullet(&self, other: &DiagonalOperator) -> DiagonalOperator {
        DiagonalOperator {
            kernel: self.kernel.component_mul(&other.kernel),
        }
    }

    /// GD map on diagonal operators:
    /// `G ↦ G − 2γ diag(h) G diag(h̃) + γ² diag(h²) G diag(h̃²)`.
    pub fn gd_map(&self, gamma: f64, ctx: &PopulationContext) -> DiagonalOperator {
        let (h, ht) = spectra(ctx);
        let d = self.dim();
        let kernel = DMatrix::from_fn(d, d, |i, j| {
            let a = h[i] * ht[j];
            self.kernel[(i, j)] * (1.0 - 2.0 * gamma * a + gamma * gamma * a * a)
        });
        DiagonalOperator { kernel }
    }

    /// Whether `other − self` is entrywise non-negative up to `tol`, the order
    /// of the diagonal cone.
    pub fn dominated_by(&self, other: &DiagonalOperator, tol: f64) -> bool {
        (&other.kernel - &self.kernel).iter().all(|&v| v >= -tol)
    }
}

/// Restriction to diagonal inputs, projected onto diagonal outputs.
pub fn diagonalize(op: &MatrixOperator) -> DiagonalOperator {
    let d = op.dim;
    DiagonalOperator {
        kernel: DMatrix::from_fn(d, d, |i, j| op.kernel[(i + i * d, j + j * d)]),
    }
}

/// Result of one named verification.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Largest deviation seen (relative error, or negative-eigenvalue size for
    /// PSD checks).
    pub deviation: f64,
    /// Allowed deviation at the worst case.
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, deviation: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            deviation,
            tolerance,
            passed: deviation <= tolerance,
        }
    }
}

/// Relative deviation `max|a − b| / max|b|`.
pub fn relative_deviation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.amax().max(a.amax());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).amax() / scale
    }
}

/// Per-degree deviations of the polynomial composition identity.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionReport {
    /// `(t, deviation)` for `G^t(S^(1))` with constant stepsize.
    pub constant: Vec<(usize, f64)>,
    /// `(t, deviation)` for `Π_k G_{γ_k}(S^(1))` with the stepsizes of a
    /// `t`-step schedule.
    pub varying: Vec<(usize, f64)>,
}

impl CompositionReport {
    pub fn max_deviation(&self) -> f64 {
        self.constant
            .iter()
            .chain(&self.varying)
            .map(|x| x.1)
            .fold(0.0, f64::max)
    }

    /// First degree whose deviation exceeds `tol`.
    pub fn check(&self, tol: f64) -> Result<(), OpcalcError> {
        for &(degree, deviation) in self.constant.iter().chain(&self.varying) {
            if deviation > tol {
                return Err(OpcalcError::Tolerance { degree, deviation });
            }
        }
        Ok(())
    }
}

/// Compares `G^t(S^(1))`, computed by repeatedly applying the GD map to the
/// materialized kernel, with the binomial expansion of
/// `(S^(0) − γS^(1))^{•2t} • S^(1)`, for `t = 0..=t_max`. The varying-stepsize
/// variant uses the schedule of a `t`-step run started at `γ`.
pub fn poly_composition_check(t_max: usize, gamma: f64, ctx: &PopulationContext) -> Result<CompositionReport, OpcalcError> {
    check_cap(ctx.dist().dim(), 6)?;
    if t_max > 10 {
        return Err(OpcalcError::Invalid(format!("t_max must be <= 10, got {t_max}")));
    }
    let s1 = OperatorPolynomial::monomial(1, 1.0);
    let mut constant = Vec::new();
    let mut lhs = monomial_operator(1, ctx);
    for t in 0..=t_max {
        if t > 0 {
            lhs = gd_map(&lhs, gamma, ctx)?;
        }
        let rhs = OperatorPolynomial::gd_factor(gamma).bullet_pow(2 * t).bullet(&s1).to_operator(ctx);
        constant.push((t, relative_deviation(lhs.kernel(), rhs.kernel())));
    }
    let mut varying = Vec::new();
    for t in 1..=t_max {
        let sched = StepsizeSchedule::new(gamma, t).map_err(|e| OpcalcError::Invalid(e.to_string()))?;
        let mut lhs = monomial_operator(1, ctx);
        let mut poly = s1.clone();
        for k in 1..=t {
            let g = sched.stepsize_at(k).expect("k within schedule");
            lhs = gd_map(&lhs, g, ctx)?;
            poly = poly.bullet(&OperatorPolynomial::gd_factor(g).bullet_pow(2));
        }
        varying.push((t, relative_deviation(lhs.kernel(), poly.to_operator(ctx).kernel())));
    }
    Ok(CompositionReport { constant, varying })
}

/// Risk numbers of the bias/variance decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasVarianceReport {
    /// Monte Carlo `⟨H, A_T∘H̃⟩` (mean excess risk of `Γ_T`).
    pub a_est: Estimate,
    /// `⟨H, B_T∘H̃⟩`.
    pub b_bound: f64,
    /// `⟨H, C_T∘H̃⟩`.
    pub c_bound: f64,
    /// Largest standard error in the `L` and `N` estimates.
    pub operator_stderr: f64,
}

impl BiasVarianceReport {
    /// `A ≤ 2B + 2C + k·SE`.
    pub fn decomposition_holds(&self, k: f64) -> bool {
        self.a_est.mean <= 2.0 * self.b_bound + 2.0 * self.c_bound + k * self.a_est.stderr
    }
}

/// Runs `B_t = S_t(B_{t−1})` from `B_0 = (Γ₀ − Γ*)^{⊗2}` and
/// `C_t = S_t(C_{t−1}) + γ_t² N` from `C_0 = 0`, with `S_t` assembled from the
/// exact `M` and Monte Carlo `L`, `N`; and estimates `A_T` from
/// `num_samples` independent SGD runs.
pub fn bias_variance_recursion(
    ctx: &PopulationContext,
    gamma0: f64,
    t_total: usize,
    gamma_init: &GammaMatrix,
    num_samples: usize,
    seed: u64,
) -> Result<BiasVarianceReport, OpcalcError> {
    let dist = ctx.dist();
    let n = ctx.context_len();
    check_cap(dist.dim(), 4)?;
    if t_total > 200 {
        return Err(OpcalcError::Invalid(format!("T must be <= 200, got {t_total}")));
    }
    if num_samples < 2 {
        return Err(OpcalcError::Invalid("need at least 2 samples".into()));
    }
    let d = dist.dim();
    if gamma_init.dim() != d {
        return Err(OpcalcError::Shape(format!("Γ₀ is {0}x{0}, expected {d}x{d}", gamma_init.dim())));
    }
    let h = dist.covariance();
    let ht = diag(&theory::tilde_h(ctx));
    let lambda0 = gamma_init.matrix() - theory::gamma_star(ctx).matrix();
    let mut b = MatrixOperator::sym_square(&lambda0);
    let mut c = MatrixOperator::zeros(d);
    let mut operator_stderr = 0.0;
    if t_total > 0 {
        let sched = StepsizeSchedule::new(gamma0, t_total).map_err(|e| OpcalcError::Invalid(e.to_string()))?;
        let mcal = mcal_exact(dist)?;
        let lcal = estimate_lcal(dist, n, num_samples, seed)?;
        let ncal = estimate_ncal(dist, n, num_samples, seed ^ 0x5bd1_e995)?;
        operator_stderr = lcal.max_stderr().max(ncal.op.max_stderr());
        for t in 1..=t_total {
            let g = sched.stepsize_at(t).expect("t within schedule");
            b = sgd_map(&b, g, ctx, &mcal, &lcal.mean)?;
            c = sgd_map(&c, g, ctx, &mcal, &lcal.mean)?.add(&ncal.op.mean.scale(g * g));
        }
    }
    let a_est = if t_total == 0 {
        Estimate {
            mean: MatrixOperator::sym_square(&lambda0).bilinear(&h, &ht),
            stderr: 0.0,
        }
    } else {
        let run_seed = |k: usize| RandomStream::derive(seed, domain::OPCHECK, k as u64).next_u64();
        par_estimate(num_samples, |k| {
            let cfg = PretrainConfig::new(dist.clone(), n, t_total, run_seed(k))
                .with_gamma0(gamma0)
                .with_gamma_init(gamma_init.clone());
            let run = pretrain::pretrain(&cfg).expect("bias/variance runs are small and stable");
            theory::excess_risk(&run.final_gamma, ctx).expect("shapes match")
        })
    };
    Ok(BiasVarianceReport {
        a_est,
        b_bound: b.bilinear(&h, &ht),
        c_bound: c.bilinear(&h, &ht),
        operator_stderr,
    })
}

/// `f(x) = Σ_{ℓ<L} (x/2^ℓ)(1 − (1 − x/2^ℓ)^K) Π_{ℓ<j<L} (1 − x/2^j)^K`.
pub fn f_scalar(x: f64, k_epoch: usize, l_epochs: usize) -> Result<f64, OpcalcError> {
    if !(x > 0.0 && x < 1.0) {
        return Err(OpcalcError::Invalid(format!("x must lie in (0, 1), got {x}")));
    }
    if k_epoch == 0 || l_epochs == 0 {
        return Err(OpcalcError::Invalid("K and L must be at least 1".into()));
    }
    let k = k_epoch as i32;
    let mut total = 0.0;
    for l in 0..l_epochs {
        let xl = x / 2f64.powi(l as i32);
        let mut term = xl * (1.0 - (1.0 - xl).powi(k));
        for j in l + 1..l_epochs {
            term *= (1.0 - x / 2f64.powi(j as i32)).powi(k);
        }
        total += term;
    }
    Ok(total)
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Random symmetric PSD matrix `B Bᵀ / d` with Gaussian `B`.
pub fn random_psd(d: usize, rng: &mut RandomStream) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| rng.normal());
    &b * b.transpose() / d as f64
}

fn random_matrix(d: usize, rng: &mut RandomStream) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.normal())
}

/// A PSD operator `Σ_k P_k^{⊗2} / m` from `m` random `P_k`.
pub fn random_psd_operator(d: usize, m: usize, rng: &mut RandomStream) -> MatrixOperator {
    let mut op = MatrixOperator::zeros(d);
    for _ in 0..m {
        op = op.add(&MatrixOperator::sym_square(&random_matrix(d, rng)));
    }
    op.scale(1.0 / m as f64)
}

/// Exact identities of the operator calculus, each at relative tolerance `tol`.
pub fn exact_identity_suite(ctx: &PopulationContext, seed: u64, tol: f64) -> Result<Vec<CheckResult>, OpcalcError> {
    let d = ctx.dist().dim();
    check_cap(d, 6)?;
    let mut rng = RandomStream::derive(seed, domain::OPCHECK, 1);
    let (h, ht) = spectra(ctx);
    let gamma = 1.0 / (2.0 * h.iter().sum::<f64>() * ht.iter().sum::<f64>());
    let mut out = Vec::new();

    let mut dev = 0.0f64;
    for _ in 0..20 {
        let (a, b, c, dd, x) = (
            random_matrix(d, &mut rng),
            random_matrix(d, &mut rng),
            random_matrix(d, &mut rng),
            random_matrix(d, &mut rng),
            random_matrix(d, &mut rng),
        );
        let applied = MatrixOperator::sandwich(&a, &b).apply(&x)?;
        dev = dev.max(relative_deviation(&applied, &(&a * &x * &b)));
        let composed = MatrixOperator::tensor(&dd.transpose(), &c).compose(&MatrixOperator::tensor(&b.transpose(), &a));
        let direct = MatrixOperator::tensor(&(dd.transpose() * b.transpose()), &(&c * &a));
        dev = dev.max(relative_deviation(composed.kernel(), direct.kernel()));
    }
    out.push(CheckResult::new("tensor_composition", dev, tol));

    let (hm, htm) = (diag(&h), diag(&ht));
    let mut dev = 0.0f64;
    for _ in 0..20 {
        let p = random_matrix(d, &mut rng);
        let a = random_matrix(d, &mut rng);
        let g = gd_map(&MatrixOperator::sym_square(&p), gamma, ctx)?;
        let q = &p - &hm * &p * &htm * gamma;
        dev = dev.max(relative_deviation(&g.apply(&a)?, &(&q * &a * q.transpose())));
    }
    let zero = gd_map(&MatrixOperator::zeros(d), gamma, ctx)?;
    dev = dev.max(zero.kernel().amax());
    let o = random_psd_operator(d, 3, &mut rng);
    dev = dev.max(relative_deviation(gd_map(&o, 0.0, ctx)?.kernel(), o.kernel()));
    out.push(CheckResult::new("gd_map_rank_one", dev, tol));

    let mut dev = 0.0f64;
    for i in 0..4 {
        for j in 0..4 {
            let prod = OperatorPolynomial::monomial(i, 1.0).to_diagonal(ctx).bullet(&OperatorPolynomial::monomial(j, 1.0).to_diagonal(ctx));
            for _ in 0..20 {
                let v = DVector::from_fn(d, |_, _| rng.normal());
                let lhs = prod.apply(&v);
                let rhs = monomial_apply(i + j, &DMatrix::from_diagonal(&v), ctx)?;
                let rhs_diag = DMatrix::from_column_slice(d, 1, rhs.diagonal().as_slice());
                dev = dev.max(relative_deviation(&DMatrix::from_column_slice(d, 1, lhs.as_slice()), &rhs_diag));
            }
        }
    }
    out.push(CheckResult::new("monomial_product", dev, tol));

    let rep = poly_composition_check(5, gamma, ctx)?;
    out.push(CheckResult::new("polynomial_composition", rep.max_deviation(), tol));

    let mut dev = 0.0f64;
    for _ in 0..20 {
        let o = MatrixOperator::new(d, DMatrix::from_fn(d * d, d * d, |_, _| rng.normal()))?;
        let lhs = diagonalize(&gd_map(&o, gamma, ctx)?);
        let rhs = diagonalize(&o).gd_map(gamma, ctx);
        dev = dev.max(relative_deviation(&lhs.kernel, &rhs.kernel));
    }
    out.push(CheckResult::new("diagonalization_commutes", dev, tol));

    // Order preservation and contraction on the diagonal cone; reported as the
    // most negative entry of the difference kernel, relative to its scale.
    let mut dev = 0.0f64;
    for _ in 0..20 {
        let o1 = random_psd_operator(d, 3, &mut rng);
        let o2 = o1.add(&random_psd_operator(d, 2, &mut rng));
        let (k1, k2) = (diagonalize(&o1), diagonalize(&o2));
        let diff = &k2.kernel - &k1.kernel;
        dev = dev.max(-diff.min() / k2.kernel.amax());
        let contracted = k1.gd_map(gamma, ctx);
        let diff = &k1.kernel - &contracted.kernel;
        dev = dev.max(-diff.min() / k1.kernel.amax());
    }
    out.push(CheckResult::new("diagonal_order_and_contraction", dev, tol));
    Ok(out)
}

/// Negative part of the smallest eigenvalue, and the allowed band
/// `k·‖SE‖_F + PSD_EIG_TOL`.
fn psd_violation(m: &DMatrix<f64>, se: Option<&DMatrix<f64>>, k: f64) -> (f64, f64) {
    let band = se.map(|s| k * s.norm()).unwrap_or(0.0) + PSD_EIG_TOL;
    (-min_sym_eigenvalue(m), band)
}

struct Worst {
    name: &'static str,
    excess: f64,
    deviation: f64,
    tolerance: f64,
}

impl Worst {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            excess: f64::NEG_INFINITY,
            deviation: f64::NEG_INFINITY,
            tolerance: 0.0,
        }
    }

    fn update(&mut self, (deviation, tolerance): (f64, f64)) {
        if deviation - tolerance > self.excess {
            self.excess = deviation - tolerance;
            self.deviation = deviation;
            self.tolerance = tolerance;
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult::new(self.name, self.deviation, self.tolerance)
    }
}

/// Monte Carlo moment checks and PSD dominations, using `num_samples` draws
/// and a `k_se`-standard-error band.
pub fn domination_suite(ctx: &PopulationContext, num_samples: usize, seed: u64, k_se: f64) -> Result<Vec<CheckResult>, OpcalcError> {
    let dist = ctx.dist();
    let d = dist.dim();
    check_cap(d, MAX_OPERATOR_DIM)?;
    let n = ctx.context_len();
    let (h, ht) = spectra(ctx);
    let (hm, htm) = (diag(&h), diag(&ht));
    let mut rng = RandomStream::derive(seed, domain::OPCHECK, 2);
    let mcal = mcal_exact(dist)?;
    let lcal = estimate_lcal(dist, n, num_samples, seed)?;
    let ncal = estimate_ncal(dist, n, num_samples, seed.wrapping_add(1))?;
    let noise = dist.prior_var() * dist.trace() + dist.noise_var();
    let gamma = 1.0 / (2.0 * h.iter().sum::<f64>() * ht.iter().sum::<f64>());
    let mut out = Vec::new();

    // Moment identities against Monte Carlo, entrywise in units of SE.
    let a = random_psd(d, &mut rng);
    let mut worst = 0.0f64;
    for (nn, exact) in [(1, mcal.clone()), (n, fourth_moment_xtx(dist, n)?)] {
        let (mc, se) = estimate_xtx_apply(dist, nn, &a, num_samples, seed.wrapping_add(2 + nn as u64));
        let target = exact.apply(&a)?;
        for ((m, s), t) in mc.iter().zip(se.iter()).zip(target.iter()) {
            worst = worst.max((m - t).abs() / s.max(f64::MIN_POSITIVE));
        }
    }
    out.push(CheckResult::new("fourth_moment_monte_carlo_se", worst, 3.0));
    out.push(CheckResult::new(
        "xi_zero_mean_se",
        ncal.xi_mean.norm() / ncal.xi_stderr.norm(),
        k_se,
    ));

    let mut d2 = Worst::new("mcal_upper_3_tr");
    let mut d8m = Worst::new("mcal_lower_h_h");
    let mut d4 = Worst::new("lcal_upper");
    let mut d8 = Worst::new("lcal_lower_htilde");
    let mut d6 = Worst::new("ncal_upper");
    for _ in 0..50 {
        let a = random_psd(d, &mut rng);
        let ma = mcal.apply(&a)?;
        let tr_ha: f64 = (0..d).map(|i| h[i] * a[(i, i)]).sum();
        let tr_hta: f64 = (0..d).map(|i| ht[i] * a[(i, i)]).sum();
        d2.update(psd_violation(&(&hm * (3.0 * tr_ha) - &ma), None, k_se));
        d8m.update(psd_violation(&(&ma - &hm * &a * &hm), None, k_se));
        let (la, la_se) = lcal.apply_with_se(&a)?;
        d4.update(psd_violation(&(&htm * (8.0 * 3f64.powi(6) * tr_hta) - &la), Some(&la_se), k_se));
        d8.update(psd_violation(&(&la - &htm * &a * &htm), Some(&la_se), k_se));
        let (na, na_se) = ncal.op.apply_with_se(&a)?;
        let c6 = (16.0 * 3f64.powi(7) + 18.0) * noise * tr_hta;
        d6.update(psd_violation(&(&hm * c6 - &na), Some(&na_se), k_se));
    }
    out.extend([d2.finish(), d8m.finish(), d4.finish(), d8.finish(), d6.finish()]);

    let mut lower = Worst::new("sandwich_lower");
    let mut upper = Worst::new("sandwich_upper");
    let mut s_vs_g = Worst::new("sgd_map_dominates_gd_map");
    let mut preserve = Worst::new("gd_map_preserves_psd");
    let s1 = monomial_operator(1, ctx);
    let hsq = MatrixOperator::sym_square(&hm);
    let htsq = MatrixOperator::sym_square(&htm);
    for _ in 0..20 {
        let o = random_psd_operator(d, 3, &mut rng);
        let mo = mcal.compose(&o);
        let scale_up = 8.0 * 3f64.powi(7) * o.bilinear(&hm, &htm);
        let g = gd_map(&o, gamma, ctx)?;
        let s = sgd_map(&o, gamma, ctx, &mcal, &lcal.mean)?;
        for _ in 0..5 {
            let a = random_psd(d, &mut rng);
            let (la, la_se) = lcal.apply_with_se(&a)?;
            let mola = mo.apply(&la)?;
            let se = unvec(&(mo.kernel().abs() * vec_of(&la_se)), d);
            let inner = hsq.compose(&o).compose(&htsq).apply(&a)?;
            lower.update(psd_violation(&(&mola - &inner), Some(&se), k_se));
            let top = s1.apply(&a)? * scale_up;
            upper.update(psd_violation(&(&top - &mola), Some(&se), k_se));
            let diff = s.sub(&g).apply(&a)?;
            s_vs_g.update(psd_violation(&diff, Some(&(&se * (gamma * gamma))), k_se));
            preserve.update(psd_violation(&g.apply(&a)?, None, k_se));
        }
    }
    out.extend([lower.finish(), upper.finish(), s_vs_g.finish(), preserve.finish()]);
    Ok(out)
}
