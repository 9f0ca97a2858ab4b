//! In-context estimators: the one-step-GD attention model, the explicit
//! attention-block forward pass, ridge regression and OLS.

use nalgebra::{DMatrix, DVector, SVD};
use thiserror::Error;

use crate::taskgen::{Episode, TaskDistribution};

/// Relative residual accepted from the Cholesky solve before falling back to
/// the pseudo-inverse.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },
    #[error("rank-deficient system: {0}")]
    Rank(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Attention parameter `Γ` (the matrix stepsize of one-step GD).
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix(DMatrix<f64>);

impl GammaMatrix {
    pub fn new(gamma: DMatrix<f64>) -> Result<Self, PredictError> {
        if !gamma.is_square() {
            return Err(PredictError::Shape {
                expected: "square matrix".into(),
                found: format!("{}x{}", gamma.nrows(), gamma.ncols()),
            });
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(PredictError::Invalid("non-finite entry in Γ".into()));
        }
        Ok(Self(gamma))
    }

    pub fn zeros(d: usize) -> Self {
        Self(DMatrix::zeros(d, d))
    }

    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Whether all off-diagonal entries vanish (commutes with diagonal `H`).
    pub fn is_diagonal(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| i == j || self.0[(i, j)] == 0.0))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal().iter().copied().collect()
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }
}

fn check_dim(expected: usize, ep: &Episode) -> Result<(), PredictError> {
    if ep.dim() != expected {
        return Err(PredictError::Shape {
            expected: format!("episode dimension {expected}"),
            found: format!("{}", ep.dim()),
        });
    }
    Ok(())
}

/// `⟨Γ Xᵀy/n, x⟩`, with 0 for an empty context.
pub fn predict_attention(params: &GammaMatrix, ep: &Episode) -> Result<f64, PredictError> {
    check_dim(params.dim(), ep)?;
    if ep.is_empty() {
        return Ok(0.0);
    }
    let u = ep.moment_vector();
    Ok(ep.query_x().dot(&(params.matrix() * u)))
}

/// Attention-block parameters. `V` has bottom row `(0, …, 0, v)` and `QᵀK`
/// has top-left block `W` and bottom-left block `0`; the remaining blocks are
/// free and do not affect the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlocks {
    v: f64,
    w: DMatrix<f64>,
    value: DMatrix<f64>,
    key_query: DMatrix<f64>,
}

impl AttentionBlocks {
    /// Free blocks set to zero.
    pub fn new(v: f64, w: DMatrix<f64>) -> Result<Self, PredictError> {
        let d = w.nrows();
        Self::with_free_blocks(v, w, DMatrix::zeros(d, d + 1), DVector::zeros(d + 1))
    }

    /// `value_top` fills the first `d` rows of `V`; `kq_last_col` fills the last
    /// column of `QᵀK`.
    pub fn with_free_blocks(
        v: f64,
        w: DMatrix<f64>,
        value_top: DMatrix<f64>,
        kq_last_col: DVector<f64>,
    ) -> Result<Self, PredictError> {
        if !w.is_square() {
            return Err(PredictError::Shape {
                expected: "square W".into(),
                found: format!("{}x{}", w.nrows(), w.ncols()),
            });
        }
        let d = w.nrows();
        if value_top.shape() != (d, d + 1) || kq_last_col.len() != d + 1 {
            return Err(PredictError::Shape {
                expected: format!("free blocks {d}x{} and {}", d + 1, d + 1),
                found: format!(
                    "{}x{} and {}",
                    value_top.nrows(),
                    value_top.ncols(),
                    kq_last_col.len()
                ),
            });
        }
        let finite = v.is_finite()
            && w.iter().all(|x| x.is_finite())
            && value_top.iter().all(|x| x.is_finite())
            && kq_last_col.iter().all(|x| x.is_finite());
        if !finite {
            return Err(PredictError::Invalid("non-finite attention parameter".into()));
        }
        let mut value = DMatrix::zeros(d + 1, d + 1);
        value.rows_mut(0, d).copy_from(&value_top);
        value[(d, d)] = v;
        let mut key_query = DMatrix::zeros(d + 1, d + 1);
        key_query.view_mut((0, 0), (d, d)).copy_from(&w);
        key_query.column_mut(d).copy_from(&kq_last_col);
        Ok(Self {
            v,
            w,
            value,
            key_query,
        })
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn value(&self) -> &DMatrix<f64> {
        &self.value
    }

    pub fn key_query(&self) -> &DMatrix<f64> {
        &self.key_query
    }

    /// The equivalent one-step-GD parameter `v Wᵀ`.
    pub fn to_gamma(&self) -> GammaMatrix {
        GammaMatrix(self.w.transpose() * self.v)
    }
}

/// Residual single-layer linear attention on the prompt
/// `Z = [[Xᵀ, x], [yᵀ, 0]]`; returns the bottom-right entry of
/// `Z + V Z Zᵀ (QᵀK) Z / n`.
pub fn forward_blocks(blocks: &AttentionBlocks, ep: &Episode) -> Result<f64, PredictError> {
    let d = blocks.w.nrows();
    check_dim(d, ep)?;
    let n = ep.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut z = DMatrix::zeros(d + 1, n + 1);
    z.view_mut((0, 0), (d, n)).copy_from(&ep.contexts_x().transpose());
    z.view_mut((d, 0), (1, n)).copy_from(&ep.contexts_y().transpose());
    z.view_mut((0, n), (d, 1)).copy_from(ep.query_x());
    let attn = &blocks.value * &z * z.transpose() * &blocks.key_query * &z / n as f64;
    Ok(z[(d, n)] + attn[(d, n)])
}

fn solve_spd_checked(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.clone().cholesky()?;
    let sol = chol.solve(b);
    let resid = (a * &sol - b).norm();
    let scale = b.norm().max(f64::MIN_POSITIVE);
    if resid <= SOLVE_RESIDUAL_TOL * scale && sol.iter().all(|v| v.is_finite()) {
        Some(sol)
    } else {
        None
    }
}

fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, usize) {
    let svd = SVD::new(a.clone(), true, true);
    let smax = svd.singular_values.max();
    let eps = a.nrows().max(a.ncols()) as f64 * smax * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let sol = svd.solve(b, eps).expect("both singular vector sets computed");
    (sol, rank)
}

/// Ridge coefficients `(XᵀX + λ I)⁻¹ Xᵀy`.
pub fn ridge_coefficients(ep: &Episode, reg: f64) -> Result<DVector<f64>, PredictError> {
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(PredictError::Invalid(format!("ridge regularizer must be >= 0, got {reg}")));
    }
    let d = ep.dim();
    let x = ep.contexts_x();
    if reg == 0.0 {
        let rank = if ep.len() < d { ep.len() } else { pinv_solve(x, ep.contexts_y()).1 };
        if rank < d {
            return Err(PredictError::Rank(format!(
                "X has rank {rank} < {d} and no regularization"
            )));
        }
    }
    let mut gram = x.tr_mul(x);
    for i in 0..d {
        gram[(i, i)] += reg;
    }
    let rhs = x.tr_mul(ep.contexts_y());
    if let Some(sol) = solve_spd_checked(&gram, &rhs) {
        return Ok(sol);
    }
    Ok(pinv_solve(&gram, &rhs).0)
}

/// `⟨(XᵀX + λ I)⁻¹ Xᵀy, x⟩`.
pub fn predict_ridge(ep: &Episode, reg: f64) -> Result<f64, PredictError> {
    Ok(ridge_coefficients(ep, reg)?.dot(ep.query_x()))
}

/// Bayes-optimal regularizer `σ²/ψ²`.
pub fn bayes_ridge_reg(dist: &TaskDistribution) -> f64 {
    dist.noise_var() / dist.prior_var()
}

/// Posterior-mean prediction under the Gaussian model. With `σ² = 0` the
/// posterior mean is the `λ → 0⁺` limit of ridge, i.e. the minimum-norm
/// interpolant, so OLS is used.
pub fn predict_bayes_ridge(ep: &Episode, dist: &TaskDistribution) -> Result<f64, PredictError> {
    check_dim(dist.dim(), ep)?;
    let reg = bayes_ridge_reg(dist);
    if reg == 0.0 {
        predict_ols(ep)
    } else {
        predict_ridge(ep, reg)
    }
}

/// Minimum-norm least squares coefficients `X⁺ y`.
pub fn ols_coefficients(ep: &Episode) -> DVector<f64> {
    if ep.is_empty() {
        return DVector::zeros(ep.dim());
    }
    pinv_solve(ep.contexts_x(), ep.contexts_y()).0
}

/// Minimum-norm least squares prediction.
pub fn predict_ols(ep: &Episode) -> Result<f64, PredictError> {
    Ok(ols_coefficients(ep).dot(ep.query_x()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, RandomStream};
    use crate::stats::Accumulator;
    use crate::taskgen::{sample_episode, LabelModel};

    fn scalar_episode() -> Episode {
        Episode::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 2.0),
            DVector::from_element(1, 3.0),
            0.0,
        )
        .unwrap()
    }

    fn random_matrix(d: usize, rng: &mut RandomStream) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |_, _| rng.normal())
    }

    fn episode(d: usize, n: usize, seed: u64) -> Episode {
        let spec: Vec<f64> = (0..d).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let dist = TaskDistribution::new(1.0, 0.5, spec).unwrap();
        sample_episode(&dist, n, LabelModel::Gaussian, &mut RandomStream::from_seed(seed))
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn scalar_attention() {
        let ep = scalar_episode();
        assert_eq!(predict_attention(&GammaMatrix::identity(1), &ep).unwrap(), 6.0);
        assert_eq!(predict_attention(&GammaMatrix::zeros(1), &ep).unwrap(), 0.0);
    }

    #[test]
    fn scalar_blocks() {
        let ep = scalar_episode();
        let b = AttentionBlocks::new(1.0, DMatrix::identity(1, 1)).unwrap();
        assert_eq!(forward_blocks(&b, &ep).unwrap(), 6.0);
        let b0 = AttentionBlocks::new(0.0, DMatrix::identity(1, 1)).unwrap();
        assert_eq!(forward_blocks(&b0, &ep).unwrap(), 0.0);
    }

    #[test]
    fn attention_shape_error() {
        let ep = episode(3, 4, 1);
        assert!(matches!(
            predict_attention(&GammaMatrix::zeros(2), &ep),
            Err(PredictError::Shape { .. })
        ));
    }

    #[test]
    fn empty_context_predicts_zero() {
        let ep = episode(3, 0, 1);
        assert_eq!(predict_attention(&GammaMatrix::identity(3), &ep).unwrap(), 0.0);
    }

    #[test]
    fn blocks_match_attention_with_free_blocks() {
        let mut rng = RandomStream::from_seed(77);
        for k in 0..50 {
            let d = 5;
            let ep = episode(d, 7, 100 + k);
            let w = random_matrix(d, &mut rng);
            let v = rng.normal();
            let top = DMatrix::from_fn(d, d + 1, |_, _| rng.normal());
            let col = DVector::from_fn(d + 1, |_, _| rng.normal());
            let blocks = AttentionBlocks::with_free_blocks(v, w, top, col).unwrap();
            let a = forward_blocks(&blocks, &ep).unwrap();
            let b = predict_attention(&blocks.to_gamma(), &ep).unwrap();
            assert!(rel_close(a, b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn attention_linear_in_gamma() {
        let mut rng = RandomStream::from_seed(5);
        let ep = episode(4, 6, 9);
        let g1 = random_matrix(4, &mut rng);
        let g2 = random_matrix(4, &mut rng);
        let a = 2.5;
        let lhs = predict_attention(&GammaMatrix::new(&g1 * a + &g2).unwrap(), &ep).unwrap();
        let rhs = a * predict_attention(&GammaMatrix::new(g1).unwrap(), &ep).unwrap()
            + predict_attention(&GammaMatrix::new(g2).unwrap(), &ep).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn huge_regularizer_shrinks_to_zero() {
        let ep = episode(3, 10, 4);
        assert!(predict_ridge(&ep, 1e12).unwrap().abs() < 1e-6);
    }

    #[test]
    fn ridge_zero_equals_ols() {
        let ep = episode(3, 10, 4);
        let r = predict_ridge(&ep, 0.0).unwrap();
        let o = predict_ols(&ep).unwrap();
        assert!((r - o).abs() < 1e-10 * r.abs().max(1.0));
    }

    #[test]
    fn ridge_zero_rank_deficient() {
        let ep = episode(4, 2, 4);
        assert!(matches!(predict_ridge(&ep, 0.0), Err(PredictError::Rank(_))));
        assert!(predict_ridge(&ep, 0.1).is_ok());
    }

    #[test]
    fn ols_interpolates_noiseless() {
        let dist = TaskDistribution::new(1.0, 0.0, vec![1.0, 0.7, 0.2]).unwrap();
        let ep = sample_episode(&dist, 6, LabelModel::Gaussian, &mut RandomStream::from_seed(2));
        let truth = ep.task_beta().unwrap().dot(ep.query_x());
        assert!((predict_ols(&ep).unwrap() - truth).abs() < 1e-8);
        assert!((predict_bayes_ridge(&ep, &dist).unwrap() - truth).abs() < 1e-8);
    }

    #[test]
    fn ols_min_norm_underdetermined() {
        // d=3, n=2: the interpolants form the line b0 + t·k with k spanning the
        // null space of X; minimize the norm along that line directly.
        let ep = episode(3, 2, 12);
        let x = ep.contexts_x();
        let y = ep.contexts_y();
        let r0 = x.row(0);
        let r1 = x.row(1);
        let k = DVector::from_vec(vec![
            r0[1] * r1[2] - r0[2] * r1[1],
            r0[2] * r1[0] - r0[0] * r1[2],
            r0[0] * r1[1] - r0[1] * r1[0],
        ]);
        let a = DMatrix::from_row_slice(2, 2, &[r0[0], r0[1], r1[0], r1[1]]);
        let p = a.lu().solve(&DVector::from_vec(vec![y[0], y[1]])).unwrap();
        let b0 = DVector::from_vec(vec![p[0], p[1], 0.0]);
        let t_star = -b0.dot(&k) / k.dot(&k);
        let best = &b0 + &k * t_star;
        for t in [-1e-3, 1e-3] {
            assert!((&b0 + &k * (t_star + t)).norm() > best.norm());
        }
        assert!((x * &best - y).amax() < 1e-10);
        let brute = best.dot(ep.query_x());
        let ols = predict_ols(&ep).unwrap();
        assert!((brute - ols).abs() < 1e-8, "{brute} vs {ols}");
    }

    #[test]
    fn bayes_ridge_beats_overshrunk_ridge() {
        let dist = TaskDistribution::new(1.0, 1.0, vec![1.0, 0.5]).unwrap();
        let reg = bayes_ridge_reg(&dist);
        let acc: Accumulator = (0..100_000u64)
            .map(|i| {
                let mut rng = RandomStream::derive(3, domain::EVAL, i);
                let ep = sample_episode(&dist, 4, LabelModel::Gaussian, &mut rng);
                let a = (predict_ridge(&ep, reg).unwrap() - ep.label()).powi(2);
                let b = (predict_ridge(&ep, 10.0 * reg).unwrap() - ep.label()).powi(2);
                a - b
            })
            .collect();
        let est = acc.estimate();
        assert!(est.mean <= -2.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn ridge_shrinkage_monotone_in_one_dimension() {
        let ep = episode(1, 5, 8);
        let mut prev = f64::INFINITY;
        for k in 0..40 {
            let reg = 1e-3 * 1.5f64.powi(k);
            let y = predict_ridge(&ep, reg).unwrap().abs();
            assert!(y <= prev + 1e-15);
            prev = y;
        }
    }
}
