//! Closed forms against independent routes: dense Isserlis moments in the
//! original coordinates, explicit posterior means, pseudo-inverses, and
//! values frozen from a separate dense-matrix computation.

use icl_lab::opcalc::{self, MatrixOperator};
use icl_lab::predictors::{ols_coefficients, predict_bayes_ridge};
use icl_lab::pretrain::StepsizeSchedule;
use icl_lab::rng::{domain, RandomStream};
use icl_lab::taskgen::sample_episode;
use icl_lab::theory::{self, PreconditionMode};
use icl_lab::{GammaMatrix, LabelModel, PopulationContext, TaskDistribution};
use nalgebra::{DMatrix, DVector};

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-300)
}

fn assert_close(what: &str, a: f64, b: f64, rel: f64) {
    assert!(close(a, b, rel), "{what}: {a} vs {b}");
}

/// `E[ggᵀ]` for `g = Xᵀy/N`, from Isserlis in whatever coordinates `h` is in.
fn dense_second_moment(h: &DMatrix<f64>, psi2: f64, sigma2: f64, n: usize) -> DMatrix<f64> {
    let nf = n as f64;
    let hh = h * h;
    (hh.clone() * (2.0 * psi2) + h * (psi2 * h.trace() + sigma2)) / nf + hh * (psi2 * (nf - 1.0) / nf)
}

fn dense_risk(g: &DMatrix<f64>, h: &DMatrix<f64>, psi2: f64, sigma2: f64, n: usize) -> f64 {
    let s = dense_second_moment(h, psi2, sigma2, n);
    (h * g * s * g.transpose()).trace() - 2.0 * psi2 * (h * g * h).trace() + psi2 * h.trace() + sigma2
}

fn random_spd(d: usize, rng: &mut RandomStream) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.05
}

fn small_population() -> TaskDistribution {
    TaskDistribution::new(1.0, 0.5, vec![1.0, 0.5, 0.25]).unwrap()
}

#[test]
fn frozen_values_for_a_three_dimensional_population() {
    let dist = small_population();
    let ctx = PopulationContext::new(&dist, 3).unwrap();
    let lt = theory::tilde_h(&ctx);
    let gs = theory::gamma_star_diag(&ctx);
    for (got, want) in lt.iter().zip([2.0833333333333335, 0.7083333333333333, 0.2708333333333333]) {
        assert_close("tilde_h", *got, want, 1e-13);
    }
    for (got, want) in gs.iter().zip([0.48, 0.7058823529411765, 0.9230769230769231]) {
        assert_close("gamma_star", *got, want, 1e-13);
    }
    assert_close("min_risk", theory::min_risk(&ctx), 1.5358371040723982, 1e-13);
    assert_close("risk at zero", theory::risk(&GammaMatrix::zeros(3), &ctx).unwrap(), 2.25, 1e-13);
    assert_close(
        "practical stepsize",
        theory::max_stepsize(&ctx, PreconditionMode::Practical),
        0.0932944606413994,
        1e-13,
    );
    assert_close(
        "risk at M=1 of the N=3 optimum",
        theory::avg_risk_attention_exact(3, 1, &dist).unwrap(),
        2.352168202944248,
        1e-13,
    );
}

#[test]
fn frozen_pretraining_bound() {
    let dist = small_population();
    let ctx = PopulationContext::new(&dist, 3).unwrap();
    let b = theory::pretrain_bound(&ctx, 1000, 0.1, &GammaMatrix::zeros(3), PreconditionMode::Practical).unwrap();
    assert_close("t_eff", b.t_eff, 100.34333188799373, 1e-13);
    assert_close("d_eff", b.d_eff, 8.461595198293974, 1e-12);
    assert_close("bias", b.bias_term, 0.0027767259080326277, 1e-9);
    assert_close("variance", b.variance_term, 0.18973447301324312, 1e-12);
    assert!(!b.precondition_met);
}

#[test]
fn frozen_schedule_shape() {
    let s = StepsizeSchedule::new(0.1, 1000).unwrap();
    assert_eq!((s.num_epochs(), s.epoch_len()), (9, 112));
    let epochs = s.epochs();
    assert_eq!(epochs.len(), 9);
    assert_eq!(epochs.iter().map(|e| e.1).sum::<usize>(), 1000);
    assert_eq!(epochs[8].1, 1000 - 8 * 112);
    assert_close("last stepsize", s.stepsize_at(1000).unwrap(), 0.1 / 256.0, 1e-15);
}

#[test]
fn risk_matches_dense_route_in_a_rotated_basis() {
    let mut rng = RandomStream::derive(41, domain::MISC, 0);
    for case in 0..20 {
        let d = 2 + case % 5;
        let n = 1 + case % 7;
        let (psi2, sigma2) = (0.5 + rng.uniform(0.0, 1.5), rng.uniform(0.0, 2.0));
        let h = random_spd(d, &mut rng);
        let dist = TaskDistribution::from_covariance(psi2, sigma2, &h).unwrap();
        let ctx = PopulationContext::new(&dist, n).unwrap();
        let g_eig = DMatrix::from_fn(d, d, |_, _| rng.normal() * 0.5);
        let got = theory::risk(&GammaMatrix::new(g_eig.clone()).unwrap(), &ctx).unwrap();
        let want = dense_risk(&dist.to_original(&g_eig), &h, psi2, sigma2, n);
        assert_close("risk", got, want, 1e-9);
    }
}

#[test]
fn gamma_star_solves_the_normal_equations() {
    // ∇ risk = 2(HΓS − ψ²H²) = 0 gives Γ* = ψ² H S⁻¹
    let mut rng = RandomStream::derive(42, domain::MISC, 0);
    for case in 0..20 {
        let d = 2 + case % 5;
        let n = 1 + case % 9;
        let (psi2, sigma2) = (0.5 + rng.uniform(0.0, 1.5), rng.uniform(0.0, 2.0));
        let h = random_spd(d, &mut rng);
        let dist = TaskDistribution::from_covariance(psi2, sigma2, &h).unwrap();
        let ctx = PopulationContext::new(&dist, n).unwrap();
        let s = dense_second_moment(&h, psi2, sigma2, n);
        let want = &h * s.try_inverse().unwrap() * psi2;
        let got = dist.to_original(theory::gamma_star(&ctx).matrix());
        assert!((&got - &want).amax() <= 1e-9 * want.amax(), "case {case}: {got} vs {want}");
        assert_close("min risk", theory::min_risk(&ctx), dense_risk(&want, &h, psi2, sigma2, n), 1e-10);
    }
}

#[test]
fn tilde_h_is_the_dense_second_moment_over_the_prior_scale() {
    let mut rng = RandomStream::derive(43, domain::MISC, 0);
    let h = random_spd(4, &mut rng);
    let dist = TaskDistribution::from_covariance(1.0, 0.7, &h).unwrap();
    let ctx = PopulationContext::new(&dist, 6).unwrap();
    let lt = DMatrix::from_diagonal(&DVector::from_vec(theory::tilde_h(&ctx)));
    let want = dense_second_moment(&h, 1.0, 0.7, 6);
    assert!((dist.to_original(&lt) - &want).amax() < 1e-12);
}

#[test]
fn fourth_moment_operator_on_rank_one_inputs() {
    // E[(xᵀv)² xxᵀ] = (vᵀHv) H + 2 Hv vᵀH
    let mut rng = RandomStream::derive(44, domain::MISC, 0);
    let dist = TaskDistribution::new(1.0, 1.0, vec![2.0, 1.0, 0.3, 0.1]).unwrap();
    let h = dist.covariance();
    let m = opcalc::mcal_exact(&dist).unwrap();
    for _ in 0..10 {
        let v = DVector::from_fn(4, |_, _| rng.normal());
        let got = m.apply(&(&v * v.transpose())).unwrap();
        let hv = &h * &v;
        let want = &h * (v.dot(&hv)) + &hv * hv.transpose() * 2.0;
        assert!((&got - &want).amax() < 1e-12 * want.amax());
    }
}

#[test]
fn gd_map_of_identity_is_one_gradient_step_sandwich() {
    // with D = HH̃, the identity maps to X ↦ (I − γD) X (I − γD)
    let dist = TaskDistribution::new(1.0, 0.3, vec![1.0, 0.4, 0.2]).unwrap();
    let ctx = PopulationContext::new(&dist, 5).unwrap();
    let lt = theory::tilde_h(&ctx);
    let gamma = 0.07;
    let step = DMatrix::from_diagonal(&DVector::from_fn(3, |i, _| 1.0 - gamma * dist.spectrum()[i] * lt[i]));
    let want = MatrixOperator::sandwich(&step, &step);
    let got = opcalc::gd_map(&MatrixOperator::identity(3), gamma, &ctx).unwrap();
    assert!((got.kernel() - want.kernel()).amax() < 1e-14);
}

#[test]
fn bayes_ridge_matches_explicit_posterior_mean() {
    let dist = TaskDistribution::new(0.8, 0.6, vec![1.0, 0.5, 0.2, 0.1, 0.05]).unwrap();
    for k in 0..30u64 {
        let n = 1 + (k % 9) as usize;
        let ep = sample_episode(&dist, n, LabelModel::Gaussian, &mut RandomStream::derive(45, domain::EVAL, k));
        let x = ep.contexts_x();
        // posterior precision XᵀX/σ² + I/ψ²
        let prec = x.transpose() * x / 0.6 + DMatrix::identity(5, 5) / 0.8;
        let mean = prec.cholesky().unwrap().solve(&(x.transpose() * ep.contexts_y() / 0.6));
        let want = mean.dot(ep.query_x());
        assert_close("posterior mean", predict_bayes_ridge(&ep, &dist).unwrap(), want, 1e-10);
    }
}

#[test]
fn ols_matches_pseudo_inverse() {
    let dist = TaskDistribution::new(1.0, 0.5, vec![1.0, 0.5, 0.25, 0.125]).unwrap();
    for k in 0..30u64 {
        let n = 1 + (k % 8) as usize;
        let ep = sample_episode(&dist, n, LabelModel::Gaussian, &mut RandomStream::derive(46, domain::EVAL, k));
        let pinv = ep.contexts_x().clone().pseudo_inverse(1e-12).unwrap();
        let want = pinv * ep.contexts_y();
        let got = ols_coefficients(&ep);
        assert!((&got - &want).amax() < 1e-9 * want.amax().max(1.0), "n={n}: {got} vs {want}");
    }
}
