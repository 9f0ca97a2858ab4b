use icl_lab::harness::{ExperimentConfig, ExperimentKind, Preset};
use icl_lab::opcalc::{self, MatrixOperator, OperatorPolynomial};
use icl_lab::pretrain::{sgd_step, StepsizeSchedule};
use icl_lab::rng::{domain, RandomStream};
use icl_lab::stats::Accumulator;
use icl_lab::taskgen::sample_episode;
use icl_lab::theory;
use icl_lab::{GammaMatrix, LabelModel, PopulationContext, SpectrumSpec, TaskDistribution};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn spectrum(max_d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..3.0, 1..=max_d)
}

fn population(max_d: usize) -> impl Strategy<Value = (TaskDistribution, usize)> {
    (spectrum(max_d), 0.1f64..2.0, 0.0f64..2.0, 1usize..30)
        .prop_map(|(s, psi2, sigma2, n)| (TaskDistribution::new(psi2, sigma2, s).unwrap(), n))
}

fn spectrum_spec() -> impl Strategy<Value = SpectrumSpec> {
    prop_oneof![
        (1usize..50).prop_map(SpectrumSpec::uniform),
        (1usize..50, 1e-9f64..1e-3).prop_map(|(s, floor)| SpectrumSpec::Uniform { s, floor }),
        (1.01f64..4.0).prop_map(SpectrumSpec::polynomial),
        Just(SpectrumSpec::Exponential),
        prop::collection::vec(0.01f64..5.0, 1..6).prop_map(SpectrumSpec::Explicit),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn risk_never_drops_below_the_minimum((dist, n) in population(6), seed in any::<u64>()) {
        let ctx = PopulationContext::new(&dist, n).unwrap();
        let d = dist.dim();
        let mut rng = RandomStream::from_seed(seed);
        let g = GammaMatrix::new(DMatrix::from_fn(d, d, |_, _| rng.normal())).unwrap();
        let min = theory::min_risk(&ctx);
        prop_assert!(theory::risk(&g, &ctx).unwrap() >= min - 1e-12 * min);
        prop_assert!(theory::excess_risk(&theory::gamma_star(&ctx), &ctx).unwrap().abs() < 1e-12);
        prop_assert!(min >= dist.noise_var());
    }

    #[test]
    fn gamma_star_is_positive_and_below_inverse_spectrum((dist, n) in population(8)) {
        let ctx = PopulationContext::new(&dist, n).unwrap();
        for (g, l) in theory::gamma_star_diag(&ctx).iter().zip(dist.spectrum()) {
            prop_assert!(*g > 0.0);
            prop_assert!(*g < n as f64 / ((n + 1) as f64 * l));
        }
    }

    #[test]
    fn longer_contexts_lower_the_minimum_risk((dist, n) in population(6)) {
        let a = theory::min_risk(&PopulationContext::new(&dist, n).unwrap());
        let b = theory::min_risk(&PopulationContext::new(&dist, n + 1).unwrap());
        prop_assert!(b <= a * (1.0 + 1e-12));
    }

    #[test]
    fn schedule_covers_every_step_once(t in 1usize..200_000, gamma0 in 0.0f64..5.0) {
        let s = StepsizeSchedule::new(gamma0, t).unwrap();
        let epochs = s.epochs();
        prop_assert_eq!(epochs.iter().map(|e| e.1).sum::<usize>(), t);
        prop_assert!(epochs.len() <= s.num_epochs());
        prop_assert!(s.epoch_len() * s.num_epochs() >= t);
        prop_assert_eq!(s.stepsize_at(1).unwrap(), gamma0);
        let last = s.stepsize_at(t).unwrap();
        prop_assert_eq!(last, epochs.last().unwrap().0);
        prop_assert!(s.stepsize_at(t.div_ceil(2).max(1)).unwrap() >= last);
    }

    #[test]
    fn accumulator_merge_matches_sequential(xs in prop::collection::vec(-1e3f64..1e3, 2..200), cut in 0usize..200) {
        let cut = cut.min(xs.len());
        let whole: Accumulator = xs.iter().copied().collect();
        let mut left: Accumulator = xs[..cut].iter().copied().collect();
        let right: Accumulator = xs[cut..].iter().copied().collect();
        left.merge(&right);
        prop_assert_eq!(left.count(), whole.count());
        prop_assert!((left.mean() - whole.mean()).abs() <= 1e-9 * (1.0 + whole.mean().abs()));
        prop_assert!((left.variance() - whole.variance()).abs() <= 1e-8 * (1.0 + whole.variance()));
    }

    #[test]
    fn spectrum_text_round_trips(spec in spectrum_spec()) {
        let back: SpectrumSpec = spec.to_string().parse().unwrap();
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn config_text_round_trips(
        kind in prop::sample::select(ExperimentKind::ALL.to_vec()),
        spec in spectrum_spec(),
        dim in 1usize..50,
        n in 1usize..100,
        seeds in prop::collection::btree_set(0u64..1000, 1..5),
        gamma0 in prop::option::of(1e-6f64..1.0),
        noise in 0.0f64..3.0,
    ) {
        let mut cfg = ExperimentConfig::preset(kind, Preset::Desk);
        cfg.spectrum = spec;
        if kind != ExperimentKind::Opcheck {
            cfg.dim = dim;
            cfg.dims = vec![dim];
        }
        cfg.context_len = n;
        cfg.seeds = seeds.into_iter().collect();
        cfg.gamma0 = gamma0;
        cfg.noise_var = noise;
        let back = ExperimentConfig::parse(&cfg.emit());
        if cfg.validate().is_ok() {
            prop_assert_eq!(back.unwrap(), cfg);
        } else {
            prop_assert!(back.is_err());
        }
    }

    #[test]
    fn zero_stepsize_leaves_gamma_unchanged((dist, n) in population(5), seed in any::<u64>()) {
        let d = dist.dim();
        let mut rng = RandomStream::derive(seed, domain::MISC, 0);
        let g = GammaMatrix::new(DMatrix::from_fn(d, d, |_, _| rng.normal())).unwrap();
        let ep = sample_episode(&dist, n, LabelModel::Gaussian, &mut rng);
        prop_assert_eq!(sgd_step(&g, &ep, 0.0).unwrap(), g);
    }

    #[test]
    fn gd_map_of_rank_one_has_rank_at_most_four((dist, n) in population(4), gamma in 0.0f64..0.5, seed in any::<u64>()) {
        // each of the four terms of G keeps rank one
        let ctx = PopulationContext::new(&dist, n).unwrap();
        let d = dist.dim();
        let mut rng = RandomStream::from_seed(seed);
        let p = DMatrix::from_fn(d, d, |_, _| rng.normal());
        let q = DMatrix::from_fn(d, d, |_, _| rng.normal());
        let mapped = opcalc::gd_map(&MatrixOperator::rank_one(&p, &q), gamma, &ctx).unwrap();
        let rank = mapped.kernel().clone().svd(false, false).rank(1e-9 * mapped.kernel().amax().max(1e-300));
        prop_assert!(rank <= 4);
        prop_assert!(mapped.kernel().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn diagonalization_commutes_with_polynomials((dist, n) in population(4), gamma in 0.0f64..0.3, k in 0usize..4) {
        let ctx = PopulationContext::new(&dist, n).unwrap();
        let poly = OperatorPolynomial::monomial(k, 1.0).add(&OperatorPolynomial::monomial(k + 1, 0.5));
        let via_operator = opcalc::diagonalize(&poly.gd_map(gamma).to_operator(&ctx));
        let via_diagonal = poly.gd_map(gamma).to_diagonal(&ctx);
        let gap = (&via_operator.kernel - &via_diagonal.kernel).amax();
        prop_assert!(gap <= 1e-10 * via_diagonal.kernel.amax().max(1.0));
    }
}
