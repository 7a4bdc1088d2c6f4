use eslab::bounds::theorem1_rhs;
use eslab::es_model::{enumerate_minibatch_second_moment, fit_es, EsSample};
use eslab::optimizer::{read_trajectory_csv, run_sgd, EnsembleTrajectory, RunConfig};
use eslab::problems::{make_logistic, make_random_quadratic, QuadraticSpec};
use eslab::sampling::{
    closed_form_es, derive_rng, enumerate_moments, exact_second_moment, verify_es_pointwise,
    EsConstants, SamplingScheme,
};
use eslab::schedules::{step_ceiling, StepSchedule};
use eslab::Vector;
use proptest::prelude::*;

fn scheme_strategy() -> impl Strategy<Value = SamplingScheme> {
    (1usize..=5, 1usize..=3, any::<u64>()).prop_flat_map(|(n, tau, _)| {
        prop_oneof![
            Just(SamplingScheme::tau_nice(n, tau.min(n)).unwrap()),
            proptest::collection::vec(0.05f64..1.0, n).prop_map(move |w| {
                let s: f64 = w.iter().sum();
                SamplingScheme::with_replacement(tau, w.iter().map(|x| x / s).collect()).unwrap()
            }),
            proptest::collection::vec(0.05f64..=1.0, n)
                .prop_map(|p| SamplingScheme::independent(p).unwrap()),
        ]
    })
}

fn schedule_strategy() -> impl Strategy<Value = StepSchedule> {
    (1e-3f64..2.0, 0.05f64..0.95, 1usize..500).prop_flat_map(|(eta, alpha, horizon)| {
        prop_oneof![
            Just(StepSchedule::constant(eta).unwrap()),
            Just(StepSchedule::harmonic(eta).unwrap()),
            Just(StepSchedule::polynomial(eta, alpha).unwrap()),
            Just(StepSchedule::cosine(eta, horizon).unwrap()),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampling_vectors_are_unbiased(scheme in scheme_strategy()) {
        let m = enumerate_moments(&scheme).unwrap();
        prop_assert!((m.total_probability - 1.0).abs() < 1e-12);
        for e in m.e_v {
            prop_assert!((e - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn draws_stay_on_the_support(scheme in scheme_strategy(), seed in any::<u64>()) {
        let mut rng = derive_rng(seed, 0, 0);
        for _ in 0..20 {
            let v = scheme.draw(&mut rng);
            prop_assert!(v.weights.iter().all(|w| *w >= 0.0 && w.is_finite()));
            match &scheme {
                SamplingScheme::TauNice { n, .. } => {
                    let total: f64 = v.weights.iter().sum();
                    prop_assert!((total - *n as f64).abs() < 1e-9);
                }
                SamplingScheme::WithReplacement { q, .. } => {
                    let total: f64 = v.weights.iter().zip(q).map(|(w, qi)| w * qi).sum();
                    prop_assert!((total - 1.0).abs() < 1e-9);
                }
                SamplingScheme::IndependentBernoulli { p } => {
                    for (w, pi) in v.weights.iter().zip(p) {
                        prop_assert!(*w == 0.0 || (*w - 1.0 / pi).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn es_holds_for_closed_form_constants(
        scheme in scheme_strategy(),
        seed in any::<u64>(),
        het in 0.0f64..3.0,
        logistic in any::<bool>(),
        scale in -3.0f64..1.5,
    ) {
        let n = scheme.n();
        let p = if logistic {
            make_logistic(n, 3, 0.1, seed).unwrap()
        } else {
            make_random_quadratic(&QuadraticSpec::new(n, 3, (0.1, 4.0), het, seed).rotated()).unwrap()
        };
        for x in p.sample_points(5, 10f64.powf(scale), seed) {
            let c = verify_es_pointwise(&p, &scheme, &x).unwrap();
            prop_assert!(c.holds, "lhs {} rhs {}", c.lhs, c.rhs);
        }
    }

    #[test]
    fn minibatch_moment_interpolates(scheme in scheme_strategy(), seed in any::<u64>(), tau in 1usize..=3) {
        let n = scheme.n();
        prop_assume!(scheme.outcome_count().pow(tau as u32) <= 20_000);
        let p = make_random_quadratic(&QuadraticSpec::new(n, 2, (0.5, 2.0), 1.0, seed)).unwrap();
        let x = Vector::from_column_slice(&[0.4, -1.3]);
        let g2 = p.grad_full(&x).unwrap().norm_squared();
        let single = exact_second_moment(&p, &scheme, &x).unwrap();
        let batch = enumerate_minibatch_second_moment(&p, &scheme, tau, &x).unwrap();
        let expected = g2 + (single - g2) / tau as f64;
        prop_assert!((batch - expected).abs() <= 1e-10 * expected.max(1.0));
    }

    #[test]
    fn schedules_are_bounded_and_sums_monotone(s in schedule_strategy(), k in 1usize..400) {
        let k = s.horizon().map_or(k, |h| k.min(h));
        let mut prev = (0.0, 0.0);
        for j in 1..=k {
            let eta = s.step_size(j - 1).unwrap();
            prop_assert!(eta >= 0.0 && eta <= s.eta_max());
            let sums = s.partial_sums(j).unwrap();
            prop_assert!(sums.0 >= prev.0 && sums.1 >= prev.1);
            prev = sums;
        }
    }

    #[test]
    fn noiseless_fit_recovers_constants(a in 0.01f64..10.0, b in 0.0f64..5.0, c in 0.01f64..2.0, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let es = EsConstants::new(a, b, c);
        let samples: Vec<EsSample> = (0..30)
            .map(|_| {
                let s = 10f64.powf(rng.random_range(-2.0..1.0));
                let g = 10f64.powf(rng.random_range(-2.0..1.0));
                EsSample::exact(s, g, es.rhs(s, g))
            })
            .collect();
        let fit = fit_es(&samples).unwrap();
        prop_assert!((fit.a_hat - a).abs() <= 1e-7 * a.max(1.0));
        prop_assert!((fit.b_hat - b).abs() <= 1e-7 * b.max(1.0));
        prop_assert!((fit.c_hat - c).abs() <= 1e-7 * c.max(1.0));
    }

    #[test]
    fn rhs_grows_toward_the_step_ceiling(a in 0.0f64..3.0, b in 0.1f64..3.0, c in 0.0f64..1.0, l in 0.1f64..5.0) {
        let es = EsConstants::new(a, b, c);
        let ens = EnsembleTrajectory {
            runs: 2,
            used_runs: 2,
            diverged_runs: 0,
            horizon: 50,
            f_star: 0.0,
            eta: vec![0.0; 51],
            subopt_mean: vec![1.0; 51],
            subopt_se: vec![0.0; 51],
            grad_mean: vec![1.0; 51],
            grad_se: vec![0.0; 51],
        };
        let ceiling = step_ceiling(l, b);
        let mut prev = 0.0;
        for frac in [0.9, 0.99, 0.999] {
            let s = StepSchedule::constant(frac * ceiling).unwrap();
            let t = theorem1_rhs(&ens, &es, l, &s, 50).unwrap();
            prop_assert!(t.term1 >= 0.0 && t.term2 >= 0.0 && t.term3 >= 0.0);
            prop_assert!((t.total() - (t.term1 + t.term2 + t.term3)).abs() <= 1e-12 * t.total());
            prop_assert!(t.total() > prev);
            prev = t.total();
        }
    }
}

#[test]
fn trajectory_csv_round_trips() {
    let p = make_random_quadratic(&QuadraticSpec::new(5, 3, (0.5, 2.0), 1.0, 1)).unwrap();
    let s = SamplingScheme::tau_nice(5, 2).unwrap();
    let es = closed_form_es(&s, &p).unwrap();
    let sched = StepSchedule::constant(0.5 * step_ceiling(p.l_bar(), es.b.max(1.0))).unwrap();
    let traj = run_sgd(&p, &s, &sched, &RunConfig::new(40, 3).with_probes(5, 50)).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let rows = read_trajectory_csv(buf.as_slice()).unwrap();
    assert_eq!(rows.len(), traj.steps.len());
    for (r, s) in rows.iter().zip(&traj.steps) {
        assert_eq!(
            (r.k, r.f, r.grad_norm_sq, r.eta),
            (s.k, s.f, s.grad_norm_sq, s.eta)
        );
    }
    let probed: Vec<_> = rows
        .iter()
        .filter(|r| r.second_moment_hat.is_some())
        .collect();
    assert_eq!(probed.len(), traj.probes.len());
    assert_eq!(
        probed[1].second_moment_hat,
        Some(traj.probes[1].second_moment_hat)
    );
}
