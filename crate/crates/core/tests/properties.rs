//! Invariants over randomly drawn grids, fields and parameters.

use proptest::prelude::*;

use atslg::adaptive::total_variation;
use atslg::evaluator::{theoretical_variance, Welford};
use atslg::gp::gated::blend;
use atslg::gp::kernel::ArdSeKernel;
use atslg::library::build_library;
use atslg::vehicle::{simulate_cutin, AccAebParams, CarFollowingPolicy, EpisodeConfig, FvdmParams};
use atslg::{GridConfig, ScenarioField, ScenarioSpace};

fn grid() -> impl Strategy<Value = ScenarioSpace> {
    (-50.0..50.0f64, 0.1..5.0f64, 1usize..30, -30.0..30.0f64, 0.1..2.0f64, 1usize..30).prop_map(
        |(r_min, r_step, n_r, rdot_min, rdot_step, n_rdot)| {
            ScenarioSpace::new(&GridConfig {
                r_min,
                r_max: r_min + r_step * n_r as f64,
                r_step,
                rdot_min,
                rdot_max: rdot_min + rdot_step * (n_rdot - 1) as f64,
                rdot_step,
            })
            .unwrap()
        },
    )
}

fn small_space() -> ScenarioSpace {
    ScenarioSpace::new(&GridConfig {
        r_min: 0.0,
        r_max: 18.0,
        r_step: 2.0,
        rdot_min: -2.0,
        rdot_max: 2.0,
        rdot_step: 0.4,
    })
    .unwrap()
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..10.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flat_index_round_trips(s in grid(), pick in 0.0..1.0f64) {
        let flat = ((s.n_total() as f64 * pick) as usize).min(s.n_total() - 1);
        let idx = s.from_flat(flat).unwrap();
        prop_assert_eq!(idx.flat, flat);
        prop_assert_eq!(s.index(idx.i_r, idx.i_rdot).unwrap(), idx);
        let (r, d) = s.scenario(idx).unwrap();
        prop_assert_eq!(s.bin(r, d), Some(idx));
        prop_assert_eq!(s.scenario_to_index(r, d).unwrap(), idx);
    }

    #[test]
    fn normalized_sums_to_one(w in weights(99)) {
        let f = ScenarioField::new(small_space(), w).unwrap().normalized().unwrap();
        prop_assert!(f.is_distribution(1e-12));
    }

    #[test]
    fn library_is_positive_distribution_over_critical_set(
        w in weights(99),
        crash in prop::collection::vec(any::<bool>(), 99),
        eps in 0.001..0.5f64,
    ) {
        let s = small_space();
        let p_x = ScenarioField::new(s, w).unwrap().normalized().unwrap();
        let p_s = ScenarioField::new(s, crash.iter().map(|&c| c as u8 as f64).collect()).unwrap();
        let v = p_x.zip_with(&p_s, |a, b| a * b).unwrap();
        if let Ok(lib) = build_library(&v, eps) {
            prop_assert!(lib.q.is_distribution(1e-12));
            prop_assert!(lib.q.values().iter().all(|&x| x > 0.0));
            for k in 0..s.n_total() {
                prop_assert_eq!(lib.in_phi[k], v.at(k) > lib.threshold());
            }
        }
    }

    #[test]
    fn welford_matches_two_pass(xs in prop::collection::vec(-1e3..1e3f64, 2..200)) {
        let mut w = Welford::default();
        for &x in &xs {
            w.push(x);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!((w.mean() - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        prop_assert!((w.variance() - var).abs() <= 1e-9 * (1.0 + var));
    }

    #[test]
    fn total_variation_is_a_bounded_symmetric_distance(a in weights(99), b in weights(99)) {
        let s = small_space();
        let p = ScenarioField::new(s, a).unwrap().normalized().unwrap();
        let q = ScenarioField::new(s, b).unwrap().normalized().unwrap();
        let d = total_variation(&p, &q);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - total_variation(&q, &p)).abs() < 1e-15);
        prop_assert!(total_variation(&p, &p).abs() < 1e-15);
    }

    #[test]
    fn blend_at_certain_gate_returns_one_side(
        sub in prop::collection::vec(-1.0..0.0f64, 99),
        opt in prop::collection::vec(0.0..1.0f64, 99),
    ) {
        let s = small_space();
        let (sub, opt) = (ScenarioField::new(s, sub).unwrap(), ScenarioField::new(s, opt).unwrap());
        prop_assert_eq!(blend(&ScenarioField::constant(s, 1.0), &sub, &opt).unwrap(), sub.clone());
        prop_assert_eq!(blend(&ScenarioField::zeros(s), &sub, &opt).unwrap(), opt.clone());
        let half = blend(&ScenarioField::constant(s, 0.5), &sub, &opt).unwrap();
        for k in 0..s.n_total() {
            prop_assert!((half.at(k) - 0.5 * (sub.at(k) + opt.at(k))).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_is_symmetric_and_bounded(
        sf in 0.1..10.0f64, l0 in 0.5..50.0f64, l1 in 0.1..20.0f64,
        a in prop::array::uniform2(-100.0..100.0f64),
        b in prop::array::uniform2(-100.0..100.0f64),
    ) {
        let k = ArdSeKernel { sigma_f: sf, lambda: [l0, l1] };
        prop_assert_eq!(k.eval(&a, &b), k.eval(&b, &a));
        prop_assert!(k.eval(&a, &b) <= k.eval(&a, &a) + 1e-12);
        prop_assert!((k.eval(&a, &a) - sf * sf).abs() < 1e-12);
        let back = ArdSeKernel::from_log(&k.to_log());
        prop_assert!((back.sigma_f - sf).abs() < 1e-12 * sf);
    }

    #[test]
    fn trajectories_respect_policy_limits(r0 in 0.5..90.0f64, rdot0 in -20.0..10.0f64, acc in any::<bool>()) {
        let policy: Box<dyn CarFollowingPolicy> = if acc {
            Box::new(AccAebParams::default())
        } else {
            Box::new(FvdmParams::default())
        };
        let lim = policy.limits();
        let res = simulate_cutin(policy.as_ref(), r0, rdot0, &EpisodeConfig::default(), true).unwrap();
        let tr = res.trajectory.unwrap();
        for s in &tr {
            prop_assert!(s.v_cav >= lim.v_min - 1e-12 && s.v_cav <= lim.v_max + 1e-12);
            prop_assert!(s.u >= lim.a_min - 1e-12 && s.u <= lim.a_max + 1e-12);
        }
        let min_r = tr.iter().map(|s| s.range).fold(f64::INFINITY, f64::min);
        prop_assert!((res.min_distance - min_r).abs() < 1e-12);
    }

    #[test]
    fn binary_encoding_round_trips(s in grid(), seed in any::<u64>()) {
        let f = ScenarioField::from_fn(s, |i| (seed as f64 + i.flat as f64).sin());
        let bytes = f.to_bytes();
        let (g, used) = ScenarioField::from_bytes(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(g, f);
    }

    #[test]
    fn theoretical_variance_is_non_negative(
        w in weights(99),
        qw in weights(99),
        crash in prop::collection::vec(any::<bool>(), 99),
    ) {
        let s = small_space();
        let p_x = ScenarioField::new(s, w).unwrap().normalized().unwrap();
        let q = ScenarioField::new(s, qw).unwrap().normalized().unwrap();
        let p_a = ScenarioField::new(s, crash.iter().map(|&c| c as u8 as f64).collect()).unwrap();
        prop_assert!(theoretical_variance(&q, &p_a, &p_x).unwrap() >= -1e-15);
    }
}
