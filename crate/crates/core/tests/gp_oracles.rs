use proptest::prelude::*;

use atslg::gp::{gpc_fit, gpr_fit, ArdSeKernel, FitOptions, Gpr, HyperStart};
use atslg::{rng, GridConfig, ScenarioSpace};

fn default_space() -> ScenarioSpace {
    ScenarioSpace::new(&GridConfig::default()).unwrap()
}

#[test]
fn sine_on_a_line_is_covered_by_two_sigma() {
    // one range-rate node: a 1-D grid of 32 ranges in (0, 6.4]
    let s = ScenarioSpace::new(&GridConfig {
        r_min: 0.0,
        r_max: 6.4,
        r_step: 0.2,
        rdot_min: 0.0,
        rdot_max: 0.0,
        rdot_step: 0.4,
    })
    .unwrap();
    assert_eq!(s.n_total(), 32);
    let train = [0usize, 8, 16, 24, 31];
    let x: Vec<[f64; 2]> = train.iter().map(|&k| [s.scenario_of_flat(k).unwrap().0, 0.0]).collect();
    let y: Vec<f64> = x.iter().map(|p| p[0].sin()).collect();
    let post = gpr_fit(&s, &x, &y, &FitOptions::for_space(&s), HyperStart::Cold, &mut rng::stream(1, "gp")).unwrap();
    let held: Vec<usize> = (0..32).filter(|k| !train.contains(k)).collect();
    let covered = held
        .iter()
        .filter(|&&k| {
            let r = s.scenario_of_flat(k).unwrap().0;
            (post.mean.at(k) - r.sin()).abs() <= 2.0 * post.var.at(k).sqrt()
        })
        .count();
    assert!(covered as f64 >= 0.95 * held.len() as f64, "{covered}/{}", held.len());
}

#[test]
fn classifier_respects_range_reflection() {
    let s = default_space();
    // centers 2..90 map onto each other under R -> 92 - R
    let mirror = |r: f64| 92.0 - r;
    let base = [
        ([4.0, -10.0], 1.0),
        ([10.0, -6.0], 1.0),
        ([20.0, -2.0], -1.0),
        ([30.0, -12.0], -1.0),
        ([40.0, 4.0], -1.0),
        ([16.0, -16.0], 1.0),
    ];
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (p, l) in base {
        x.push(p);
        y.push(l);
        x.push([mirror(p[0]), p[1]]);
        y.push(l);
    }
    let post = gpc_fit(&s, &x, &y, &FitOptions::gpc_for_space(&s), HyperStart::Cold, &mut rng::stream(2, "gp")).unwrap();
    let mut worst = 0.0f64;
    for idx in s.indices() {
        let j = s.index(s.n_r() - 1 - idx.i_r, idx.i_rdot).unwrap();
        worst = worst.max((post.p_class1.get(idx) - post.p_class1.get(j)).abs());
        worst = worst.max((post.latent_var.get(idx) - post.latent_var.get(j)).abs());
    }
    assert!(worst < 1e-6, "asymmetry {worst:e}");
}

fn cells(s: &ScenarioSpace, flats: &[usize]) -> Vec<[f64; 2]> {
    flats
        .iter()
        .map(|&f| {
            let (r, d) = s.scenario_of_flat(f).unwrap();
            [r, d]
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adding_an_observation_never_raises_variance(
        flats in proptest::collection::btree_set(0usize..3420, 2..12),
        extra in 0usize..3420,
        sf in 0.2f64..3.0,
        l0 in 2.0f64..40.0,
        l1 in 0.5f64..10.0,
    ) {
        let s = default_space();
        let flats: Vec<usize> = flats.into_iter().filter(|f| *f != extra).collect();
        prop_assume!(!flats.is_empty());
        let k = ArdSeKernel { sigma_f: sf, lambda: [l0, l1] };
        let x = cells(&s, &flats);
        let mut x2 = x.clone();
        x2.extend(cells(&s, &[extra]));
        let pts = s.centers();
        let (_, v1) = Gpr::condition(&x, &vec![0.0; x.len()], k, 1e-8).unwrap().predict(&pts);
        let (_, v2) = Gpr::condition(&x2, &vec![0.0; x2.len()], k, 1e-8).unwrap().predict(&pts);
        for (a, b) in v1.iter().zip(&v2) {
            prop_assert!(*b <= *a + 1e-8, "{b} > {a}");
        }
    }
}
