//! Outcome fields against goldens produced by an independent re-implementation
//! of the episode simulator (numpy, same Euler scheme).

use std::collections::VecDeque;

use atslg::config::RunConfig;
use atslg::pipeline::offline_stage;
use atslg::vehicle::{outcome_field, AccAebParams, EpisodeConfig, FvdmParams};
use atslg::{GridConfig, ScenarioField, ScenarioSpace};

fn space() -> ScenarioSpace {
    ScenarioSpace::new(&GridConfig::default()).unwrap()
}

fn golden(name: &str) -> ScenarioField {
    let path = format!("{}/tests/golden/{name}_outcome.csv", env!("CARGO_MANIFEST_DIR"));
    ScenarioField::read_csv(space(), std::fs::File::open(path).unwrap()).unwrap()
}

fn differing(a: &ScenarioField, b: &ScenarioField) -> Vec<(f64, f64)> {
    (0..a.len())
        .filter(|&k| a.at(k) != b.at(k))
        .map(|k| a.space().scenario_of_flat(k).unwrap())
        .collect()
}

#[test]
fn fvdm_outcomes_match_golden() {
    let f = outcome_field(&FvdmParams::default(), &space(), &EpisodeConfig::default()).unwrap();
    let g = golden("fvdm");
    assert_eq!(differing(&f, &g), vec![]);
    assert_eq!(f.sum(), 1662.0);
}

#[test]
fn acc_aeb_outcomes_match_golden() {
    let a = outcome_field(&AccAebParams::default(), &space(), &EpisodeConfig::default()).unwrap();
    let g = golden("acc_aeb");
    assert_eq!(differing(&a, &g), vec![]);
    assert_eq!(a.sum(), 446.0);
}

/// Cells of the largest 4-connected accident component.
fn largest_component(f: &ScenarioField) -> usize {
    let s = *f.space();
    let mut seen = vec![false; f.len()];
    let mut best = 0;
    for start in 0..f.len() {
        if seen[start] || f.at(start) != 1.0 {
            continue;
        }
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(k) = queue.pop_front() {
            size += 1;
            let (i, j) = (k / s.n_rdot(), k % s.n_rdot());
            let mut nb = Vec::new();
            if i > 0 {
                nb.push(k - s.n_rdot());
            }
            if i + 1 < s.n_r() {
                nb.push(k + s.n_rdot());
            }
            if j > 0 {
                nb.push(k - 1);
            }
            if j + 1 < s.n_rdot() {
                nb.push(k + 1);
            }
            for n in nb {
                if !seen[n] && f.at(n) == 1.0 {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        best = best.max(size);
    }
    best
}

#[test]
fn fvdm_accident_region_is_one_blob_at_low_range_while_closing() {
    let f = golden("fvdm");
    assert_eq!(largest_component(&f) as f64, f.sum());
    assert_eq!(f.at(0), 1.0);
    let s = space();
    for k in 0..f.len() {
        let (_, rdot) = s.scenario_of_flat(k).unwrap();
        if f.at(k) == 1.0 {
            assert!(rdot < 0.0);
        }
    }
}

#[test]
fn acc_accidents_are_a_strict_nonempty_subset() {
    let f = golden("fvdm");
    let a = golden("acc_aeb");
    let mut only_fvdm = 0;
    for k in 0..f.len() {
        assert!(a.at(k) <= f.at(k), "cell {k} crashes only under ACC+AEB");
        if f.at(k) == 1.0 && a.at(k) == 0.0 {
            only_fvdm += 1;
        }
    }
    assert!(a.sum() > 0.0);
    assert!(only_fvdm > 0);
}

#[test]
fn default_offline_library_size_is_in_range() {
    let (art, exposure) = offline_stage(&RunConfig::default()).unwrap();
    let n = art.library.phi_len();
    assert!((50..=800).contains(&n), "|phi| = {n}");
    assert_eq!(art.p_s, golden("fvdm"));
    assert_eq!(exposure.n_events_rejected, 0);
}
