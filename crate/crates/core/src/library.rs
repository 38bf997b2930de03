//! Criticality, the critical-scenario set and its epsilon-greedy importance function.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{compensated_sum, relabel, ScenarioField, ScenarioIndex, ScenarioSpace};

/// `V(x) = P(S|x) P(x)`.
pub fn criticality(p_s: &ScenarioField, p_x: &ScenarioField) -> Result<ScenarioField> {
    p_s.zip_with(p_x, |s, p| s * p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Library {
    /// Membership flag per cell.
    pub in_phi: Vec<bool>,
    pub v: ScenarioField,
    pub q: ScenarioField,
    pub w_norm: f64,
    pub epsilon: f64,
    cdf: Vec<f64>,
}

impl Library {
    pub fn space(&self) -> &ScenarioSpace {
        self.v.space()
    }

    pub fn threshold(&self) -> f64 {
        1.0 / self.space().n_total() as f64
    }

    pub fn phi(&self) -> Vec<ScenarioIndex> {
        let s = *self.space();
        self.in_phi
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(k, _)| s.from_flat(k).expect("flat index within grid"))
            .collect()
    }

    pub fn phi_len(&self) -> usize {
        self.in_phi.iter().filter(|m| **m).count()
    }

    /// Draws a cell with probability `q` by inverting the cumulative sum in
    /// flat order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ScenarioIndex {
        let flat = sample_cdf(&self.cdf, rng);
        self.space().from_flat(flat).expect("flat index within grid")
    }

    /// Errors unless `q > 0` wherever `p_x > 0`.
    pub fn check_support(&self, p_x: &ScenarioField) -> Result<()> {
        check_support(&self.q, p_x)
    }
}

pub fn check_support(q: &ScenarioField, p_x: &ScenarioField) -> Result<()> {
    q.ensure_same_space(p_x)?;
    match p_x
        .values()
        .iter()
        .zip(q.values())
        .position(|(&p, &qq)| p > 0.0 && !(qq > 0.0))
    {
        Some(flat) => Err(Error::Support { flat }),
        None => Ok(()),
    }
}

pub(crate) fn cumulative(values: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    values
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

/// Index of the first cumulative value exceeding a uniform draw.
pub(crate) fn sample_cdf<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let total = *cdf.last().expect("non-empty cdf");
    let u = rng.random::<f64>() * total;
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Thresholds `v` at `1/n_total` (strictly) and spreads `epsilon` uniformly
/// over the remaining cells.
pub fn build_library(v: &ScenarioField, epsilon: f64) -> Result<Library> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::config("offline.epsilon", "must lie in (0, 1)"));
    }
    if v.values().iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Numerical(
            "criticality must be finite and non-negative".into(),
        ));
    }
    let n = v.len();
    let threshold = 1.0 / n as f64;
    let in_phi: Vec<bool> = v.values().iter().map(|&x| x > threshold).collect();
    let n_phi = in_phi.iter().filter(|m| **m).count();
    if n_phi == 0 {
        return Err(Error::DegenerateLibrary(format!(
            "no cell has criticality above 1/{n}"
        )));
    }
    let w_norm = compensated_sum(
        v.values()
            .iter()
            .zip(&in_phi)
            .filter(|(_, m)| **m)
            .map(|(x, _)| *x),
    );
    let q_values: Vec<f64> = if n_phi == n {
        v.values().iter().map(|x| x / w_norm).collect()
    } else {
        let off = epsilon / (n - n_phi) as f64;
        v.values()
            .iter()
            .zip(&in_phi)
            .map(|(&x, &m)| if m { (1.0 - epsilon) * x / w_norm } else { off })
            .collect()
    };
    let q = ScenarioField::new(*v.space(), q_values)?.normalized()?;
    let cdf = cumulative(q.values());
    Ok(Library {
        in_phi,
        v: v.clone(),
        q,
        w_norm,
        epsilon,
        cdf,
    })
}

/// Library with an empty critical set: `q` is uniform over the grid.
///
/// The adaptive loop falls back to it when the compensated surrogate leaves
/// no cell above threshold, so acquisition can still explore.
pub fn uniform_library(v: &ScenarioField, epsilon: f64) -> Result<Library> {
    let n = v.len();
    let q = ScenarioField::constant(*v.space(), 1.0 / n as f64);
    let cdf = cumulative(q.values());
    Ok(Library {
        in_phi: vec![false; n],
        v: v.clone(),
        q,
        w_norm: 0.0,
        epsilon,
        cdf,
    })
}

/// Manifest stored next to a persisted library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryManifest {
    pub epsilon: f64,
    pub w_norm: f64,
    pub threshold: f64,
    pub n_total: usize,
    pub n_phi: usize,
    pub fields: Vec<String>,
}

/// Everything the adaptive stage needs from the offline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineArtifacts {
    pub p_x: ScenarioField,
    pub p_s: ScenarioField,
    pub library: Library,
}

const FIELD_ORDER: [&str; 5] = ["p_x", "p_s", "v", "q", "phi"];

impl OfflineArtifacts {
    pub fn build(p_x: ScenarioField, p_s: ScenarioField, epsilon: f64) -> Result<Self> {
        let v = criticality(&p_s, &p_x)?;
        let library = build_library(&v, epsilon)?;
        library.check_support(&p_x)?;
        Ok(OfflineArtifacts { p_x, p_s, library })
    }

    pub fn manifest(&self) -> LibraryManifest {
        LibraryManifest {
            epsilon: self.library.epsilon,
            w_norm: self.library.w_norm,
            threshold: self.library.threshold(),
            n_total: self.library.space().n_total(),
            n_phi: self.library.phi_len(),
            fields: FIELD_ORDER.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Writes the five fields back to back to `bin_path` and the manifest as
    /// JSON next to it (same stem, `.json`).
    pub fn save(&self, bin_path: &Path) -> Result<()> {
        let phi = ScenarioField::new(
            *self.p_x.space(),
            self.library
                .in_phi
                .iter()
                .map(|&m| if m { 1.0 } else { 0.0 })
                .collect(),
        )?;
        let mut bytes = Vec::new();
        for f in [&self.p_x, &self.p_s, &self.library.v, &self.library.q, &phi] {
            bytes.extend_from_slice(&f.to_bytes());
        }
        std::fs::write(bin_path, bytes).map_err(|e| Error::io(bin_path, e))?;
        let json = serde_json::to_string_pretty(&self.manifest())
            .map_err(|e| Error::Numerical(e.to_string()))?;
        let man = bin_path.with_extension("json");
        std::fs::write(&man, json).map_err(|e| Error::io(&man, e))?;
        Ok(())
    }

    pub fn load(bin_path: &Path) -> Result<Self> {
        let bytes = std::fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
        let man_path = bin_path.with_extension("json");
        let man_text = std::fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let manifest: LibraryManifest =
            serde_json::from_str(&man_text).map_err(|e| Error::Format {
                path: man_path.clone(),
                reason: e.to_string(),
            })?;
        let mut fields = Vec::with_capacity(FIELD_ORDER.len());
        let mut pos = 0;
        for _ in FIELD_ORDER {
            let (f, used) =
                ScenarioField::from_bytes(&bytes[pos..]).map_err(|e| relabel(e, bin_path))?;
            pos += used;
            fields.push(f);
        }
        if pos != bytes.len() {
            return Err(Error::Format {
                path: bin_path.into(),
                reason: "trailing bytes after library fields".into(),
            });
        }
        let mut it = fields.into_iter();
        let p_x = it.next().expect("five fields");
        let p_s = it.next().expect("five fields");
        let v = it.next().expect("five fields");
        let q = it.next().expect("five fields");
        let phi = it.next().expect("five fields");
        let art = OfflineArtifacts::build(p_x, p_s, manifest.epsilon)?;
        let consistent = art.library.v == v
            && art.library.q == q
            && art
                .library
                .in_phi
                .iter()
                .zip(phi.values())
                .all(|(&m, &f)| m == (f == 1.0));
        if !consistent {
            return Err(Error::Format {
                path: bin_path.into(),
                reason: "stored criticality or importance function disagrees with the rebuilt library"
                    .into(),
            });
        }
        Ok(art)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::GridConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space() -> ScenarioSpace {
        ScenarioSpace::new(&GridConfig::default()).unwrap()
    }

    #[test]
    fn zero_challenge_gives_zero_criticality() {
        let s = space();
        let p = ScenarioField::constant(s, 1.0 / 3420.0);
        let v = criticality(&ScenarioField::zeros(s), &p).unwrap();
        assert!(v.values().iter().all(|x| *x == 0.0));
        assert!(matches!(build_library(&v, 0.1), Err(Error::DegenerateLibrary(_))));
    }

    #[test]
    fn single_cell_library() {
        let s = space();
        let mut vals = vec![0.0; s.n_total()];
        vals[17] = 0.5;
        let v = ScenarioField::new(s, vals).unwrap();
        let lib = build_library(&v, 0.1).unwrap();
        assert!((lib.q.at(17) - 0.9).abs() < 1e-12);
        assert!((lib.q.at(0) - 0.1 / 3419.0).abs() < 1e-15);
        assert_eq!(lib.phi_len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hits = (0..1000).filter(|_| lib.sample(&mut rng).flat == 17).count();
        assert!(hits > 850);
    }

    #[test]
    fn threshold_is_strict() {
        let s = space();
        let t = 1.0 / 3420.0;
        let mut vals = vec![0.0; s.n_total()];
        vals[0] = t;
        vals[1] = t * 1.000001;
        let lib = build_library(&ScenarioField::new(s, vals).unwrap(), 0.1).unwrap();
        assert!(!lib.in_phi[0]);
        assert!(lib.in_phi[1]);
    }

    #[test]
    fn full_library_uses_only_the_in_library_branch() {
        let s = ScenarioSpace::new(&GridConfig {
            r_min: 0.0,
            r_max: 4.0,
            r_step: 2.0,
            rdot_min: 0.0,
            rdot_max: 0.4,
            rdot_step: 0.4,
        })
        .unwrap();
        let v = ScenarioField::new(s, vec![0.3, 0.3, 0.3, 0.3]).unwrap();
        let lib = build_library(&v, 0.1).unwrap();
        assert!(lib.q.values().iter().all(|q| (q - 0.25).abs() < 1e-15));
    }

    #[test]
    fn point_mass_sampling() {
        let s = space();
        let mut vals = vec![0.0; s.n_total()];
        vals[100] = 1.0;
        let q = ScenarioField::new(s, vals).unwrap();
        let cdf = cumulative(q.values());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..1000).all(|_| sample_cdf(&cdf, &mut rng) == 100));
    }

    #[test]
    fn support_violation_detected() {
        let s = space();
        let p = ScenarioField::constant(s, 1.0 / 3420.0);
        let mut qv = vec![1.0 / 3419.0; s.n_total()];
        qv[7] = 0.0;
        let q = ScenarioField::new(s, qv).unwrap();
        assert!(matches!(check_support(&q, &p), Err(Error::Support { flat: 7 })));
    }

    #[test]
    fn persistence_round_trip() {
        let s = space();
        let p_x = ScenarioField::from_fn(s, |i| 1.0 + (i.flat % 11) as f64).normalized().unwrap();
        let p_s = ScenarioField::from_fn(s, |i| if i.i_r < 3 { 1.0 } else { 0.0 });
        let art = OfflineArtifacts::build(p_x, p_s, 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("library.bin");
        art.save(&path).unwrap();
        let back = OfflineArtifacts::load(&path).unwrap();
        assert_eq!(art, back);
        let man: LibraryManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("library.json")).unwrap())
                .unwrap();
        assert_eq!(man.n_phi, art.library.phi_len());
    }

    #[test]
    fn uniform_fallback_library() {
        let s = space();
        let lib = uniform_library(&ScenarioField::zeros(s), 0.1).unwrap();
        assert_eq!(lib.phi_len(), 0);
        assert!(lib.q.values().iter().all(|q| *q == 1.0 / 3420.0));
        assert!(lib.q.is_distribution(1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..5000 {
            seen.insert(lib.sample(&mut rng).flat);
        }
        assert!(seen.len() > 2500);
    }
}
