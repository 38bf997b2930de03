use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use super::kernel::{ArdSeKernel, N_HYPER};
use super::linalg::{cholesky_jitter, log_det};
use super::optimize::{ascend, Point};
use super::{FitOptions, HyperStart};
use crate::error::{Error, Result};
use crate::space::{ScenarioField, ScenarioSpace};

/// Zero-mean GP conditioned on exact observations.
#[derive(Debug, Clone)]
pub struct Gpr {
    pub kernel: ArdSeKernel,
    pub jitter: f64,
    x: Vec<[f64; 2]>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl Gpr {
    pub fn condition(x: &[[f64; 2]], y: &[f64], kernel: ArdSeKernel, jitter: f64) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::EmptyData("regression needs at least one observation".into()));
        }
        if x.len() != y.len() {
            return Err(Error::Shape(format!("{} inputs, {} targets", x.len(), y.len())));
        }
        let k = kernel.gram(x);
        let (chol, jitter) = cholesky_jitter(&k, jitter)?;
        let alpha = chol.solve(&DVector::from_column_slice(y));
        Ok(Gpr {
            kernel,
            jitter,
            x: x.to_vec(),
            chol,
            alpha,
        })
    }

    pub fn n_train(&self) -> usize {
        self.x.len()
    }

    /// Predictive mean and variance (clipped at zero) at `pts`.
    pub fn predict(&self, pts: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
        let ks = self.kernel.cross(&self.x, pts);
        let mean = ks.tr_mul(&self.alpha);
        let l = self.chol.l();
        let v = l
            .solve_lower_triangular(&ks)
            .expect("triangular factor has a positive diagonal");
        let sf2 = self.kernel.sigma_f * self.kernel.sigma_f;
        let var = (0..pts.len())
            .map(|j| (sf2 - v.column(j).norm_squared()).max(0.0))
            .collect();
        (mean.iter().copied().collect(), var)
    }
}

/// Log marginal likelihood and its gradient in log-hyperparameters.
pub fn log_marginal_likelihood(
    x: &[[f64; 2]],
    y: &[f64],
    kernel: &ArdSeKernel,
    jitter: f64,
) -> Result<(f64, Point)> {
    let n = x.len();
    let k = kernel.gram(x);
    let (chol, _) = cholesky_jitter(&k, jitter)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let lml = -0.5 * yv.dot(&alpha) - 0.5 * log_det(&chol)
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let kinv = chol.inverse();
    let inner: DMatrix<f64> = &alpha * alpha.transpose() - kinv;
    let grads = kernel.gram_grads(x, &k);
    let mut g = [0.0; N_HYPER];
    for (gd, dk) in g.iter_mut().zip(grads.iter()) {
        *gd = 0.5 * inner.component_mul(dk).sum();
    }
    Ok((lml, g))
}

/// Maximizes the marginal likelihood over the kernel hyperparameters.
pub fn fit_hyperparameters<R: Rng + ?Sized>(
    x: &[[f64; 2]],
    y: &[f64],
    opts: &FitOptions,
    start: HyperStart,
    rng: &mut R,
) -> Result<ArdSeKernel> {
    let bounds = opts.bounds;
    let objective = |t: &Point| log_marginal_likelihood(x, y, &ArdSeKernel::from_log(t), opts.jitter);
    let starts: Vec<(Point, _)> = match start {
        HyperStart::Fixed(k) => return Ok(k),
        HyperStart::Warm(k) => vec![(k.to_log(), opts.warm_ascent)],
        HyperStart::Cold => {
            let mut s = vec![(opts.init.to_log(), opts.ascent)];
            for _ in 1..opts.restarts.max(1) {
                s.push((bounds.sample(rng), opts.ascent));
            }
            s
        }
    };
    let mut best: Option<(f64, Point)> = None;
    let mut last_err = None;
    for (x0, ao) in starts {
        match ascend(objective, x0, &bounds, &ao) {
            Ok(o) => {
                if best.map_or(true, |(v, _)| o.value > v) {
                    best = Some((o.value, o.x));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some((_, t)), _) => Ok(ArdSeKernel::from_log(&t)),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::Numerical("no hyperparameter start evaluated".into())),
    }
}

/// Regression posterior evaluated on every cell of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    pub mean: ScenarioField,
    pub var: ScenarioField,
    pub kernel: ArdSeKernel,
    pub n_train: usize,
}

impl GpPosterior {
    /// Zero-mean prior, used when a class has no observations.
    pub fn prior(space: ScenarioSpace, kernel: ArdSeKernel) -> Self {
        GpPosterior {
            mean: ScenarioField::zeros(space),
            var: ScenarioField::constant(space, kernel.sigma_f * kernel.sigma_f),
            kernel,
            n_train: 0,
        }
    }
}

/// Fits hyperparameters (unless fixed) and predicts on the full grid.
pub fn gpr_fit<R: Rng + ?Sized>(
    space: &ScenarioSpace,
    x: &[[f64; 2]],
    y: &[f64],
    opts: &FitOptions,
    start: HyperStart,
    rng: &mut R,
) -> Result<GpPosterior> {
    let kernel = fit_hyperparameters(x, y, opts, start, rng)?;
    let gp = Gpr::condition(x, y, kernel, opts.jitter)?;
    let (mean, var) = gp.predict(&space.centers());
    Ok(GpPosterior {
        mean: ScenarioField::new(*space, mean)?,
        var: ScenarioField::new(*space, var)?,
        kernel,
        n_train: x.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::GridConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts() -> Vec<[f64; 2]> {
        vec![[2.0, -3.0], [10.0, 0.0], [14.0, 1.2], [30.0, -8.0], [50.0, 4.0], [6.0, 2.0]]
    }

    #[test]
    fn single_point_interpolates() {
        for jitter in [1e-4, 1e-8] {
            let gp = Gpr::condition(&[[4.0, 1.0]], &[2.5], ArdSeKernel::default(), jitter).unwrap();
            let (m, v) = gp.predict(&[[4.0, 1.0]]);
            assert!((m[0] - 2.5).abs() < 3.0 * jitter);
            assert!(v[0] < 3.0 * jitter);
        }
    }

    #[test]
    fn zero_targets_give_zero_mean() {
        let x = pts();
        let gp = Gpr::condition(&x, &vec![0.0; x.len()], ArdSeKernel::default(), 1e-6).unwrap();
        let (m, _) = gp.predict(&[[0.5, 0.5], [70.0, -10.0]]);
        assert!(m.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = pts();
        let y: Vec<f64> = x.iter().map(|p| (p[0] / 9.0).sin() + 0.2 * p[1]).collect();
        let k = ArdSeKernel {
            sigma_f: 1.3,
            lambda: [7.0, 2.5],
        };
        let (_, g) = log_marginal_likelihood(&x, &y, &k, 1e-6).unwrap();
        let t = k.to_log();
        for d in 0..N_HYPER {
            let h = 1e-5;
            let (mut tp, mut tm) = (t, t);
            tp[d] += h;
            tm[d] -= h;
            let fp = log_marginal_likelihood(&x, &y, &ArdSeKernel::from_log(&tp), 1e-6).unwrap().0;
            let fm = log_marginal_likelihood(&x, &y, &ArdSeKernel::from_log(&tm), 1e-6).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[d]).abs() <= 1e-4 * fd.abs().max(1e-3), "{d}: {fd} vs {}", g[d]);
        }
    }

    #[test]
    fn optimization_improves_the_likelihood() {
        let x = pts();
        let y: Vec<f64> = x.iter().map(|p| (p[0] / 9.0).sin()).collect();
        let space = ScenarioSpace::new(&GridConfig::default()).unwrap();
        let opts = FitOptions::for_space(&space);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = fit_hyperparameters(&x, &y, &opts, HyperStart::Cold, &mut rng).unwrap();
        let l0 = log_marginal_likelihood(&x, &y, &opts.init, 1e-6).unwrap().0;
        let l1 = log_marginal_likelihood(&x, &y, &k, 1e-6).unwrap().0;
        assert!(l1 >= l0);
    }
}
