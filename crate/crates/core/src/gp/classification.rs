//! Binary GP classification with a logistic likelihood and the Laplace
//! approximation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use super::kernel::{ArdSeKernel, N_HYPER};
use super::optimize::{ascend, Point};
use super::{FitOptions, HyperStart};
use crate::error::{Error, Result};
use crate::space::{ScenarioField, ScenarioSpace};

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-10;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Converged Laplace state at the posterior mode.
#[derive(Debug, Clone)]
struct Mode {
    a: DVector<f64>,
    f: DVector<f64>,
    pi: DVector<f64>,
    sw: DVector<f64>,
    chol_b: Cholesky<f64, Dyn>,
    log_z: f64,
}

fn psi(a: &DVector<f64>, f: &DVector<f64>, y: &[f64]) -> f64 {
    -0.5 * a.dot(f) + y.iter().zip(f.iter()).map(|(yi, fi)| log_sigmoid(yi * fi)).sum::<f64>()
}

fn newton_pieces(f: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let pi = f.map(sigmoid);
    let sw = pi.map(|p| (p * (1.0 - p)).sqrt());
    (pi, sw)
}

fn factor_b(k: &DMatrix<f64>, sw: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    let mut b = DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)] * sw[j]);
    for i in 0..n {
        b[(i, i)] += 1.0;
    }
    Cholesky::new(b).ok_or_else(|| Error::Numerical("Laplace system matrix not positive definite".into()))
}

fn find_mode(k: &DMatrix<f64>, y: &[f64], a0: Option<&DVector<f64>>) -> Result<Mode> {
    let n = y.len();
    let t = DVector::from_iterator(n, y.iter().map(|v| 0.5 * (v + 1.0)));
    let mut a = match a0 {
        Some(a) if a.len() == n => a.clone(),
        _ => DVector::zeros(n),
    };
    let mut f = k * &a;
    let mut obj = psi(&a, &f, y);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITER {
        let (pi, sw) = newton_pieces(&f);
        let w = pi.map(|p| p * (1.0 - p));
        let chol = factor_b(k, &sw)?;
        let b = w.component_mul(&f) + (&t - &pi);
        let kb = k * &b;
        let rhs = sw.component_mul(&kb);
        let z = chol.solve(&rhs);
        let a_new = &b - sw.component_mul(&z);
        // damped step if the full Newton step does not increase the objective
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let a_try = &a + (&a_new - &a) * step;
            let f_try = k * &a_try;
            let o = psi(&a_try, &f_try, y);
            if o >= obj - 1e-12 * obj.abs().max(1.0) {
                let delta = o - obj;
                a = a_try;
                f = f_try;
                obj = o;
                accepted = true;
                if delta.abs() < NEWTON_TOL {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "Laplace mode search",
            iterations: NEWTON_MAX_ITER,
        });
    }
    let (pi, sw) = newton_pieces(&f);
    let chol_b = factor_b(k, &sw)?;
    let half_log_det: f64 = chol_b.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    let log_z = obj - half_log_det;
    Ok(Mode {
        a,
        f,
        pi,
        sw,
        chol_b,
        log_z,
    })
}

fn check_labels(x: &[[f64; 2]], y: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyData("classification needs at least one observation".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} inputs, {} labels", x.len(), y.len())));
    }
    if y.iter().any(|v| *v != 1.0 && *v != -1.0) {
        return Err(Error::Numerical("class labels must be +1 or -1".into()));
    }
    Ok(())
}

fn lml_with_mode(
    x: &[[f64; 2]],
    y: &[f64],
    kernel: &ArdSeKernel,
    a0: Option<&DVector<f64>>,
) -> Result<(f64, Point, Mode)> {
    let k = kernel.gram(x);
    let m = find_mode(&k, y, a0)?;
    let n = y.len();
    let t = DVector::from_iterator(n, y.iter().map(|v| 0.5 * (v + 1.0)));
    let grad_logp = &t - &m.pi;
    let d3 = m.pi.map(|p| -p * (1.0 - p) * (1.0 - 2.0 * p));
    let binv = m.chol_b.inverse();
    let r = DMatrix::from_fn(n, n, |i, j| m.sw[i] * binv[(i, j)] * m.sw[j]);
    let swk = DMatrix::from_fn(n, n, |i, j| m.sw[i] * k[(i, j)]);
    let c = m
        .chol_b
        .l()
        .solve_lower_triangular(&swk)
        .ok_or_else(|| Error::Numerical("singular Laplace factor".into()))?;
    // d(-1/2 log|B|)/df_i = 1/2 Sigma_ii d3_i, with W = -d2 log p
    let s2 = DVector::from_fn(n, |i, _| {
        0.5 * (k[(i, i)] - c.column(i).norm_squared()) * d3[i]
    });
    let grads = kernel.gram_grads(x, &k);
    let mut g = [0.0; N_HYPER];
    for (gd, cj) in g.iter_mut().zip(grads.iter()) {
        let s1 = 0.5 * m.a.dot(&(cj * &m.a)) - 0.5 * r.component_mul(cj).sum();
        let b = cj * &grad_logp;
        let s3 = &b - &k * (&r * &b);
        *gd = s1 + s2.dot(&s3);
    }
    let lz = m.log_z;
    Ok((lz, g, m))
}

/// Approximate log marginal likelihood and its gradient in log-hyperparameters.
pub fn laplace_log_marginal(x: &[[f64; 2]], y: &[f64], kernel: &ArdSeKernel) -> Result<(f64, Point)> {
    check_labels(x, y)?;
    let (v, g, _) = lml_with_mode(x, y, kernel, None)?;
    Ok((v, g))
}

/// Fitted classifier able to predict at arbitrary points.
#[derive(Debug, Clone)]
pub struct Gpc {
    pub kernel: ArdSeKernel,
    x: Vec<[f64; 2]>,
    mode: Mode,
    t_minus_pi: DVector<f64>,
}

impl Gpc {
    pub fn condition(x: &[[f64; 2]], y: &[f64], kernel: ArdSeKernel) -> Result<Self> {
        check_labels(x, y)?;
        let k = kernel.gram(x);
        let mode = find_mode(&k, y, None)?;
        let t = DVector::from_iterator(y.len(), y.iter().map(|v| 0.5 * (v + 1.0)));
        let t_minus_pi = &t - &mode.pi;
        Ok(Gpc {
            kernel,
            x: x.to_vec(),
            mode,
            t_minus_pi,
        })
    }

    /// Latent mode at the training inputs.
    pub fn latent_mode(&self) -> &[f64] {
        self.mode.f.as_slice()
    }

    /// Class-+1 probability (probit-approximated predictive integral) and
    /// latent predictive variance at `pts`.
    pub fn predict(&self, pts: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
        let ks = self.kernel.cross(&self.x, pts);
        let mean = ks.tr_mul(&self.t_minus_pi);
        let sks = DMatrix::from_fn(ks.nrows(), ks.ncols(), |i, j| self.mode.sw[i] * ks[(i, j)]);
        let v = self
            .mode
            .chol_b
            .l()
            .solve_lower_triangular(&sks)
            .expect("Laplace factor has a positive diagonal");
        let sf2 = self.kernel.sigma_f * self.kernel.sigma_f;
        let mut p = Vec::with_capacity(pts.len());
        let mut var = Vec::with_capacity(pts.len());
        for j in 0..pts.len() {
            let vj = (sf2 - v.column(j).norm_squared()).max(0.0);
            let kappa = 1.0 / (1.0 + std::f64::consts::PI * vj / 8.0).sqrt();
            p.push(sigmoid(kappa * mean[j]));
            var.push(vj);
        }
        (p, var)
    }
}

/// Classification posterior on every cell of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GpcPosterior {
    pub p_class1: ScenarioField,
    pub latent_var: ScenarioField,
    pub kernel: ArdSeKernel,
    /// Set when only one class was observed and the constant fallback is used.
    pub degenerate: bool,
}

impl GpcPosterior {
    /// Constant fallback for single-class data: `0.5 (1 + y tanh 1)` with the
    /// prior latent variance.
    pub fn single_class(space: ScenarioSpace, label: f64, kernel: ArdSeKernel) -> Self {
        GpcPosterior {
            p_class1: ScenarioField::constant(space, 0.5 * (1.0 + label * 1f64.tanh())),
            latent_var: ScenarioField::constant(space, kernel.sigma_f * kernel.sigma_f),
            kernel,
            degenerate: true,
        }
    }
}

pub fn fit_hyperparameters<R: Rng + ?Sized>(
    x: &[[f64; 2]],
    y: &[f64],
    opts: &FitOptions,
    start: HyperStart,
    rng: &mut R,
) -> Result<ArdSeKernel> {
    check_labels(x, y)?;
    let starts: Vec<(Point, _)> = match start {
        HyperStart::Fixed(k) => return Ok(k),
        HyperStart::Warm(k) => vec![(k.to_log(), opts.warm_ascent)],
        HyperStart::Cold => {
            let mut s = vec![(opts.init.to_log(), opts.ascent)];
            for _ in 1..opts.restarts.max(1) {
                s.push((opts.bounds.sample(rng), opts.ascent));
            }
            s
        }
    };
    let mut best: Option<(f64, Point)> = None;
    let mut last_err = None;
    for (x0, ao) in starts {
        let mut warm_a: Option<DVector<f64>> = None;
        let objective = |t: &Point| {
            let (v, g, m) = lml_with_mode(x, y, &ArdSeKernel::from_log(t), warm_a.as_ref())?;
            warm_a = Some(m.a);
            Ok((v, g))
        };
        match ascend(objective, x0, &opts.bounds, &ao) {
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

/// Fits the classifier on labels in {+1, -1} and predicts on the grid.
pub fn gpc_fit<R: Rng + ?Sized>(
    space: &ScenarioSpace,
    x: &[[f64; 2]],
    y: &[f64],
    opts: &FitOptions,
    start: HyperStart,
    rng: &mut R,
) -> Result<GpcPosterior> {
    check_labels(x, y)?;
    let first = y[0];
    if y.iter().all(|v| *v == first) {
        return Ok(GpcPosterior::single_class(*space, first, opts.init));
    }
    let kernel = fit_hyperparameters(x, y, opts, start, rng)?;
    let gpc = Gpc::condition(x, y, kernel)?;
    let (p, var) = gpc.predict(&space.centers());
    Ok(GpcPosterior {
        p_class1: ScenarioField::new(*space, p)?,
        latent_var: ScenarioField::new(*space, var)?,
        kernel,
        degenerate: false,
    })
}
