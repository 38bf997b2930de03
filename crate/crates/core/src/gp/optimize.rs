//! Bounded maximization of a smooth objective in log-hyperparameter space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernel::N_HYPER;
use crate::error::Result;

pub type Point = [f64; N_HYPER];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Point,
    pub hi: Point,
}

impl Bounds {
    pub fn project(&self, x: &Point) -> Point {
        let mut out = *x;
        for d in 0..N_HYPER {
            out[d] = out[d].clamp(self.lo[d], self.hi[d]);
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let mut out = [0.0; N_HYPER];
        for d in 0..N_HYPER {
            out[d] = self.lo[d] + (self.hi[d] - self.lo[d]) * rng.random::<f64>();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AscentOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions {
            max_iter: 100,
            tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimum {
    pub x: Point,
    pub value: f64,
    pub iterations: usize,
}

fn dot(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &Point, b: &Point) -> Point {
    let mut o = [0.0; N_HYPER];
    for d in 0..N_HYPER {
        o[d] = a[d] - b[d];
    }
    o
}

/// Projected gradient ascent with Barzilai-Borwein steps and Armijo
/// backtracking. `f` returns the objective and its gradient; evaluation
/// errors at trial points count as a failed step.
pub fn ascend<F>(mut f: F, x0: Point, bounds: &Bounds, opts: &AscentOptions) -> Result<Optimum>
where
    F: FnMut(&Point) -> Result<(f64, Point)>,
{
    let mut x = bounds.project(&x0);
    let (mut fx, mut g) = f(&x)?;
    let mut step = 0.1;
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        let mut accepted = None;
        let mut t = step;
        for _ in 0..30 {
            let mut trial = x;
            for d in 0..N_HYPER {
                trial[d] += t * g[d];
            }
            let trial = bounds.project(&trial);
            let dx = sub(&trial, &x);
            if dot(&dx, &dx) == 0.0 {
                break;
            }
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft >= fx + 1e-4 * dot(&g, &dx) {
                    accepted = Some((trial, ft, gt, dx));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn, dx)) = accepted else {
            break;
        };
        let improvement = fnew - fx;
        let dg = sub(&gn, &g);
        // ascent: BB step is s.s / -(s.y)
        let sy = -dot(&dx, &dg);
        step = if sy > 1e-12 {
            (dot(&dx, &dx) / sy).clamp(1e-4, 1e2)
        } else {
            (t * 2.0).min(1e2)
        };
        x = xn;
        fx = fnew;
        g = gn;
        if improvement.abs() <= opts.tol * (1.0 + fx.abs()) && dot(&dx, &dx).sqrt() < 1e-4 {
            break;
        }
    }
    Ok(Optimum {
        x,
        value: fx,
        iterations: it,
    })
}
