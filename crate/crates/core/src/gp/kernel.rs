use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Squared-exponential kernel with one length scale per input dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArdSeKernel {
    pub sigma_f: f64,
    pub lambda: [f64; 2],
}

impl Default for ArdSeKernel {
    fn default() -> Self {
        ArdSeKernel {
            sigma_f: 1.0,
            lambda: [10.0, 3.0],
        }
    }
}

pub const N_HYPER: usize = 3;

impl ArdSeKernel {
    pub fn eval(&self, a: &[f64; 2], b: &[f64; 2]) -> f64 {
        self.sigma_f * self.sigma_f * (-0.5 * self.scaled_dist2(a, b)).exp()
    }

    fn scaled_dist2(&self, a: &[f64; 2], b: &[f64; 2]) -> f64 {
        let d0 = (a[0] - b[0]) / self.lambda[0];
        let d1 = (a[1] - b[1]) / self.lambda[1];
        d0 * d0 + d1 * d1
    }

    /// `(log sigma_f, log lambda_1, log lambda_2)`.
    pub fn to_log(&self) -> [f64; N_HYPER] {
        [self.sigma_f.ln(), self.lambda[0].ln(), self.lambda[1].ln()]
    }

    pub fn from_log(t: &[f64; N_HYPER]) -> Self {
        ArdSeKernel {
            sigma_f: t[0].exp(),
            lambda: [t[1].exp(), t[2].exp()],
        }
    }

    pub fn gram(&self, x: &[[f64; 2]]) -> DMatrix<f64> {
        let n = x.len();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = self.eval(&x[i], &x[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// `K[i, j] = k(a_i, b_j)`.
    pub fn cross(&self, a: &[[f64; 2]], b: &[[f64; 2]]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(&a[i], &b[j]))
    }

    /// Derivatives of the Gram matrix with respect to the log hyperparameters.
    pub fn gram_grads(&self, x: &[[f64; 2]], k: &DMatrix<f64>) -> [DMatrix<f64>; N_HYPER] {
        let n = x.len();
        let d_sf = k * 2.0;
        let mut d_l0 = DMatrix::zeros(n, n);
        let mut d_l1 = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                let r0 = (x[i][0] - x[j][0]) / self.lambda[0];
                let r1 = (x[i][1] - x[j][1]) / self.lambda[1];
                d_l0[(i, j)] = k[(i, j)] * r0 * r0;
                d_l1[(i, j)] = k[(i, j)] * r1 * r1;
            }
        }
        [d_sf, d_l0, d_l1]
    }
}
