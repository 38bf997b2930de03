use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

const MAX_ESCALATIONS: usize = 8;

/// Cholesky factor of `k + jitter I`, multiplying the jitter by ten on each
/// failure. Returns the factor and the jitter that succeeded.
pub fn cholesky_jitter(k: &DMatrix<f64>, jitter: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mut j = jitter.max(0.0);
    for _ in 0..=MAX_ESCALATIONS {
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += j;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok((c, j));
        }
        j = if j > 0.0 { j * 10.0 } else { 1e-10 };
    }
    let diag = k.diagonal();
    Err(Error::Factorization {
        jitter: j / 10.0,
        n,
        min_diag: diag.iter().copied().fold(f64::INFINITY, f64::min),
        max_diag: diag.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

pub fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}
