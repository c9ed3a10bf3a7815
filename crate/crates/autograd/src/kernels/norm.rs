//! Group and layer normalization kernels.

use crate::float::Float;

pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalize contiguous `rows` of `len` elements; `y = (x - mean) * rstd`.
pub fn normalize_rows<T: Float>(x: &[T], len: usize, eps: f64) -> (Vec<T>, NormStats<T>) {
    let rows = x.len() / len;
    let mut y = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let n = T::c(len as f64);
    for (xr, yr) in x.chunks(len).zip(y.chunks_mut(len)) {
        let mu = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let rs = T::one() / (var + T::c(eps)).sqrt();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - mu) * rs;
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (y, NormStats { mean, rstd })
}

/// Backward through `xhat = (x - mean) * rstd` for each row, given `dxhat`.
pub fn normalize_rows_backward<T: Float>(x: &[T], len: usize, stats: &NormStats<T>, dxhat: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    let n = T::c(len as f64);
    for (r, ((xr, gr), dr)) in x.chunks(len).zip(dxhat.chunks(len)).zip(dx.chunks_mut(len)).enumerate() {
        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&xv, &g) in xr.iter().zip(gr) {
            sum_g += g;
            sum_gx += g * (xv - mu) * rs;
        }
        let (mg, mgx) = (sum_g / n, sum_gx / n);
        for ((o, &xv), &g) in dr.iter_mut().zip(xr).zip(gr) {
            *o = rs * (g - mg - (xv - mu) * rs * mgx);
        }
    }
    dx
}
