//! Fused multi-head self-attention over a packed `[B, L, 3D]` q|k|v tensor.

use crate::float::{gemm, Float, MatView};

pub struct AttnGeom {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

fn softmax_rows<T: Float>(s: &mut [T], len: usize) {
    for row in s.chunks_mut(len) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
}

/// Returns `(out [B, L, D], probs [B, H, L, L])`.
pub fn attention_forward<T: Float>(g: &AttnGeom, qkv: &[T]) -> (Vec<T>, Vec<T>) {
    let (l, d, dh) = (g.len, g.dim, g.head_dim());
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); g.batch * l * d];
    let mut probs = vec![T::zero(); g.batch * g.heads * l * l];
    for b in 0..g.batch {
        let base = b * l * 3 * d;
        for h in 0..g.heads {
            let p = &mut probs[(b * g.heads + h) * l * l..][..l * l];
            let q = MatView { offset: base + h * dh, rs: 3 * d, cs: 1 };
            // K^T view: element (i, j) = K[j, i]
            let kt = MatView { offset: base + d + h * dh, rs: 1, cs: 3 * d };
            gemm(l, dh, l, scale, qkv, q, qkv, kt, T::zero(), p, MatView::row_major(l));
            softmax_rows(p, l);
            let v = MatView { offset: base + 2 * d + h * dh, rs: 3 * d, cs: 1 };
            let o = MatView { offset: b * l * d + h * dh, rs: d, cs: 1 };
            gemm(l, l, dh, T::one(), p, MatView::row_major(l), qkv, v, T::zero(), &mut out, o);
        }
    }
    (out, probs)
}

pub fn attention_backward<T: Float>(g: &AttnGeom, qkv: &[T], probs: &[T], dout: &[T]) -> Vec<T> {
    let (l, d, dh) = (g.len, g.dim, g.head_dim());
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut ds = vec![T::zero(); l * l];
    for b in 0..g.batch {
        let base = b * l * 3 * d;
        for h in 0..g.heads {
            let p = &probs[(b * g.heads + h) * l * l..][..l * l];
            let dov = MatView { offset: b * l * d + h * dh, rs: d, cs: 1 };
            // dV = P^T dO
            let dv = MatView { offset: base + 2 * d + h * dh, rs: 3 * d, cs: 1 };
            gemm(l, l, dh, T::one(), p, MatView::transposed(l), dout, dov, T::zero(), &mut dqkv, dv);
            // dP = dO V^T
            let vt = MatView { offset: base + 2 * d + h * dh, rs: 1, cs: 3 * d };
            gemm(l, dh, l, T::one(), dout, dov, qkv, vt, T::zero(), &mut ds, MatView::row_major(l));
            // dS = P * (dP - rowsum(dP * P))
            for (dr, pr) in ds.chunks_mut(l).zip(p.chunks(l)) {
                let dot = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot);
                }
            }
            // dQ = dS K * scale ; dK = dS^T Q * scale
            let k = MatView { offset: base + d + h * dh, rs: 3 * d, cs: 1 };
            let q = MatView { offset: base + h * dh, rs: 3 * d, cs: 1 };
            let dq = MatView { offset: base + h * dh, rs: 3 * d, cs: 1 };
            let dk = MatView { offset: base + d + h * dh, rs: 3 * d, cs: 1 };
            gemm(l, l, dh, scale, &ds, MatView::row_major(l), qkv, k, T::zero(), &mut dqkv, dq);
            gemm(l, l, dh, scale, &ds, MatView::transposed(l), qkv, q, T::zero(), &mut dqkv, dk);
        }
    }
    dqkv
}
