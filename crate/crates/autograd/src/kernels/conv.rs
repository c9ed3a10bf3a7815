//! 2-D convolution by im2col + GEMM, NCHW layout.

use crate::float::{gemm, Float, MatView};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Float>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [B, cin, h, w]`, `w: [cout, cin, k, k]`, `b: [cout]` → `[B, cout, ho, wo]`.
pub fn conv2d_forward<T: Float>(g: &ConvGeom, batch: usize, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let rows = g.col_rows();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * hw;
    let mut out = vec![T::zero(); batch * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * hw] };
    for bi in 0..batch {
        let xb = &x[bi * in_sz..(bi + 1) * in_sz];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        let ob = &mut out[bi * out_sz..(bi + 1) * out_sz];
        if let Some(b) = b {
            for (co, chunk) in ob.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(g.cout, rows, hw, T::one(), w, MatView::row_major(rows), src, MatView::row_major(hw), beta, ob, MatView::row_major(hw));
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` only when `need_dx`.
pub fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let rows = g.col_rows();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * hw;
    let mut dw = vec![T::zero(); g.cout * rows];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| vec![T::zero(); batch * in_sz]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * hw] };
    let mut dcols = if need_dx && !g.is_pointwise() { vec![T::zero(); rows * hw] } else { Vec::new() };
    for bi in 0..batch {
        let xb = &x[bi * in_sz..(bi + 1) * in_sz];
        let dyb = &dy[bi * out_sz..(bi + 1) * out_sz];
        for (co, chunk) in dyb.chunks(hw).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        // dW[cout, rows] += dY[cout, hw] * cols^T[hw, rows]
        gemm(g.cout, hw, rows, T::one(), dyb, MatView::row_major(hw), src, MatView::transposed(hw), T::one(), &mut dw, MatView::row_major(rows));
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[bi * in_sz..(bi + 1) * in_sz];
            if g.is_pointwise() {
                gemm(rows, g.cout, hw, T::one(), w, MatView::transposed(rows), dyb, MatView::row_major(hw), T::zero(), dxb, MatView::row_major(hw));
            } else {
                gemm(rows, g.cout, hw, T::one(), w, MatView::transposed(rows), dyb, MatView::row_major(hw), T::zero(), &mut dcols, MatView::row_major(hw));
                col2im_add(g, &dcols, dxb);
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; g.cout * ho * wo];
        for co in 0..g.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[co];
                    for c in 0..g.cin {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    s += w[((co * g.cin + c) * g.k + ki) * g.k + kj] * x[(c * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let g = ConvGeom { cin: 2, h: 7, w: 6, cout: 3, k, stride, pad };
            let x: Vec<f64> = (0..2 * 7 * 6).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 13 % 7) as f64 - 3.0) / 4.0).collect();
            let b = vec![0.1, -0.2, 0.3];
            let got = conv2d_forward(&g, 1, &x, &w, Some(&b));
            let want = naive(&g, &x, &w, &b);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }
}
