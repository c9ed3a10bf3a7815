use std::collections::HashMap;

use crate::float::{gemm, Float, MatView};
use crate::kernels::attention::{attention_backward, attention_forward, AttnGeom};
use crate::kernels::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::kernels::norm::{normalize_rows, normalize_rows_backward, NormStats};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Square(Var),
    Silu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Clamp(Var, T, T),
    /// `x + y` with `y` broadcast over the leading dimensions of `x`.
    AddTrailing(Var, Var),
    /// `[B, D] -> [B, L, D]`.
    ExpandTokens(Var, usize),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2x(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: NormStats<T> },
    LayerNorm { x: Var, affine: Option<(Var, Var)>, stats: NormStats<T> },
    Attention { qkv: Var, heads: usize, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Patchify { x: Var, p: usize },
    Unpatchify { x: Var, p: usize },
    SumAll(Var),
    MeanAll(Var),
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations supporting one reverse pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn patchify_data<T: Float>(x: &[T], b: usize, c: usize, h: usize, w: usize, p: usize, inverse: bool) -> Vec<T> {
    let n = (h / p) * (w / p);
    let f = c * p * p;
    let gw = w / p;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let img = ((bi * c + ch) * h + y) * w + xx;
                    let tok = (y / p) * gw + xx / p;
                    let feat = (ch * p + y % p) * p + xx % p;
                    let pat = (bi * n + tok) * f + feat;
                    if inverse {
                        out[img] = x[pat];
                    } else {
                        out[pat] = x[img];
                    }
                }
            }
        }
    }
    out
}

fn gelu_parts<T: Float>(x: T) -> (T, T) {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * a * x * x);
    (y, dy)
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is retained by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Register (once) and return the leaf for a trainable parameter.
    pub fn param(&mut self, set: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: set.get(id).clone(), op: Op::Param, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu_parts(x).0);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::c(lo), T::c(hi));
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn add_trailing(&mut self, x: Var, y: Var) -> Var {
        let (xs, ys) = (self.shape(x), self.shape(y));
        assert!(xs.len() >= ys.len() && xs[xs.len() - ys.len()..] == *ys, "add_trailing: {xs:?} vs {ys:?}");
        let yv = self.value(y).data();
        let n = yv.len();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(yv) {
                *o += b;
            }
        }
        self.push(out, Op::AddTrailing(x, y), &[x, y])
    }

    pub fn expand_tokens(&mut self, v: Var, len: usize) -> Var {
        let s = self.shape(v).to_vec();
        assert_eq!(s.len(), 2, "expand_tokens expects [B, D]");
        let (b, d) = (s[0], s[1]);
        let src = self.value(v).data();
        let mut out = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            for _ in 0..len {
                out.extend_from_slice(&src[bi * d..(bi + 1) * d]);
            }
        }
        self.push(Tensor::from_vec(&[b, len, d], out), Op::ExpandTokens(v, len), &[v])
    }

    // ---- linear algebra ---------------------------------------------

    /// `x[..., k] @ w[k, n] (+ b[n])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        let (k, n) = (ws[0], ws[1]);
        assert_eq!(*xs.last().expect("non-scalar input"), k, "linear: {xs:?} @ {ws:?}");
        let m = self.value(x).numel() / k;
        let mut out = vec![T::zero(); m * n];
        let mut beta = T::zero();
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), n);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
            beta = T::one();
        }
        gemm(m, k, n, T::one(), self.value(x).data(), MatView::row_major(k), self.value(w).data(), MatView::row_major(n), beta, &mut out, MatView::row_major(n));
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, &inputs)
    }

    /// NCHW convolution with square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O, I, k, k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        let geom = ConvGeom { cin: xs[1], h: xs[2], w: xs[3], cout: ws[0], k: ws[2], stride, pad };
        let (ho, wo) = geom.out_hw();
        let out = conv2d_forward(&geom, xs[0], self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::from_vec(&[xs[0], geom.cout, ho, wo], out), Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len() * 4];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out), Op::Upsample2x(x), &[x])
    }

    // ---- normalization ------------------------------------------------

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let c = s[1];
        assert_eq!(c % groups, 0, "group_norm: {c} channels not divisible into {groups} groups");
        let hw: usize = s[2..].iter().product();
        let group_len = (c / groups) * hw;
        let (mut y, stats) = normalize_rows(self.value(x).data(), group_len, eps);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        for (i, plane) in y.chunks_mut(hw).enumerate() {
            let ch = i % c;
            for v in plane.iter_mut() {
                *v = *v * g[ch] + bt[ch];
            }
        }
        self.push(Tensor::from_vec(&s, y), Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta])
    }

    /// Layer norm over the last dimension, with optional `(gamma, beta)`.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        let (mut y, stats) = normalize_rows(self.value(x).data(), d, eps);
        let mut inputs = vec![x];
        if let Some((g, b)) = affine {
            let (gv, bv) = (self.value(g).data(), self.value(b).data());
            for row in y.chunks_mut(d) {
                for ((v, &gg), &bb) in row.iter_mut().zip(gv).zip(bv) {
                    *v = *v * gg + bb;
                }
            }
            inputs.extend([g, b]);
        }
        self.push(Tensor::from_vec(&s, y), Op::LayerNorm { x, affine, stats }, &inputs)
    }

    // ---- attention / embedding ---------------------------------------

    /// Multi-head self-attention over packed `qkv: [B, L, 3D]` → `[B, L, D]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let s = self.shape(qkv).to_vec();
        assert_eq!(s.len(), 3);
        assert_eq!(s[2] % 3, 0);
        let d = s[2] / 3;
        assert_eq!(d % heads, 0, "attention: dim {d} not divisible by {heads} heads");
        let geom = AttnGeom { batch: s[0], len: s[1], dim: d, heads };
        let (out, probs) = attention_forward(&geom, self.value(qkv).data());
        self.push(Tensor::from_vec(&[s[0], s[1], d], out), Op::Attention { qkv, heads, probs }, &[qkv])
    }

    /// Row gather `table[V, D]` at `ids` → `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let s = self.shape(table).to_vec();
        let d = s[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < s[0], "embedding id {i} out of vocabulary {}", s[0]);
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(Tensor::from_vec(&[ids.len(), d], out), Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        self.push(v, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        let first = self.shape(inputs[0]).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len());
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::from_vec(&shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[axis], "narrow out of range");
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::from_vec(&shape, out), Op::Narrow { x, axis, start }, &[x])
    }

    /// `[B, C, H, W] -> [B, (H/p)(W/p), C p p]`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % p == 0 && w % p == 0, "patchify: {h}x{w} not divisible by {p}");
        let out = patchify_data(self.value(x).data(), b, c, h, w, p, false);
        self.push(Tensor::from_vec(&[b, (h / p) * (w / p), c * p * p], out), Op::Patchify { x, p }, &[x])
    }

    /// Inverse of [`Graph::patchify`] for an image of `channels × h × w`.
    pub fn unpatchify(&mut self, x: Var, p: usize, channels: usize, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        let b = s[0];
        assert_eq!(s[1], (h / p) * (w / p), "unpatchify token count");
        assert_eq!(s[2], channels * p * p, "unpatchify feature width");
        let out = patchify_data(self.value(x).data(), b, channels, h, w, p, true);
        self.push(Tensor::from_vec(&[b, channels, h, w], out), Op::Unpatchify { x, p }, &[x])
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::c(t.numel() as f64));
        self.push(v, Op::MeanAll(x), &[x])
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let s = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
        let v = Tensor::scalar(s / T::c(av.numel() as f64));
        self.push(v, Op::Mse(a, b), &[a, b])
    }

    // ---- reverse pass -------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(node, gy, &mut grads);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, gy: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.acc(grads, *b, gy.clone());
                }
                self.acc(grads, *a, gy);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    self.acc(grads, *b, gy.map(|x| -x));
                }
                self.acc(grads, *a, gy);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, gy.zip_map(val(*b), |g, y| g * y));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, gy.zip_map(val(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, gy.map(|g| g * *s)),
            Op::AddScalar(a) => self.acc(grads, *a, gy),
            Op::Exp(a) => self.acc(grads, *a, gy.zip_map(&node.value, |g, y| g * y)),
            Op::Square(a) => self.acc(grads, *a, gy.zip_map(val(*a), |g, x| T::c(2.0) * g * x)),
            Op::Silu(a) => self.acc(
                grads,
                *a,
                gy.zip_map(val(*a), |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (T::one() - s))
                }),
            ),
            Op::Gelu(a) => self.acc(grads, *a, gy.zip_map(val(*a), |g, x| g * gelu_parts(x).1)),
            Op::Sigmoid(a) => self.acc(grads, *a, gy.zip_map(&node.value, |g, y| g * y * (T::one() - y))),
            Op::Clamp(a, lo, hi) => self.acc(
                grads,
                *a,
                gy.zip_map(val(*a), |g, x| if x >= *lo && x <= *hi { g } else { T::zero() }),
            ),
            Op::AddTrailing(x, y) => {
                if self.needs(*y) {
                    let ys = val(*y).shape().to_vec();
                    let n = val(*y).numel();
                    let mut gyy = vec![T::zero(); n];
                    for chunk in gy.data().chunks(n) {
                        for (o, &g) in gyy.iter_mut().zip(chunk) {
                            *o += g;
                        }
                    }
                    self.acc(grads, *y, Tensor::from_vec(&ys, gyy));
                }
                self.acc(grads, *x, gy);
            }
            Op::ExpandTokens(v, len) => {
                let s = val(*v).shape().to_vec();
                let d = s[1];
                let mut g = vec![T::zero(); s[0] * d];
                for (bi, block) in gy.data().chunks(len * d).enumerate() {
                    for row in block.chunks(d) {
                        for (o, &x) in g[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
                self.acc(grads, *v, Tensor::from_vec(&s, g));
            }
            Op::Linear { x, w, b } => {
                let ws = val(*w).shape();
                let (k, n) = (ws[0], ws[1]);
                let m = gy.numel() / n;
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); n];
                        for row in gy.data().chunks(n) {
                            for (o, &g) in gb.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                        self.acc(grads, *b, Tensor::from_vec(&[n], gb));
                    }
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), val(*x).data(), MatView::transposed(k), gy.data(), MatView::row_major(n), T::zero(), &mut gw, MatView::row_major(n));
                    self.acc(grads, *w, Tensor::from_vec(&[k, n], gw));
                }
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), gy.data(), MatView::row_major(n), val(*w).data(), MatView::transposed(n), T::zero(), &mut gx, MatView::row_major(k));
                    self.acc(grads, *x, Tensor::from_vec(val(*x).shape(), gx));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let batch = val(*x).shape()[0];
                let (dx, dw, db) = conv2d_backward(geom, batch, val(*x).data(), val(*w).data(), gy.data(), self.needs(*x));
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::from_vec(val(*x).shape(), dx));
                }
                self.acc(grads, *w, Tensor::from_vec(val(*w).shape(), dw));
                if let Some(b) = b {
                    self.acc(grads, *b, Tensor::from_vec(&[geom.cout], db));
                }
            }
            Op::Upsample2x(x) => {
                let s = val(*x).shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let mut g = vec![T::zero(); val(*x).numel()];
                for (dst, plane) in g.chunks_mut(h * w).zip(gy.data().chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += plane[y * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&s, g));
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let s = val(*x).shape().to_vec();
                let c = s[1];
                let hw: usize = s[2..].iter().product();
                let xv = val(*x).data();
                let gv = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); xv.len()];
                let group_len = (c / groups) * hw;
                for (i, (plane, gplane)) in xv.chunks(hw).zip(gy.data().chunks(hw)).enumerate() {
                    let ch = i % c;
                    let row = (i * hw) / group_len;
                    let (mu, rs) = (stats.mean[row], stats.rstd[row]);
                    for (j, (&xx, &g)) in plane.iter().zip(gplane).enumerate() {
                        let xhat = (xx - mu) * rs;
                        dgamma[ch] += g * xhat;
                        dbeta[ch] += g;
                        dxhat[i * hw + j] = g * gv[ch];
                    }
                }
                if self.needs(*x) {
                    let dx = normalize_rows_backward(xv, group_len, stats, &dxhat);
                    self.acc(grads, *x, Tensor::from_vec(&s, dx));
                }
                self.acc(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                self.acc(grads, *beta, Tensor::from_vec(&[c], dbeta));
            }
            Op::LayerNorm { x, affine, stats } => {
                let s = val(*x).shape().to_vec();
                let d = *s.last().unwrap();
                let xv = val(*x).data();
                let dxhat = match affine {
                    None => gy.data().to_vec(),
                    Some((g, b)) => {
                        let gv = val(*g).data();
                        let mut dg = vec![T::zero(); d];
                        let mut db = vec![T::zero(); d];
                        let mut dxhat = vec![T::zero(); xv.len()];
                        for (r, (xr, gr)) in xv.chunks(d).zip(gy.data().chunks(d)).enumerate() {
                            let (mu, rs) = (stats.mean[r], stats.rstd[r]);
                            for j in 0..d {
                                let xhat = (xr[j] - mu) * rs;
                                dg[j] += gr[j] * xhat;
                                db[j] += gr[j];
                                dxhat[r * d + j] = gr[j] * gv[j];
                            }
                        }
                        self.acc(grads, *g, Tensor::from_vec(&[d], dg));
                        self.acc(grads, *b, Tensor::from_vec(&[d], db));
                        dxhat
                    }
                };
                if self.needs(*x) {
                    let dx = normalize_rows_backward(xv, d, stats, &dxhat);
                    self.acc(grads, *x, Tensor::from_vec(&s, dx));
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let s = val(*qkv).shape();
                let geom = AttnGeom { batch: s[0], len: s[1], dim: s[2] / 3, heads: *heads };
                let d = attention_backward(&geom, val(*qkv).data(), probs, gy.data());
                self.acc(grads, *qkv, Tensor::from_vec(s, d));
            }
            Op::Embedding { table, ids } => {
                let s = val(*table).shape().to_vec();
                let d = s[1];
                let mut g = vec![T::zero(); s[0] * d];
                for (row, &i) in gy.data().chunks(d).zip(ids) {
                    for (o, &x) in g[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *o += x;
                    }
                }
                self.acc(grads, *table, Tensor::from_vec(&s, g));
            }
            Op::Reshape(x) => {
                let s = val(*x).shape().to_vec();
                self.acc(grads, *x, gy.reshape(&s));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut g = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            g.extend_from_slice(&gy.data()[(o * total + offset) * inner..(o * total + offset + n) * inner]);
                        }
                        self.acc(grads, v, Tensor::from_vec(self.shape(v), g));
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = val(*x).shape().to_vec();
                let (outer, n, inner) = split_axis(&s, *axis);
                let len = node.value.shape()[*axis];
                let mut g = vec![T::zero(); val(*x).numel()];
                for o in 0..outer {
                    g[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, Tensor::from_vec(&s, g));
            }
            Op::Patchify { x, p } => {
                let s = val(*x).shape().to_vec();
                let g = patchify_data(gy.data(), s[0], s[1], s[2], s[3], *p, true);
                self.acc(grads, *x, Tensor::from_vec(&s, g));
            }
            Op::Unpatchify { x, p } => {
                let s = node.value.shape();
                let g = patchify_data(gy.data(), s[0], s[1], s[2], s[3], *p, false);
                self.acc(grads, *x, Tensor::from_vec(val(*x).shape(), g));
            }
            Op::SumAll(x) => {
                let g = gy.item();
                self.acc(grads, *x, Tensor::full(val(*x).shape(), g));
            }
            Op::MeanAll(x) => {
                let g = gy.item() / T::c(val(*x).numel() as f64);
                self.acc(grads, *x, Tensor::full(val(*x).shape(), g));
            }
            Op::Mse(a, b) => {
                let scale = T::c(2.0) * gy.item() / T::c(val(*a).numel() as f64);
                let diff = val(*a).zip_map(val(*b), |x, y| (x - y) * scale);
                if self.needs(*b) {
                    self.acc(grads, *b, diff.map(|x| -x));
                }
                self.acc(grads, *a, diff);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::input`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients aligned with `set` (None for unused parameters).
    pub fn for_params(mut self, set: &ParamSet<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..set.len()).map(|_| None).collect();
        for (id, v) in std::mem::take(&mut self.params) {
            if id.0 < out.len() {
                out[id.0] = self.grads[v.0].take();
            }
        }
        out
    }
}
