//! Central finite-difference checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synweather_autograd::{Graph, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Builds `f` on fresh graphs, compares analytic vs numeric gradients for all inputs.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().cloned().map(|t| g.input(t)).collect();
    let out = f(&mut g, &vars);
    // project to a scalar with fixed random weights so every output element matters
    let shape = g.shape(out).to_vec();
    let mut wrng = ChaCha8Rng::seed_from_u64(99);
    let w = rand_tensor(&mut wrng, &shape);
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv);
    let loss = g.sum_all(prod);
    let grads = g.backward(loss);

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().cloned().map(|t| g.input(t)).collect();
        let out = f(&mut g, &vars);
        g.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let h = 1e-5;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).expect("gradient present");
        for i in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(num.abs()).max(1e-6);
            assert!((a - num).abs() / denom < 1e-5, "input {k} elem {i}: analytic {a} numeric {num}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn pointwise_ops() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 3]);
    let b = rand_tensor(&mut r, &[2, 3]);
    check(vec![a.clone(), b.clone()], |g, v| {
        let x = g.mul(v[0], v[1]);
        let y = g.sub(x, v[1]);
        let z = g.add(y, v[0]);
        let s = g.scale(z, 1.7);
        g.add_scalar(s, 0.3)
    });
    check(vec![a.clone()], |g, v| g.exp(v[0]));
    check(vec![a.clone()], |g, v| g.square(v[0]));
    check(vec![a.clone()], |g, v| g.silu(v[0]));
    check(vec![a.clone()], |g, v| g.gelu(v[0]));
    check(vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check(vec![a.map(|x| x * 3.0)], |g, v| g.clamp(v[0], -1.5, 1.5));
}

#[test]
fn broadcast_and_shape_ops() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[2, 3, 4]), rand_tensor(&mut r, &[3, 4])], |g, v| g.add_trailing(v[0], v[1]));
    check(vec![rand_tensor(&mut r, &[2, 5])], |g, v| g.expand_tokens(v[0], 3));
    check(vec![rand_tensor(&mut r, &[2, 3, 4]), rand_tensor(&mut r, &[2, 1, 4])], |g, v| g.concat(&[v[0], v[1]], 1));
    check(vec![rand_tensor(&mut r, &[2, 5, 3])], |g, v| g.narrow(v[0], 1, 1, 3));
    check(vec![rand_tensor(&mut r, &[2, 3, 4, 4])], |g, v| g.patchify(v[0], 2));
    check(vec![rand_tensor(&mut r, &[2, 4, 12])], |g, v| g.unpatchify(v[0], 2, 3, 4, 4));
    check(vec![rand_tensor(&mut r, &[2, 6])], |g, v| g.reshape(v[0], &[3, 4]));
    check(vec![rand_tensor(&mut r, &[2, 3, 3, 2])], |g, v| g.upsample2x(v[0]));
    check(vec![rand_tensor(&mut r, &[5, 4])], |g, v| g.embedding(v[0], &[0, 3, 3, 1]));
}

#[test]
fn patchify_roundtrip_is_identity() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 3, 4, 6]);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let p = g.patchify(v, 2);
    let u = g.unpatchify(p, 2, 3, 4, 6);
    assert_eq!(g.value(u), &x);
}

#[test]
fn linear_and_reductions() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[2, 3, 4]), rand_tensor(&mut r, &[4, 5]), rand_tensor(&mut r, &[5])], |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    });
    check(vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[3, 4])], |g, v| g.mse(v[0], v[1]));
    check(vec![rand_tensor(&mut r, &[3, 4])], |g, v| g.mean_all(v[0]));
}

#[test]
fn convolution() {
    let mut r = rng();
    for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        check(
            vec![rand_tensor(&mut r, &[2, 2, 5, 4]), rand_tensor(&mut r, &[3, 2, k, k]), rand_tensor(&mut r, &[3])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), s, p),
        );
    }
}

#[test]
fn normalization() {
    let mut r = rng();
    check(
        vec![rand_tensor(&mut r, &[2, 4, 3, 3]), rand_tensor(&mut r, &[4]), rand_tensor(&mut r, &[4])],
        |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-6),
    );
    check(vec![rand_tensor(&mut r, &[2, 3, 5]), rand_tensor(&mut r, &[5]), rand_tensor(&mut r, &[5])], |g, v| {
        g.layer_norm(v[0], Some((v[1], v[2])), 1e-6)
    });
    check(vec![rand_tensor(&mut r, &[2, 3, 5])], |g, v| g.layer_norm(v[0], None, 1e-6));
}

#[test]
fn attention() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[2, 5, 12])], |g, v| g.attention(v[0], 2));
}

#[test]
fn attention_matches_naive_softmax() {
    let mut r = rng();
    let (l, d, heads) = (4, 6, 3);
    let qkv = rand_tensor(&mut r, &[1, l, 3 * d]);
    let mut g = Graph::new();
    let v = g.constant(qkv.clone());
    let o = g.attention(v, heads);
    let out = g.value(o).data().to_vec();
    let dh = d / heads;
    let q = |i: usize, j: usize| qkv.data()[i * 3 * d + j];
    for h in 0..heads {
        for i in 0..l {
            let s: Vec<f64> = (0..l)
                .map(|j| (0..dh).map(|c| q(i, h * dh + c) * q(j, d + h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for c in 0..dh {
                let want: f64 = (0..l).map(|j| (s[j] - m).exp() / z * q(j, 2 * d + h * dh + c)).sum();
                assert!((out[i * d + h * dh + c] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn shared_input_accumulates() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[3])], |g, v| {
        let a = g.mul(v[0], v[0]);
        g.add(a, v[0])
    });
}
