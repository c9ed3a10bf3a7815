//! Oracles shared by the integration suites.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use synweather_autograd::{ParamId, ParamSet, Tensor};

/// Union-find labeling of 4-connected pixels `> t`; returns the largest component size.
pub fn largest_component(x: &Array2<f32>, t: f32) -> usize {
    let (h, w) = x.dim();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let on = |r: usize, c: usize| x[[r, c]] > t;
    for r in 0..h {
        for c in 0..w {
            if !on(r, c) {
                continue;
            }
            for (rr, cc) in [(r + 1, c), (r, c + 1)] {
                if rr < h && cc < w && on(rr, cc) {
                    let (a, b) = (find(&mut parent, r * w + c), find(&mut parent, rr * w + cc));
                    parent[a] = b;
                }
            }
        }
    }
    let mut sizes = vec![0usize; h * w];
    for i in 0..h * w {
        if on(i / w, i % w) {
            let root = find(&mut parent, i);
            sizes[root] += 1;
        }
    }
    sizes.into_iter().max().unwrap_or(0)
}

pub struct GradReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

/// Central differences on `samples` random scalar entries, compared with `analytic`.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn check_gradients(
    params: &mut ParamSet<f64>,
    analytic: &[Option<Tensor<f64>>],
    loss: impl Fn(&ParamSet<f64>) -> f64,
    samples: usize,
    step: f64,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> GradReport {
    let ids: Vec<(ParamId, usize)> = params.iter().map(|(id, _, t)| (id, t.numel())).collect();
    let total: usize = ids.iter().map(|x| x.1).sum();
    let mut report = GradReport { checked: 0, worst_rel: 0.0, failures: Vec::new() };
    for _ in 0..samples {
        let mut k = rng.random_range(0..total);
        let (id, idx) = ids
            .iter()
            .find_map(|&(id, n)| {
                if k < n {
                    Some((id, k))
                } else {
                    k -= n;
                    None
                }
            })
            .unwrap();
        let orig = params.get(id).data()[idx];
        params.get_mut(id).data_mut()[idx] = orig + step;
        let up = loss(params);
        params.get_mut(id).data_mut()[idx] = orig - step;
        let down = loss(params);
        params.get_mut(id).data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[id.0].as_ref().map_or(0.0, |g| g.data()[idx]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        report.checked += 1;
        report.worst_rel = report.worst_rel.max(rel);
        if rel >= tol {
            report.failures.push(format!("{}[{idx}]: analytic {a:e} vs numeric {numeric:e}", params.name(id)));
        }
    }
    report
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| StandardNormal.sample(rng)).collect())
}

/// Tiny-preset autoencoder objective (reconstruction + KL with fixed reparameterization noise).
pub fn autoencoder_gradients(samples: usize, seed: u64) -> GradReport {
    use rand::SeedableRng;
    use synweather_autograd::Graph;
    use synweather_core::autoencoder::{ae_objective_graph, AeConfig, AeLossWeights, Autoencoder};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ae = Autoencoder::<f64>::new(AeConfig::tiny(), &mut rng).unwrap();
    let x = Tensor::from_vec(&[1, 1, 16, 16], (0..256).map(|_| rng.random::<f64>()).collect());
    let eps = normal(&ae.latent_shape(x.shape()), &mut rng);
    let w = AeLossWeights { rec: 1.0, kl: 1e-2, adv: 0.0 };
    let config = ae.config.clone();
    let value = |model: &Autoencoder<f64>| {
        let mut g = Graph::new();
        let v = ae_objective_graph(model, &mut g, &x, &eps, &w);
        (g, v.total)
    };
    let (g, l) = value(&ae);
    let grads = g.backward(l).for_params(&ae.params);
    let loss = |p: &ParamSet<f64>| {
        let (g, l) = value(&Autoencoder { config: config.clone(), params: p.clone() });
        g.value(l).item()
    };
    check_gradients(&mut ae.params, &grads, loss, samples, FD_STEP, FD_REL_TOL, &mut rng)
}

/// Tiny-preset denoiser objective: ε-prediction MSE through encoder, prompt embedder and transformer.
pub fn denoiser_gradients(samples: usize, seed: u64) -> GradReport {
    use rand::SeedableRng;
    use synweather_autograd::Graph;
    use synweather_core::diffusion::{add_noise_batch, build_schedule};
    use synweather_core::dit::{render_prompt, Denoiser, DitConfig};
    use synweather_core::training::dit_loss_graph;
    use synweather_core::{RegionId, VariableId};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dit = Denoiser::<f64>::new(DitConfig::tiny(), &mut rng).unwrap();
    let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
    let stacks = Tensor::from_vec(&[2, 10, 32, 32], (0..2 * 10 * 1024).map(|_| rng.random::<f64>()).collect());
    let z0 = normal(&[2, 4, 4, 4], &mut rng);
    let eps = normal(&[2, 4, 4, 4], &mut rng);
    let t = [37, 640];
    let z_t = add_noise_batch(&z0, &t, &eps, &sched).unwrap();
    let prompt = render_prompt(RegionId::Conus, VariableId::Cr).token_ids;
    let config = dit.config.clone();
    let mut g = Graph::new();
    let l = dit_loss_graph(&dit, &mut g, &stacks, &z_t, &t, &eps, &prompt);
    let grads = g.backward(l).for_params(&dit.params);
    let loss = |p: &ParamSet<f64>| {
        let model = Denoiser { config: config.clone(), params: p.clone() };
        let mut g = Graph::new();
        let l = dit_loss_graph(&model, &mut g, &stacks, &z_t, &t, &eps, &prompt);
        g.value(l).item()
    };
    check_gradients(&mut dit.params, &grads, loss, samples, FD_STEP, FD_REL_TOL, &mut rng)
}
