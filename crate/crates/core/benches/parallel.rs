use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synweather_autograd::Tensor;
use synweather_core::diffusion::{build_schedule, ddim_sample, DdimSettings};
use synweather_core::metrics::{pooled_csi_arrays, ssim_arrays};
use synweather_core::par::{map_range_par, map_range_seq};
use synweather_core::preprocess::has_large_component;
use synweather_core::synthgen::{gen_scene, SceneConfig};
use synweather_core::{RegionId, RngPolicy};

type Mapper = fn(usize, &(dyn Fn(usize) -> f64 + Sync + Send)) -> Vec<f64>;

fn seq(n: usize, f: &(dyn Fn(usize) -> f64 + Sync + Send)) -> Vec<f64> {
    map_range_seq(n, f)
}

fn par(n: usize, f: &(dyn Fn(usize) -> f64 + Sync + Send)) -> Vec<f64> {
    map_range_par(n, f)
}

const MODES: [(&str, Mapper); 2] = [("sequential", seq), ("parallel", par)];

fn fields(n: usize, size: usize) -> Vec<Array2<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n).map(|_| Array2::from_shape_simple_fn((size, size), || if rng.random::<f32>() < 0.4 { rng.random_range(0.0..60.0) } else { 0.0 })).collect()
}

fn bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("scenes");
    g.sample_size(10);
    for (name, map) in MODES {
        g.bench_function(BenchmarkId::new(name, 8), |b| {
            b.iter(|| {
                map(8, &|i| {
                    let cfg = SceneConfig { seed: i as u64, ..SceneConfig::default() };
                    gen_scene(&cfg, RegionId::Conus).unwrap().intensity.sum() as f64
                })
            })
        });
    }
    g.finish();

    let (pred, gt) = (fields(64, 64), fields(64, 64));
    let mut g = c.benchmark_group("metrics");
    for (name, map) in MODES {
        g.bench_function(BenchmarkId::new(name, 64), |b| {
            b.iter(|| {
                map(64, &|i| {
                    let csi = pooled_csi_arrays(pred[i].view(), gt[i].view(), 35.0, 4).unwrap().unwrap_or(0.0);
                    csi + ssim_arrays(pred[i].view(), gt[i].view(), 70.0).unwrap()
                })
            })
        });
    }
    g.finish();

    let patches = fields(256, 64);
    let mut g = c.benchmark_group("filter");
    for (name, map) in MODES {
        g.bench_function(BenchmarkId::new(name, 256), |b| b.iter(|| map(256, &|i| has_large_component(patches[i].view(), 8.0, 600) as u8 as f64)));
    }
    g.finish();

    let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
    let policy = RngPolicy::new(0);
    let predictor = |z: &Tensor<f32>, t: usize| Ok(z.map(|v| v * (t as f32 / 1000.0).sqrt()));
    let mut g = c.benchmark_group("ddim_tiles");
    for (name, map) in MODES {
        g.bench_function(BenchmarkId::new(name, 24), |b| {
            b.iter(|| {
                map(24, &|i| {
                    let z = ddim_sample(&predictor, &[1, 4, 32, 32], &sched, &DdimSettings::default(), &mut policy.stream("init", i as u64), &mut policy.stream("step", i as u64)).unwrap();
                    z.sum() as f64
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
