//! Training loop contracts on a small synthetic dataset: reproducibility, zero-step identity,
//! fine-tune optimizer reset, baseline determinism and the ablation harness.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synweather_autograd::ParamSet;
use synweather_core::autoencoder::{AeConfig, Autoencoder};
use synweather_core::config::RunConfig;
use synweather_core::diffusion::DiffusionSchedule;
use synweather_core::dit::{DitConfig, Denoiser, SatEncoderConfig};
use synweather_core::metrics::MetricsConfig;
use synweather_core::synthesis::{synthesize_field, FieldModel, SynthesisSettings};
use synweather_core::synthgen::{gen_dataset, ChannelGroup, SceneConfig};
use synweather_core::training::*;
use synweather_core::*;

const CR: Task = Task { region: RegionId::Conus, variable: VariableId::Cr };
const PRECIP: Task = Task { region: RegionId::Conus, variable: VariableId::Precipitation };

struct Fixture {
    _dir: tempfile::TempDir,
    manifest: Manifest,
    data: DataConfig,
    sched: DiffusionSchedule,
}

fn fixture() -> Fixture {
    let cfg = RunConfig::tiny();
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(&cfg.scene_config(), 20, dir.path(), &cfg.gen.options).unwrap();
    let data = DataConfig { filter: false, ..DataConfig::tiny() };
    Fixture { _dir: dir, manifest, data, sched: cfg.schedule().unwrap() }
}

fn small_dit() -> DitConfig {
    DitConfig {
        hidden: 32,
        depth: 1,
        heads: 2,
        freq_dim: 32,
        encoder: SatEncoderConfig { hidden: 32, depth: 1, heads: 2, ..DitConfig::tiny().encoder },
        ..DitConfig::tiny()
    }
}

fn models() -> (Autoencoder<f32>, Denoiser<f32>) {
    let ae = Autoencoder::new(AeConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let dit = Denoiser::new(small_dit(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    (ae, dit)
}

fn same_params(a: &ParamSet<f32>, b: &ParamSet<f32>) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| x.1 == y.1 && x.2 == y.2)
}

fn stage(steps: usize) -> StageConfig {
    StageConfig { steps, batch: 4 }
}

#[test]
fn dit_training_is_reproducible_and_zero_steps_is_identity() {
    let fx = fixture();
    let train = BTreeMap::from([(CR, load_task_data(&fx.manifest, CR, Split::Train, &fx.data).unwrap())]);
    let tasks = task_set(&[CR], TaskPreset::Uniform, None).unwrap();
    let policy = RngPolicy::new(5);
    let optim = OptimConfig::for_steps(4);

    let (ae, init) = models();
    let mut a = init.clone();
    let zero = train_dit(&mut a, &ae, &tasks, &train, &fx.sched, &stage(0), &optim, &policy).unwrap();
    assert!(zero.curve.rows.is_empty());
    assert!(same_params(&a.params, &init.params));

    let run = || {
        let mut m = init.clone();
        let out = train_dit(&mut m, &ae, &tasks, &train, &fx.sched, &stage(4), &optim, &policy).unwrap();
        (m, out.curve)
    };
    let (m1, c1) = run();
    let (m2, c2) = run();
    assert_eq!(c1, c2);
    assert!(same_params(&m1.params, &m2.params));
    assert!(!same_params(&m1.params, &init.params));
    assert!(c1.to_csv().unwrap().starts_with("step,task,loss,lr\n1,CONUS:CR,"));

    let both = task_set(&[CR, PRECIP], TaskPreset::Uniform, None).unwrap();
    let err = train_dit(&mut init.clone(), &ae, &both, &train, &fx.sched, &stage(1), &optim, &policy).unwrap_err();
    assert!(matches!(err, Error::MissingData(ref m) if m.contains("CONUS:Precipitation")));
}

#[test]
fn finetune_resets_optimizer_and_lowers_heldout_loss() {
    let fx = fixture();
    let cr = load_task_data(&fx.manifest, CR, Split::Train, &fx.data).unwrap();
    let precip_train = load_task_data(&fx.manifest, PRECIP, Split::Train, &fx.data).unwrap();
    let precip_valid = load_task_data(&fx.manifest, PRECIP, Split::Valid, &fx.data).unwrap();
    let (ae, mut dit) = models();
    let optim = OptimConfig { lr_max: 2e-3, ..OptimConfig::for_steps(40) };
    let tasks = task_set(&[CR], TaskPreset::Uniform, None).unwrap();
    let pre = train_dit(&mut dit, &ae, &tasks, &BTreeMap::from([(CR, cr)]), &fx.sched, &stage(40), &optim, &RngPolicy::new(1)).unwrap();
    assert_eq!(pre.optimizer.steps_taken(), 40);

    let before = heldout_loss(&dit, &ae, &precip_valid, &fx.sched, 8, 8, 99).unwrap();
    let mut unchanged = dit.clone();
    finetune(&mut unchanged, &ae, &precip_train, &fx.sched, &stage(0), &optim, &RngPolicy::new(2)).unwrap();
    assert!(same_params(&unchanged.params, &dit.params));

    let out = finetune(&mut dit, &ae, &precip_train, &fx.sched, &stage(40), &optim, &RngPolicy::new(2)).unwrap();
    assert_eq!(out.optimizer.steps_taken(), 40);
    assert!(out.curve.rows.iter().all(|r| r.task == "CONUS:Precipitation"));
    let after = heldout_loss(&dit, &ae, &precip_valid, &fx.sched, 8, 8, 99).unwrap();
    assert!(after <= before, "held-out loss rose from {before} to {after}");
}

fn mean_mse(model: &Regressor<f32>, data: &TaskData) -> f64 {
    let errs: Vec<f64> = data
        .samples
        .iter()
        .map(|s| {
            let p = model.predict_window(&s.stack, data.task, 0).unwrap();
            p.iter().zip(s.target.iter()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / p.len() as f64
        })
        .collect();
    errs.iter().sum::<f64>() / errs.len() as f64
}

#[test]
fn baseline_is_deterministic_and_learns() {
    let fx = fixture();
    let train = load_task_data(&fx.manifest, CR, Split::Train, &fx.data).unwrap();
    let make = || Regressor::<f32>::new(RegressorConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let optim = OptimConfig { lr_max: 2e-3, ..OptimConfig::for_steps(150) };
    let init_mse = mean_mse(&make(), &train);
    let mut a = make();
    let mut b = make();
    let st = StageConfig { steps: 150, batch: 8 };
    baseline_train(&mut a, &train, &st, &optim, &RngPolicy::new(4)).unwrap();
    baseline_train(&mut b, &train, &st, &optim, &RngPolicy::new(4)).unwrap();
    assert!(same_params(&a.params, &b.params));
    let trained_mse = mean_mse(&a, &train);
    assert!(trained_mse <= 0.5 * init_mse, "baseline MSE {trained_mse} vs init {init_mse}");
    let s = &train.samples[0].stack;
    assert_eq!(a.predict_window(s, CR, 1).unwrap(), a.predict_window(s, CR, 2).unwrap());
}

#[test]
fn synthesis_covers_a_grid_larger_than_the_window() {
    let model = Regressor::<f32>::new(RegressorConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let scene = synthgen::gen_scene(&SceneConfig { grid: (96, 128), ..SceneConfig::default() }, RegionId::Conus).unwrap();
    let data = DataConfig::tiny();
    let settings = SynthesisSettings { window: 64, stride: 32, seed: 0 };
    let out = synthesize_field(&model, &scene.stack, CR, data.norms.get(VariableId::Cr).unwrap(), &data.stack_norm, &[], &settings).unwrap();
    assert_eq!(out.field.shape(), (96, 128));
    assert!(out.coverage.iter().all(|&c| c));
    assert!(!out.field.normalized);
    assert!(out.field.data.iter().all(|&v| (0.0..=70.0).contains(&v)));
    let wrong = Task { region: RegionId::Europe, variable: VariableId::Cr };
    assert!(synthesize_field(&model, &scene.stack, wrong, data.norms.get(VariableId::Cr).unwrap(), &data.stack_norm, &[], &settings).is_err());
}

#[test]
fn ablation_masks_configured_channels_and_empty_drop_is_neutral() {
    let fx = fixture();
    let model = Regressor::<f32>::new(RegressorConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let scenes = load_eval_scenes(&fx.manifest, &[CR], Split::Test).unwrap();
    let settings = SynthesisSettings { window: 64, stride: 32, seed: 0 };
    let groups = ChannelGroups::default();
    let metrics = MetricsConfig::default();
    let none = ablate_channels(&model, &groups, None, &scenes, &fx.data, &settings, &metrics).unwrap();
    assert!(none.masked_channels.is_empty());
    assert!(none.deltas.iter().all(|d| d.delta.is_none_or(|x| x == 0.0)));
    let gas = ablate_channels(&model, &groups, Some(ChannelGroup::Gas), &scenes, &fx.data, &settings, &metrics).unwrap();
    assert_eq!(gas.masked_channels, vec![5, 9]);
    let mut partial = groups.clone();
    partial.0.remove(&ChannelGroup::Gas);
    assert!(ablate_channels(&model, &partial, Some(ChannelGroup::Wv), &scenes, &fx.data, &settings, &metrics).is_err());
}
