//! Multi-task training: task sampling, learning-rate schedule, training loops, fine-tuning,
//! the deterministic baseline and the channel-group ablation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Map;
use synweather_autograd::{clip_grad_norm, AdamW, Float, Graph, ParamSet, Tensor, Var};

use crate::autoencoder::{ae_train_step, batch_fields, batch_stacks, AeLossWeights, AeTrainer, Autoencoder};
use crate::checkpoint::{load_checkpoint, restore, save_checkpoint};
use crate::diffusion::{add_noise_batch, DiffusionSchedule};
use crate::dit::{render_prompt, Denoiser};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, Split};
use crate::metrics::{evaluate_full, EvalSample, MetricReport, MetricsConfig};
use crate::nn;
use crate::preprocess::{extract_patches, extract_stack_windows, has_large_component, FilterThresholds, NormTable, StackNorm};
use crate::rng::RngPolicy;
use crate::swt1::load_field;
use crate::synthesis::{synthesize_field, FieldModel, SynthesisSettings};
use crate::synthgen::ChannelGroup;
use crate::types::{NormState, SatelliteStack, Task, VariableId, WeatherField};

// ---- tasks -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub sampling_weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPreset {
    Uniform,
    /// Half the mass on the primary task, the rest split evenly.
    MainTask,
}

pub fn task_set(tasks: &[Task], preset: TaskPreset, primary: Option<Task>) -> Result<Vec<TaskSpec>> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("empty task list".into()));
    }
    let n = tasks.len() as f64;
    let specs: Vec<TaskSpec> = match preset {
        TaskPreset::Uniform => tasks.iter().map(|&task| TaskSpec { task, sampling_weight: 1.0 / n }).collect(),
        TaskPreset::MainTask => {
            let main = primary.unwrap_or(tasks[0]);
            if !tasks.contains(&main) {
                return Err(Error::InvalidArgument(format!("primary task {main} is not in the task list")));
            }
            let rest = if tasks.len() > 1 { 0.5 / (n - 1.0) } else { 0.0 };
            tasks
                .iter()
                .map(|&task| TaskSpec { task, sampling_weight: if task == main { if tasks.len() > 1 { 0.5 } else { 1.0 } } else { rest } })
                .collect()
        }
    };
    validate_tasks(&specs)?;
    Ok(specs)
}

pub fn validate_tasks(tasks: &[TaskSpec]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("empty task list".into()));
    }
    let total: f64 = tasks.iter().map(|t| t.sampling_weight).sum();
    if tasks.iter().any(|t| !(0.0..=1.0).contains(&t.sampling_weight)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("task weights must lie in [0, 1] and sum to 1, got {total}")));
    }
    Ok(())
}

/// Categorical draw proportional to the task weights.
pub fn sample_task<'a, R: Rng + ?Sized>(tasks: &'a [TaskSpec], rng: &mut R) -> Result<&'a TaskSpec> {
    validate_tasks(tasks)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for t in tasks {
        acc += t.sampling_weight;
        if u < acc {
            return Ok(t);
        }
    }
    Ok(tasks.iter().rev().find(|t| t.sampling_weight > 0.0).unwrap_or(&tasks[0]))
}

// ---- optimizer schedule ---------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::for_steps(1000)
    }
}

impl OptimConfig {
    /// Reference settings with a 5% warmup.
    pub fn for_steps(total_steps: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            lr_max: 5e-4,
            lr_min: 1e-5,
            warmup_steps: ((total_steps as f64) * 0.05).round() as usize,
            total_steps,
            grad_clip: Some(1.0),
        }
    }

    pub fn with_steps(&self, total_steps: usize) -> Self {
        let frac = if self.total_steps > 0 { self.warmup_steps as f64 / self.total_steps as f64 } else { 0.05 };
        Self { total_steps, warmup_steps: ((total_steps as f64) * frac).round() as usize, ..self.clone() }
    }

    pub fn optimizer<T: Float>(&self, params: &ParamSet<T>) -> AdamW<T> {
        AdamW::new(params, self.beta1, self.beta2, self.eps, self.weight_decay)
    }
}

/// Linear warmup to `lr_max`, then cosine decay to `lr_min` at `total_steps`.
pub fn lr_at(step: usize, cfg: &OptimConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond {} total steps", cfg.total_steps)));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_max * step as f64 / cfg.warmup_steps as f64);
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    let progress = if span == 0 { 1.0 } else { (step - cfg.warmup_steps) as f64 / span as f64 };
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

// ---- channel groups ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelGroups(pub BTreeMap<ChannelGroup, Vec<usize>>);

impl Default for ChannelGroups {
    fn default() -> Self {
        ChannelGroups(BTreeMap::from([
            (ChannelGroup::Swir, vec![0]),
            (ChannelGroup::Wv, vec![1, 2, 3]),
            (ChannelGroup::Lwir, vec![4, 6, 7, 8]),
            (ChannelGroup::Gas, vec![5, 9]),
        ]))
    }
}

impl ChannelGroups {
    /// Groups must be non-empty and partition `[0, channels)`.
    pub fn validate(&self, channels: usize) -> Result<()> {
        let mut seen = vec![false; channels];
        for (g, idx) in &self.0 {
            if idx.is_empty() {
                return Err(Error::Config(format!("channel group {g} is empty")));
            }
            for &i in idx {
                if i >= channels || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Config(format!("channel {i} of group {g} is out of range or repeated")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config(format!("channel groups do not cover all {channels} channels")));
        }
        Ok(())
    }

    pub fn indices(&self, group: ChannelGroup) -> Result<&[usize]> {
        self.0.get(&group).map(Vec::as_slice).ok_or_else(|| Error::InvalidArgument(format!("unknown channel group {group}")))
    }
}

// ---- data -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub window: usize,
    pub stride: usize,
    pub filter: bool,
    pub thresholds: BTreeMap<VariableId, FilterThresholds>,
    pub norms: NormTable,
    pub stack_norm: StackNorm,
}

impl DataConfig {
    pub fn reference() -> Self {
        let thresholds = VariableId::ALL.iter().filter_map(|&v| FilterThresholds::for_variable(v).map(|t| (v, t))).collect();
        Self { window: 256, stride: 128, filter: true, thresholds, norms: NormTable::default(), stack_norm: StackNorm::default() }
    }

    /// 64-pixel windows; component areas shrink with the window area.
    pub fn tiny() -> Self {
        let mut cfg = Self { window: 64, stride: 32, ..Self::reference() };
        for t in cfg.thresholds.values_mut() {
            t.gamma2 = (t.gamma2 / 16).max(1);
        }
        cfg
    }
}

/// One normalized training window.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub stack: Array3<f32>,
    pub target: Array2<f32>,
    pub timestamp: i64,
    pub origin: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task: Task,
    pub norm: NormState,
    pub samples: Vec<TaskSample>,
}

/// Windows of every `split` scene of `task`, filtered on physical target values.
pub fn load_task_data(manifest: &Manifest, task: Task, split: Split, data: &DataConfig) -> Result<TaskData> {
    let pairs = manifest.pairs(task, Some(split));
    if pairs.is_empty() {
        return Err(Error::MissingData(format!("manifest has no {split:?} data for task {task}")));
    }
    let norm = data.norms.get(task.variable)?;
    let thresholds = if data.filter && task.variable != VariableId::Mwbt { data.thresholds.get(&task.variable).copied() } else { None };
    let per_scene = crate::par::map_slice(&pairs, |p| -> Result<Vec<TaskSample>> {
        let stack = load_field(&manifest.resolve(p.stack))?.into_stack()?;
        let target = load_field(&manifest.resolve(p.target))?.into_weather()?;
        let patches = extract_patches(&target, data.window, data.stride)?;
        let origins: Vec<_> = patches.iter().map(|q| q.origin).collect();
        let stacks = extract_stack_windows(&data.stack_norm.apply(&stack.data), &origins, data.window);
        let mut out = Vec::new();
        for (patch, st) in patches.into_iter().zip(stacks) {
            if thresholds.is_some_and(|t| !has_large_component(patch.data.view(), t.gamma1, t.gamma2)) {
                continue;
            }
            out.push(TaskSample { stack: st, target: patch.data.mapv(|x| norm.forward(x)), timestamp: patch.timestamp, origin: patch.origin });
        }
        Ok(out)
    });
    let mut samples = Vec::new();
    for s in per_scene {
        samples.extend(s?);
    }
    if samples.is_empty() {
        return Err(Error::MissingData(format!("every {split:?} window of task {task} was filtered out")));
    }
    Ok(TaskData { task, norm, samples })
}

// ---- loss curves -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub rows: Vec<LossRow>,
}

impl LossCurve {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "task", "loss", "lr"])?;
        for r in &self.rows {
            w.write_record([r.step.to_string(), r.task.clone(), format!("{:.8}", r.loss), format!("{:.6e}", r.lr)])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// Mean loss over rows `[from, to)`.
    pub fn mean(&self, from: usize, to: usize) -> f64 {
        let rows = &self.rows[from.min(self.rows.len())..to.min(self.rows.len())];
        rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64
    }
}

fn pick<'a, T, R: Rng + ?Sized>(items: &'a [T], n: usize, rng: &mut R) -> Vec<&'a T> {
    (0..n).map(|_| &items[rng.random_range(0..items.len())]).collect()
}

// ---- autoencoder stage ----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
}

/// Train the shared autoencoder on target windows pooled across `data`.
pub fn train_ae(
    model: &mut Autoencoder<f32>,
    data: &[&TaskData],
    stage: &StageConfig,
    optim: &OptimConfig,
    weights: AeLossWeights,
    policy: &RngPolicy,
) -> Result<LossCurve> {
    let pool: Vec<(&Task, &Array2<f32>)> = data.iter().flat_map(|d| d.samples.iter().map(move |s| (&d.task, &s.target))).collect();
    if pool.is_empty() {
        return Err(Error::MissingData("no autoencoder training windows".into()));
    }
    let optim = optim.with_steps(stage.steps);
    let mut trainer = AeTrainer { opt: optim.optimizer(&model.params), weights, grad_clip: optim.grad_clip };
    let label = if data.len() == 1 { data[0].task.to_string() } else { "all".into() };
    let mut curve = LossCurve::default();
    for k in 1..=stage.steps {
        let mut rng = policy.stream("ae-step", k as u64);
        let picks = pick(&pool, stage.batch, &mut rng);
        let batch = batch_fields(&picks.iter().map(|p| p.1).collect::<Vec<_>>());
        let lr = lr_at(k, &optim)?;
        let m = ae_train_step(model, &mut trainer, &batch, lr, k, &mut rng)?;
        curve.rows.push(LossRow { step: k, task: label.clone(), loss: m.loss.total, lr });
        if k % 100 == 0 {
            log::info!("ae step {k}: loss {:.5} rec {:.5} kl {:.3}", m.loss.total, m.loss.rec, m.loss.kl);
        }
    }
    Ok(curve)
}

// ---- diffusion stage ------------------------------------------------------

/// Mean latents of every target window, per task.
pub fn encode_latents(ae: &Autoencoder<f32>, data: &TaskData) -> Result<Vec<Tensor<f32>>> {
    let chunks: Vec<&[TaskSample]> = data.samples.chunks(16).collect();
    let encoded = crate::par::map_slice(&chunks, |chunk| -> Result<Vec<Tensor<f32>>> {
        let x = batch_fields(&chunk.iter().map(|s| &s.target).collect::<Vec<_>>());
        let (m, _) = ae.encode_moments(&x)?;
        let per = m.numel() / chunk.len();
        let s = m.shape()[1..].to_vec();
        Ok(m.data().chunks(per).map(|c| Tensor::from_vec(&s, c.to_vec())).collect())
    });
    let mut out = Vec::with_capacity(data.samples.len());
    for e in encoded {
        out.extend(e?);
    }
    Ok(out)
}

fn stack_tensors(ts: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut shape = vec![ts.len()];
    shape.extend_from_slice(ts[0].shape());
    Tensor::from_vec(&shape, ts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// One ε-prediction minibatch drawn with `rng`.
pub struct DitBatch {
    pub stacks: Tensor<f32>,
    pub z0: Tensor<f32>,
    pub t: Vec<usize>,
    pub eps: Tensor<f32>,
    pub prompt: Vec<usize>,
}

fn draw_batch<R: Rng + ?Sized>(data: &TaskData, latents: &[Tensor<f32>], batch: usize, timesteps: usize, rng: &mut R) -> DitBatch {
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.samples.len())).collect();
    let stacks = batch_stacks(&idx.iter().map(|&i| &data.samples[i].stack).collect::<Vec<_>>());
    let z0 = stack_tensors(&idx.iter().map(|&i| &latents[i]).collect::<Vec<_>>());
    let t: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=timesteps)).collect();
    let eps = Tensor::from_vec(z0.shape(), (0..z0.numel()).map(|_| StandardNormal.sample(rng)).collect());
    DitBatch { stacks, z0, t, eps, prompt: render_prompt(data.task.region, data.task.variable).token_ids }
}

/// Loss graph for a batch; returns `(graph, loss)`.
pub fn dit_loss_graph<T: Float>(model: &Denoiser<T>, g: &mut Graph<T>, stacks: &Tensor<T>, z_t: &Tensor<T>, t: &[usize], eps: &Tensor<T>, prompt: &[usize]) -> Var {
    let s = g.constant(stacks.clone());
    let z = g.constant(z_t.clone());
    let e = g.constant(eps.clone());
    let cond = model.encode_satellite_graph(g, s);
    let p = model.embed_prompt_graph(g, prompt);
    let pred = model.predict_noise_graph(g, z, t, cond, p);
    g.mse(pred, e)
}

fn dit_step(model: &mut Denoiser<f32>, opt: &mut AdamW<f32>, b: &DitBatch, sched: &DiffusionSchedule, lr: f64, clip: Option<f64>, step: usize) -> Result<f64> {
    let z_t = add_noise_batch(&b.z0, &b.t, &b.eps, sched)?;
    let mut g = Graph::new();
    let loss = dit_loss_graph(model, &mut g, &b.stacks, &z_t, &b.t, &b.eps, &b.prompt);
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, detail: "diffusion loss".into() });
    }
    let mut grads = g.backward(loss).for_params(&model.params);
    clip_grad_norm(&mut grads, clip.unwrap_or(f64::INFINITY));
    opt.step(&mut model.params, &grads, lr);
    Ok(value)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub curve: LossCurve,
    pub optimizer: AdamW<f32>,
}

#[allow(clippy::too_many_arguments)]
fn dit_loop(
    model: &mut Denoiser<f32>,
    ae: &Autoencoder<f32>,
    tasks: &[TaskSpec],
    data: &BTreeMap<Task, TaskData>,
    sched: &DiffusionSchedule,
    stage: &StageConfig,
    optim: &OptimConfig,
    policy: &RngPolicy,
    purpose: &str,
) -> Result<TrainOutcome> {
    validate_tasks(tasks)?;
    let mut latents = BTreeMap::new();
    for spec in tasks.iter().filter(|t| t.sampling_weight > 0.0) {
        let d = data.get(&spec.task).ok_or_else(|| Error::MissingData(format!("no training data for task {}", spec.task)))?;
        latents.insert(spec.task, encode_latents(ae, d)?);
    }
    let optim = optim.with_steps(stage.steps);
    let mut opt = optim.optimizer(&model.params);
    let mut curve = LossCurve::default();
    for k in 1..=stage.steps {
        let mut rng = policy.stream(purpose, k as u64);
        let task = sample_task(tasks, &mut rng)?.task;
        let b = draw_batch(&data[&task], &latents[&task], stage.batch, sched.timesteps(), &mut rng);
        let lr = lr_at(k, &optim)?;
        let loss = dit_step(model, &mut opt, &b, sched, lr, optim.grad_clip, k)?;
        curve.rows.push(LossRow { step: k, task: task.to_string(), loss, lr });
        if k % 100 == 0 {
            log::info!("{purpose} step {k}: loss {:.5} ({task})", curve.mean(k - 100, k));
        }
    }
    Ok(TrainOutcome { curve, optimizer: opt })
}

/// Train the denoiser (and satellite encoder) with the autoencoder frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_dit(
    model: &mut Denoiser<f32>,
    ae: &Autoencoder<f32>,
    tasks: &[TaskSpec],
    data: &BTreeMap<Task, TaskData>,
    sched: &DiffusionSchedule,
    stage: &StageConfig,
    optim: &OptimConfig,
    policy: &RngPolicy,
) -> Result<TrainOutcome> {
    dit_loop(model, ae, tasks, data, sched, stage, optim, policy, "dit-step")
}

/// Continue training on a single new task with a freshly initialized optimizer.
pub fn finetune(
    model: &mut Denoiser<f32>,
    ae: &Autoencoder<f32>,
    data: &TaskData,
    sched: &DiffusionSchedule,
    stage: &StageConfig,
    optim: &OptimConfig,
    policy: &RngPolicy,
) -> Result<TrainOutcome> {
    let tasks = [TaskSpec { task: data.task, sampling_weight: 1.0 }];
    let map = BTreeMap::from([(data.task, data.clone())]);
    dit_loop(model, ae, &tasks, &map, sched, stage, optim, policy, "finetune-step")
}

/// Mean diffusion loss over `batches` fixed minibatches of `data`.
pub fn heldout_loss(model: &Denoiser<f32>, ae: &Autoencoder<f32>, data: &TaskData, sched: &DiffusionSchedule, batches: usize, batch: usize, seed: u64) -> Result<f64> {
    let latents = encode_latents(ae, data)?;
    let policy = RngPolicy::new(seed);
    let losses = crate::par::map_range(batches, |i| -> Result<f64> {
        let b = draw_batch(data, &latents, batch, sched.timesteps(), &mut policy.stream("heldout", i as u64));
        let z_t = add_noise_batch(&b.z0, &b.t, &b.eps, sched)?;
        let mut g = Graph::new();
        let loss = dit_loss_graph(model, &mut g, &b.stacks, &z_t, &b.t, &b.eps, &b.prompt);
        Ok(g.value(loss).item() as f64)
    });
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

// ---- deterministic baseline -----------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self { in_channels: 10, widths: vec![16, 32] }
    }
}

/// Convolutional encoder-decoder mapping a stack directly to a target with MSE.
#[derive(Clone, Debug)]
pub struct Regressor<T> {
    pub config: RegressorConfig,
    pub params: ParamSet<T>,
}

impl<T: Float> Regressor<T> {
    pub fn new<R: Rng + ?Sized>(config: RegressorConfig, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty() {
            return Err(Error::Config("regressor needs at least one width".into()));
        }
        let mut ps = ParamSet::new();
        let w = &config.widths;
        nn::init_conv(&mut ps, "conv_in", config.in_channels, w[0], 3, 1.0, rng);
        let mut prev = w[0];
        for (i, &wi) in w.iter().enumerate() {
            nn::init_conv(&mut ps, &format!("down.{i}"), prev, wi, 3, 1.0, rng);
            nn::init_conv(&mut ps, &format!("mix.{i}"), wi, wi, 3, 1.0, rng);
            prev = wi;
        }
        for i in (0..w.len()).rev() {
            let out = if i == 0 { w[0] } else { w[i - 1] };
            nn::init_conv(&mut ps, &format!("up.{i}"), prev, out, 3, 1.0, rng);
            prev = out;
        }
        nn::init_conv(&mut ps, "conv_out", w[0], 1, 3, 1.0, rng);
        Ok(Self { config, params: ps })
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Var {
        let ps = &self.params;
        let mut h = nn::conv(g, ps, x, "conv_in", 1, 1);
        h = g.silu(h);
        for i in 0..self.config.widths.len() {
            h = nn::conv(g, ps, h, &format!("down.{i}"), 2, 1);
            h = g.silu(h);
            h = nn::conv(g, ps, h, &format!("mix.{i}"), 1, 1);
            h = g.silu(h);
        }
        for i in (0..self.config.widths.len()).rev() {
            h = g.upsample2x(h);
            h = nn::conv(g, ps, h, &format!("up.{i}"), 1, 1);
            h = g.silu(h);
        }
        nn::conv(g, ps, h, "conv_out", 1, 1)
    }
}

impl Regressor<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, "regressor", &self.config, &self.params, Map::new())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params, _) = load_checkpoint::<RegressorConfig>(path, "regressor")?;
        let mut model = Self::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        restore(&mut model.params, &params)?;
        Ok(model)
    }
}

impl FieldModel for Regressor<f32> {
    fn predict_window(&self, stack: &Array3<f32>, _task: Task, _seed: u64) -> Result<Array2<f32>> {
        let (_, h, w) = stack.dim();
        let f = 1 << self.config.widths.len();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("regressor input {h}x{w} not divisible by {f}")));
        }
        let mut g = Graph::new();
        let x = g.constant(batch_stacks(&[stack]));
        let y = self.forward_graph(&mut g, x);
        let y = g.clamp(y, 0.0, 1.0);
        Array2::from_shape_vec((h, w), g.value(y).data().to_vec()).map_err(|e| Error::Shape(e.to_string()))
    }
}

pub fn baseline_train(model: &mut Regressor<f32>, data: &TaskData, stage: &StageConfig, optim: &OptimConfig, policy: &RngPolicy) -> Result<LossCurve> {
    let optim = optim.with_steps(stage.steps);
    let mut opt = optim.optimizer(&model.params);
    let mut curve = LossCurve::default();
    for k in 1..=stage.steps {
        let mut rng = policy.stream("baseline-step", k as u64);
        let picks = pick(&data.samples, stage.batch, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(batch_stacks(&picks.iter().map(|s| &s.stack).collect::<Vec<_>>()));
        let y = g.constant(batch_fields(&picks.iter().map(|s| &s.target).collect::<Vec<_>>()));
        let pred = model.forward_graph(&mut g, x);
        let loss = g.mse(pred, y);
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: k, detail: "baseline loss".into() });
        }
        let mut grads = g.backward(loss).for_params(&model.params);
        clip_grad_norm(&mut grads, optim.grad_clip.unwrap_or(f64::INFINITY));
        let lr = lr_at(k, &optim)?;
        opt.step(&mut model.params, &grads, lr);
        curve.rows.push(LossRow { step: k, task: data.task.to_string(), loss: value, lr });
    }
    Ok(curve)
}

// ---- evaluation and ablation ----------------------------------------------

/// Full-grid held-out scene for one task.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub task: Task,
    pub stack: SatelliteStack,
    pub gt: WeatherField,
}

pub fn load_eval_scenes(manifest: &Manifest, tasks: &[Task], split: Split) -> Result<Vec<EvalScene>> {
    let mut out = Vec::new();
    for &task in tasks {
        let pairs = manifest.pairs(task, Some(split));
        if pairs.is_empty() {
            return Err(Error::MissingData(format!("manifest has no {split:?} data for task {task}")));
        }
        for p in pairs {
            out.push(EvalScene {
                task,
                stack: load_field(&manifest.resolve(p.stack))?.into_stack()?,
                gt: load_field(&manifest.resolve(p.target))?.into_weather()?,
            });
        }
    }
    Ok(out)
}

/// Synthesize every scene (seeded per scene index) and score the outputs.
pub fn evaluate_model(
    model: &dyn FieldModel,
    scenes: &[EvalScene],
    data: &DataConfig,
    settings: &SynthesisSettings,
    masked_channels: &[usize],
    metrics: &MetricsConfig,
) -> Result<(MetricReport, Vec<EvalSample>)> {
    let policy = RngPolicy::new(settings.seed);
    let samples = crate::par::map_range(scenes.len(), |i| -> Result<EvalSample> {
        let s = &scenes[i];
        let local = SynthesisSettings { seed: policy.derive_seed("scene", i as u64), ..settings.clone() };
        let out = synthesize_field(model, &s.stack, s.task, data.norms.get(s.task.variable)?, &data.stack_norm, masked_channels, &local)?;
        Ok(EvalSample { task: s.task, pred: out.field, gt: s.gt.clone(), coverage: Some(out.coverage) })
    });
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((evaluate_full(&samples, metrics)?, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub task: Task,
    pub label: String,
    pub baseline: Option<f64>,
    pub ablated: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dropped: Option<ChannelGroup>,
    pub masked_channels: Vec<usize>,
    pub baseline: MetricReport,
    pub ablated: MetricReport,
    pub deltas: Vec<MetricDelta>,
}

/// Cell-by-cell `after − before`, keyed by the cells of `before`.
pub fn metric_deltas(before: &MetricReport, after: &MetricReport) -> Vec<MetricDelta> {
    before
        .cells
        .iter()
        .map(|b| {
            let a = after.get(b.task, &b.metric, b.threshold, b.pool).and_then(|c| c.value);
            MetricDelta {
                task: b.task,
                label: b.label(),
                baseline: b.value,
                ablated: a,
                delta: b.value.zip(a).map(|(x, y)| y - x),
            }
        })
        .collect()
}

/// Metric changes when the dropped group's channels are zeroed at the input.
pub fn ablate_channels(
    model: &dyn FieldModel,
    groups: &ChannelGroups,
    drop: Option<ChannelGroup>,
    scenes: &[EvalScene],
    data: &DataConfig,
    settings: &SynthesisSettings,
    metrics: &MetricsConfig,
) -> Result<AblationReport> {
    if let Some(s) = scenes.first() {
        groups.validate(s.stack.channels())?;
    }
    let masked: Vec<usize> = match drop {
        Some(g) => groups.indices(g)?.to_vec(),
        None => Vec::new(),
    };
    log::info!("ablation: dropping {:?} → masking channels {masked:?}", drop.map(|g| g.key()));
    let (baseline, _) = evaluate_model(model, scenes, data, settings, &[], metrics)?;
    let (ablated, _) = if masked.is_empty() { (baseline.clone(), Vec::new()) } else { evaluate_model(model, scenes, data, settings, &masked, metrics)? };
    let deltas = metric_deltas(&baseline, &ablated);
    Ok(AblationReport { dropped: drop, masked_channels: masked, baseline, ablated, deltas })
}
