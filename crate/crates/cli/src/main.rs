//! `synweather`: command surface over the synthesis pipeline.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use synweather_core::autoencoder::Autoencoder;
use synweather_core::config::RunConfig;
use synweather_core::dit::{render_prompt, Denoiser};
use synweather_core::manifest::MANIFEST_FILE;
use synweather_core::metrics::{evaluate_full, EvalSample, MetricReport};
use synweather_core::preprocess::{extract_patches, filter_patches, normalize, save_patch_set, FilterThresholds};
use synweather_core::synthesis::{synthesize, LatentDiffusion, SynthesisSettings};
use synweather_core::synthgen::{gen_dataset, ChannelGroup};
use synweather_core::training::{
    ablate_channels, baseline_train, evaluate_model, finetune, load_eval_scenes, load_task_data, metric_deltas, train_ae, train_dit, Regressor, TaskData,
};
use synweather_core::{par, save_field, FieldFile, Manifest, RngPolicy, Split, Task, WeatherField};

const AE_CHECKPOINT: &str = "ae.ckpt";
const DIT_CHECKPOINT: &str = "dit.ckpt";
const BASELINE_CHECKPOINT: &str = "baseline.ckpt";

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) => f.write_str(m),
        }
    }
}

impl From<synweather_core::Error> for Failure {
    fn from(e: synweather_core::Error) -> Self {
        match e {
            synweather_core::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "synweather", version, about = "Prompt-conditioned weather field synthesis from satellite stacks")]
struct Cli {
    /// Run configuration (TOML); overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in configuration preset.
    #[arg(long, global = true, default_value = "tiny")]
    preset: String,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Extract, normalize and filter training windows into patch sets.
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoencoder, the denoiser or the regression baseline.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Autoencoder checkpoint for the dit stage; defaults to `<out>/ae.ckpt`.
        #[arg(long)]
        ae: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Synthesize full-grid fields for one task.
    Sample {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        task: Task,
        /// A single satellite stack file.
        #[arg(long, conflicts_with = "data")]
        input: Option<PathBuf>,
        /// Every stack of `--split` in this dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a directory of predictions against the dataset, pairing by timestamp.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the denoiser on one task with a fresh optimizer.
    Finetune {
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Zero one channel group at the input and report metric deltas.
    Ablate {
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Channel group to mask; omitted means no masking.
        #[arg(long)]
        drop: Option<ChannelGroup>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory holding `manifest.json`.
    #[arg(long = "data")]
    dir: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    ae: PathBuf,
    #[arg(long)]
    dit: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stage {
    Ae,
    Dit,
    Baseline,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = par::threads_from_env() {
        par::configure_threads(n);
        info!("worker threads capped at {n}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn load_config(cli: &Cli) -> Outcome<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => RunConfig::preset(&cli.preset)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Persist the effective configuration next to the command's outputs.
fn snapshot(cfg: &RunConfig, dir: &Path) -> Outcome {
    let path = cfg.snapshot(dir)?;
    info!("config snapshot: {}", path.display());
    Ok(())
}

fn load_manifest(dir: &Path) -> Outcome<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Failure::Data(format!("manifest not found: {}", path.display())));
    }
    Ok(Manifest::load(&path)?)
}

fn require(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Data(format!("{what} checkpoint not found: {}", path.display())))
    }
}

fn load_models(models: &ModelArgs) -> Outcome<(Autoencoder<f32>, Denoiser<f32>)> {
    require(&models.ae, "autoencoder")?;
    require(&models.dit, "denoiser")?;
    Ok((Autoencoder::load(&models.ae)?, Denoiser::load(&models.dit)?))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Gen { out, scenes } => {
            if let Some(n) = scenes {
                cfg.gen.scenes = n;
            }
            cfg.output = out.clone();
            snapshot(&cfg, &out)?;
            let m = gen_dataset(&cfg.scene_config(), cfg.gen.scenes, &out, &cfg.gen.options)?;
            info!("{} scenes, {} files, splits {:?}", cfg.gen.scenes, m.entries.len(), m.counts());
            Ok(())
        }
        Command::Preprocess { data, out } => cmd_preprocess(&cfg, &data, &out),
        Command::Train { stage, data, out, ae, steps } => cmd_train(cfg, stage, &data, &out, ae, steps),
        Command::Sample { models, task, input, data, split, out } => cmd_sample(&cfg, &models, task, input, data, split.into(), &out),
        Command::Eval { pred, data, out } => cmd_eval(&cfg, &pred, &data, &out),
        Command::Finetune { models, data, task, out, steps } => cmd_finetune(cfg, &models, &data, task, &out, steps),
        Command::Ablate { models, data, drop, out } => cmd_ablate(&cfg, &models, &data, drop, &out),
    }
}

fn cmd_preprocess(cfg: &RunConfig, data: &DataArgs, out: &Path) -> Outcome {
    snapshot(cfg, out)?;
    let manifest = load_manifest(&data.dir)?;
    let split: Split = data.split.into();
    for &task in &cfg.tasks.tasks {
        let norm = cfg.data.norms.get(task.variable)?;
        let thresholds: Option<FilterThresholds> = if cfg.data.filter { cfg.data.thresholds.get(&task.variable).copied() } else { None };
        let mut kept = Vec::new();
        let mut total = 0;
        for pair in manifest.pairs(task, Some(split)) {
            let field = synweather_core::load_field(&manifest.resolve(pair.target))?.into_weather()?;
            let patches = extract_patches(&field, cfg.data.window, cfg.data.stride)?;
            total += patches.len();
            let patches = match thresholds {
                Some(t) => filter_patches(patches, &t),
                None => patches,
            };
            for p in patches {
                let f = WeatherField::new(p.data.clone(), p.region, p.variable, p.timestamp)?;
                kept.push(synweather_core::preprocess::PatchRecord { data: normalize(&f, &norm)?.data, norm: Some(norm), normalized: true, ..p });
            }
        }
        if total == 0 {
            return Err(Failure::Data(format!("manifest has no {split:?} data for task {task}")));
        }
        let path = out.join(format!("{}_{}.swt1", task_stem(task), format!("{split:?}").to_lowercase()));
        save_patch_set(&kept, &path)?;
        info!("{task}: kept {} of {total} windows → {}", kept.len(), path.display());
    }
    Ok(())
}

fn train_data(cfg: &RunConfig, data: &DataArgs) -> Outcome<BTreeMap<Task, TaskData>> {
    let manifest = load_manifest(&data.dir)?;
    let mut out = BTreeMap::new();
    for &task in &cfg.tasks.tasks {
        out.insert(task, load_task_data(&manifest, task, data.split.into(), &cfg.data)?);
    }
    Ok(out)
}

fn cmd_train(mut cfg: RunConfig, stage: Stage, data: &DataArgs, out: &Path, ae_path: Option<PathBuf>, steps: Option<usize>) -> Outcome {
    let policy = RngPolicy::new(cfg.seed);
    match stage {
        Stage::Ae => {
            if let Some(n) = steps {
                cfg.ae.train.steps = n;
            }
            snapshot(&cfg, out)?;
            let data = train_data(&cfg, data)?;
            let mut ae = Autoencoder::<f32>::new(cfg.ae.model.clone(), &mut policy.stream("init-ae", 0))?;
            let optim = cfg.optim.clone().with_steps(cfg.ae.train.steps);
            let curve = train_ae(&mut ae, &data.values().collect::<Vec<_>>(), &cfg.ae.train, &optim, cfg.ae.loss, &policy)?;
            curve.write(&out.join("ae_loss.csv"))?;
            ae.save(&out.join(AE_CHECKPOINT))?;
            info!("autoencoder checkpoint: {}", out.join(AE_CHECKPOINT).display());
        }
        Stage::Dit => {
            let ae_path = ae_path.unwrap_or_else(|| out.join(AE_CHECKPOINT));
            require(&ae_path, "autoencoder")?;
            if let Some(n) = steps {
                cfg.dit.train.steps = n;
            }
            snapshot(&cfg, out)?;
            let ae = Autoencoder::<f32>::load(&ae_path)?;
            let data = train_data(&cfg, data)?;
            let mut dit = Denoiser::<f32>::new(cfg.dit.model.clone(), &mut policy.stream("init-dit", 0))?;
            let optim = cfg.optim.clone().with_steps(cfg.dit.train.steps);
            let outcome = train_dit(&mut dit, &ae, &cfg.task_specs()?, &data, &cfg.schedule()?, &cfg.dit.train, &optim, &policy)?;
            outcome.curve.write(&out.join("dit_loss.csv"))?;
            dit.save(&out.join(DIT_CHECKPOINT))?;
            info!("denoiser checkpoint: {}", out.join(DIT_CHECKPOINT).display());
        }
        Stage::Baseline => {
            if let Some(n) = steps {
                cfg.baseline.train.steps = n;
            }
            snapshot(&cfg, out)?;
            let data = train_data(&cfg, data)?;
            let task = cfg.tasks.primary.unwrap_or(cfg.tasks.tasks[0]);
            let train = data.get(&task).ok_or_else(|| Failure::Data(format!("no training data for {task}")))?;
            let mut model = Regressor::<f32>::new(cfg.baseline.model.clone(), &mut policy.stream("init-baseline", 0))?;
            let optim = cfg.optim.clone().with_steps(cfg.baseline.train.steps);
            let curve = baseline_train(&mut model, train, &cfg.baseline.train, &optim, &policy)?;
            curve.write(&out.join("baseline_loss.csv"))?;
            model.save(&out.join(BASELINE_CHECKPOINT))?;
            info!("baseline checkpoint: {}", out.join(BASELINE_CHECKPOINT).display());
        }
    }
    Ok(())
}

/// Lowercase `<region>_<variable>` file stem.
fn task_stem(task: Task) -> String {
    format!("{}_{}", task.region.key(), task.variable.key()).to_lowercase()
}

fn prediction_name(task: Task, timestamp: i64) -> String {
    format!("{}_{timestamp}.swt1", task_stem(task))
}

fn cmd_sample(cfg: &RunConfig, models: &ModelArgs, task: Task, input: Option<PathBuf>, data: Option<PathBuf>, split: Split, out: &Path) -> Outcome {
    let (ae, dit) = load_models(models)?;
    snapshot(cfg, out)?;
    let prompt = render_prompt(task.region, task.variable);
    info!("prompt: {}", prompt.text);
    let stacks: Vec<PathBuf> = match (input, data) {
        (Some(p), None) => vec![p],
        (None, Some(dir)) => {
            let m = load_manifest(&dir)?;
            let stacks: Vec<PathBuf> = m.pairs(task, Some(split)).iter().map(|p| m.resolve(p.stack)).collect();
            if stacks.is_empty() {
                return Err(Failure::Data(format!("manifest has no {split:?} data for task {task}")));
            }
            stacks
        }
        _ => return Err(Failure::Usage("sample needs exactly one of --input or --data".into())),
    };
    let sched = cfg.schedule()?;
    let norm = cfg.data.norms.get(task.variable)?;
    for (i, path) in stacks.iter().enumerate() {
        let stack = synweather_core::load_field(path)?.into_stack()?;
        let settings = SynthesisSettings { seed: RngPolicy::new(cfg.seed).derive_seed("sample", i as u64), ..cfg.synthesis() };
        let r = synthesize(&stack, &prompt, &ae, &dit, &sched, cfg.ddim(), norm, &cfg.data.stack_norm, &settings)?;
        let dest = out.join(prediction_name(task, stack.timestamp));
        save_field(&FieldFile::Weather(r.field), &dest)?;
        info!("{} → {}", path.display(), dest.display());
    }
    Ok(())
}

fn load_predictions(dir: &Path) -> Outcome<BTreeMap<(Task, i64), (PathBuf, WeatherField)>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "swt1")).collect();
    paths.sort();
    for p in paths {
        if let FieldFile::Weather(f) = synweather_core::load_field(&p)? {
            out.insert((Task::new(f.region, f.variable), f.timestamp), (p, f));
        }
    }
    Ok(out)
}

fn cmd_eval(cfg: &RunConfig, pred_dir: &Path, data: &DataArgs, out: &Path) -> Outcome {
    let manifest = load_manifest(&data.dir)?;
    let mut preds = load_predictions(pred_dir)?;
    let split: Split = data.split.into();
    let tasks: BTreeSet<Task> = preds.keys().map(|k| k.0).collect();
    if tasks.is_empty() {
        return Err(Failure::Data(format!("no prediction fields under {}", pred_dir.display())));
    }
    let mut samples = Vec::new();
    let mut missing = Vec::new();
    for &task in &tasks {
        for pair in manifest.pairs(task, Some(split)) {
            match preds.remove(&(task, pair.target.timestamp)) {
                Some((_, pred)) => {
                    let gt = synweather_core::load_field(&manifest.resolve(pair.target))?.into_weather()?;
                    samples.push(EvalSample { task, pred, gt, coverage: None });
                }
                None => missing.push(format!("{} ({task} at {})", pair.target.path, pair.target.timestamp)),
            }
        }
    }
    for (path, _) in preds.values() {
        missing.push(format!("{} (no ground truth in the {split:?} split)", path.display()));
    }
    if !missing.is_empty() {
        return Err(Failure::Data(format!("unpaired entries:\n  {}", missing.join("\n  "))));
    }
    snapshot(cfg, out)?;
    let report = evaluate_full(&samples, &cfg.metrics)?;
    report.write(out, "metrics")?;
    println!("{}", report.table());
    Ok(())
}

fn eval_report(cfg: &RunConfig, ae: &Autoencoder<f32>, dit: &Denoiser<f32>, data: &DataArgs, task: Task) -> Outcome<MetricReport> {
    let manifest = load_manifest(&data.dir)?;
    let scenes = load_eval_scenes(&manifest, &[task], data.split.into())?;
    let sched = cfg.schedule()?;
    let model = LatentDiffusion { ae, dit, sched: &sched, ddim: cfg.ddim() };
    model.check_compatible()?;
    Ok(evaluate_model(&model, &scenes, &cfg.data, &cfg.synthesis(), &[], &cfg.metrics)?.0)
}

fn cmd_finetune(mut cfg: RunConfig, models: &ModelArgs, data: &DataArgs, task: Task, out: &Path, steps: Option<usize>) -> Outcome {
    let (ae, mut dit) = load_models(models)?;
    if let Some(n) = steps {
        cfg.dit.finetune.steps = n;
    }
    snapshot(&cfg, out)?;
    let manifest = load_manifest(&data.dir)?;
    let train = load_task_data(&manifest, task, Split::Train, &cfg.data)?;
    let held_out = DataArgs { dir: data.dir.clone(), split: SplitArg::Valid };
    let before = eval_report(&cfg, &ae, &dit, &held_out, task)?;
    let optim = cfg.optim.clone().with_steps(cfg.dit.finetune.steps);
    let outcome = finetune(&mut dit, &ae, &train, &cfg.schedule()?, &cfg.dit.finetune, &optim, &RngPolicy::new(cfg.seed))?;
    outcome.curve.write(&out.join("finetune_loss.csv"))?;
    dit.save(&out.join(DIT_CHECKPOINT))?;
    let after = eval_report(&cfg, &ae, &dit, &held_out, task)?;
    let deltas = metric_deltas(&before, &after);
    write_json(&out.join("finetune_report.json"), &serde_json::json!({ "task": task, "steps": cfg.dit.finetune.steps, "before": before, "after": after, "deltas": deltas }))?;
    println!("{}", after.table());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, models: &ModelArgs, data: &DataArgs, drop: Option<ChannelGroup>, out: &Path) -> Outcome {
    let (ae, dit) = load_models(models)?;
    snapshot(cfg, out)?;
    let manifest = load_manifest(&data.dir)?;
    let scenes = load_eval_scenes(&manifest, &cfg.tasks.tasks, data.split.into())?;
    let sched = cfg.schedule()?;
    let model = LatentDiffusion { ae: &ae, dit: &dit, sched: &sched, ddim: cfg.ddim() };
    model.check_compatible()?;
    let report = ablate_channels(&model, &cfg.ablation.groups, drop, &scenes, &cfg.data, &cfg.synthesis(), &cfg.metrics)?;
    write_json(&out.join("ablation.json"), &report)?;
    for d in &report.deltas {
        println!("{:<22} {:<16} {}", d.task.to_string(), d.label, d.delta.map(|v| format!("{v:+.4}")).unwrap_or_else(|| "n/a".into()));
    }
    Ok(())
}
