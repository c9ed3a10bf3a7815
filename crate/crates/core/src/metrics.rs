//! Verification metrics: threshold CSI, pooled CSI, RMSE, SSIM, PSNR and report aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Task, VariableId, WeatherField};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyCounts {
    pub tp: u64,
    pub fp: u64,
    pub r#fn: u64,
    pub tn: u64,
}

impl ContingencyCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.r#fn + self.tn
    }
}

impl std::ops::AddAssign for ContingencyCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.r#fn += o.r#fn;
        self.tn += o.tn;
    }
}

fn same_shape(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Strict exceedance (`> threshold`) contingency table.
pub fn contingency_arrays(pred: ArrayView2<f32>, gt: ArrayView2<f32>, threshold: f32) -> Result<ContingencyCounts> {
    same_shape(pred, gt)?;
    let mut c = ContingencyCounts::default();
    Zip::from(pred).and(gt).for_each(|&p, &g| match (p > threshold, g > threshold) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.r#fn += 1,
        (false, false) => c.tn += 1,
    });
    Ok(c)
}

pub fn contingency(pred: &WeatherField, gt: &WeatherField, threshold: f32) -> Result<ContingencyCounts> {
    contingency_arrays(pred.data.view(), gt.data.view(), threshold)
}

/// `tp / (tp + fp + fn)`; `None` when no event occurs in either field.
pub fn csi(c: &ContingencyCounts) -> Option<f64> {
    let denom = c.tp + c.fp + c.r#fn;
    (denom > 0).then(|| c.tp as f64 / denom as f64)
}

/// Non-overlapping max pooling with kernel = stride = `k`; trailing remainder dropped.
pub fn max_pool(x: ArrayView2<f32>, k: usize) -> Array2<f32> {
    let (h, w) = x.dim();
    let (ph, pw) = (h / k, w / k);
    Array2::from_shape_fn((ph, pw), |(i, j)| {
        x.slice(s![i * k..(i + 1) * k, j * k..(j + 1) * k]).fold(f32::NEG_INFINITY, |m, &v| m.max(v))
    })
}

pub fn pooled_csi_arrays(pred: ArrayView2<f32>, gt: ArrayView2<f32>, threshold: f32, pool: usize) -> Result<Option<f64>> {
    Ok(csi(&pooled_contingency(pred, gt, threshold, pool)?))
}

pub fn pooled_contingency(pred: ArrayView2<f32>, gt: ArrayView2<f32>, threshold: f32, pool: usize) -> Result<ContingencyCounts> {
    if pool < 1 {
        return Err(Error::InvalidArgument("pool size must be at least 1".into()));
    }
    same_shape(pred, gt)?;
    if pool == 1 {
        return contingency_arrays(pred, gt, threshold);
    }
    contingency_arrays(max_pool(pred, pool).view(), max_pool(gt, pool).view(), threshold)
}

pub fn pooled_csi(pred: &WeatherField, gt: &WeatherField, threshold: f32, pool: usize) -> Result<Option<f64>> {
    pooled_csi_arrays(pred.data.view(), gt.data.view(), threshold, pool)
}

pub fn mse_arrays(pred: ArrayView2<f32>, gt: ArrayView2<f32>) -> Result<f64> {
    same_shape(pred, gt)?;
    let mut acc = 0.0f64;
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        let d = p as f64 - g as f64;
        acc += d * d;
    });
    Ok(acc / pred.len().max(1) as f64)
}

pub fn rmse_arrays(pred: ArrayView2<f32>, gt: ArrayView2<f32>) -> Result<f64> {
    Ok(mse_arrays(pred, gt)?.sqrt())
}

pub fn rmse(pred: &WeatherField, gt: &WeatherField) -> Result<f64> {
    rmse_arrays(pred.data.view(), gt.data.view())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" Gaussian filter.
fn filter_valid(x: &Array2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let rows = Array2::from_shape_fn((h, ow), |(i, j)| taps.iter().enumerate().map(|(k, t)| t * x[[i, j + k]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(i, j)| taps.iter().enumerate().map(|(k, t)| t * rows[[i + k, j]]).sum::<f64>())
}

/// Single-scale SSIM, 11×11 Gaussian window (σ = 1.5), averaged over valid positions.
pub fn ssim_arrays(pred: ArrayView2<f32>, gt: ArrayView2<f32>, dynamic_range: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    let (h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    if dynamic_range.is_nan() || dynamic_range <= 0.0 {
        return Err(Error::InvalidArgument(format!("dynamic range must be positive, got {dynamic_range}")));
    }
    let taps = gaussian_taps();
    let x = pred.mapv(|v| v as f64);
    let y = gt.mapv(|v| v as f64);
    let mx = filter_valid(&x, &taps);
    let my = filter_valid(&y, &taps);
    let sxx = filter_valid(&(&x * &x), &taps);
    let syy = filter_valid(&(&y * &y), &taps);
    let sxy = filter_valid(&(&x * &y), &taps);
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let mut total = 0.0;
    Zip::from(&mx).and(&my).and(&sxx).and(&syy).and(&sxy).for_each(|&ux, &uy, &xx, &yy, &xy| {
        let vx = xx - ux * ux;
        let vy = yy - uy * uy;
        let cxy = xy - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    });
    Ok(total / mx.len() as f64)
}

pub fn ssim(pred: &WeatherField, gt: &WeatherField, dynamic_range: f64) -> Result<f64> {
    ssim_arrays(pred.data.view(), gt.data.view(), dynamic_range)
}

/// `10·log10(R²/MSE)`; `+∞` when the inputs are identical.
pub fn psnr_arrays(pred: ArrayView2<f32>, gt: ArrayView2<f32>, dynamic_range: f64) -> Result<f64> {
    let mse = mse_arrays(pred, gt)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (dynamic_range * dynamic_range / mse).log10())
}

pub fn psnr(pred: &WeatherField, gt: &WeatherField, dynamic_range: f64) -> Result<f64> {
    psnr_arrays(pred.data.view(), gt.data.view(), dynamic_range)
}

/// Metrics requested for one variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableMetrics {
    pub rmse: bool,
    pub ssim: bool,
    pub psnr: bool,
    pub csi_thresholds: Vec<f32>,
    pub pools: Vec<usize>,
    /// Physical value span used by SSIM/PSNR.
    pub dynamic_range: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsiAggregation {
    /// CSI per image, then mean over images with a defined value.
    #[default]
    PerImage,
    /// Contingency counts summed over images, then one CSI.
    PooledCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub variables: BTreeMap<VariableId, VariableMetrics>,
    #[serde(default)]
    pub aggregation: CsiAggregation,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let vm = |rmse, ssim, psnr, t: &[f32], pools: &[usize], range| VariableMetrics {
            rmse,
            ssim,
            psnr,
            csi_thresholds: t.to_vec(),
            pools: pools.to_vec(),
            dynamic_range: range,
        };
        let variables = BTreeMap::from([
            (VariableId::Cr, vm(true, false, false, &[25.0, 35.0, 40.0], &[1, 4, 8], 70.0)),
            (VariableId::Precipitation, vm(true, false, false, &[2.0, 5.0, 15.0], &[1, 4, 8], 100.0)),
            (VariableId::VisibleLight, vm(false, true, true, &[50.0], &[1], 100.0)),
            (VariableId::Mwbt, vm(true, true, true, &[300.0], &[1], 150.0)),
        ]);
        Self { variables, aggregation: CsiAggregation::PerImage }
    }
}

/// One prediction/ground-truth pair in physical units.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub task: Task,
    pub pred: WeatherField,
    pub gt: WeatherField,
    /// Pixels the prediction actually covers; `None` means all.
    pub coverage: Option<Array2<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub task: Task,
    pub metric: String,
    pub threshold: Option<f32>,
    pub pool: Option<usize>,
    /// `None` when undefined on every image.
    pub value: Option<f64>,
    pub n_defined: usize,
    pub n_undefined: usize,
}

impl MetricCell {
    pub fn label(&self) -> String {
        let mut s = self.metric.clone();
        if let Some(t) = self.threshold {
            let _ = write!(s, "/{t}");
        }
        if let Some(p) = self.pool.filter(|&p| p > 1) {
            let _ = write!(s, "@POOL{p}");
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cells: Vec<MetricCell>,
    pub samples: BTreeMap<String, usize>,
}

/// Bounding rectangle of covered pixels.
fn covered_window(mask: &Array2<bool>) -> Option<(usize, usize, usize, usize)> {
    let mut r = (usize::MAX, usize::MAX, 0, 0);
    for ((i, j), &c) in mask.indexed_iter() {
        if c {
            r = (r.0.min(i), r.1.min(j), r.2.max(i + 1), r.3.max(j + 1));
        }
    }
    (r.2 > 0).then_some(r)
}

struct Acc {
    sum: f64,
    defined: usize,
    undefined: usize,
    counts: ContingencyCounts,
}

impl Acc {
    fn new() -> Self {
        Self { sum: 0.0, defined: 0, undefined: 0, counts: ContingencyCounts::default() }
    }

    fn push(&mut self, v: Option<f64>) {
        match v.filter(|v| v.is_finite()) {
            Some(v) => {
                self.sum += v;
                self.defined += 1;
            }
            None => self.undefined += 1,
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.defined > 0).then(|| self.sum / self.defined as f64)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Key {
    Rmse,
    Ssim,
    Psnr,
    Csi(usize, usize),
}

/// One metric of one image, with the counts behind it for CSI.
type ImageScore = (Key, Option<f64>, ContingencyCounts);

/// Per-task metric table over full-grid outputs, restricted to covered pixels.
pub fn evaluate_full(samples: &[EvalSample], config: &MetricsConfig) -> Result<MetricReport> {
    let per_image: Vec<Result<Vec<ImageScore>>> = crate::par::map_slice(samples, |s| {
        let vm = config
            .variables
            .get(&s.task.variable)
            .ok_or_else(|| Error::Config(format!("no metrics configured for {}", s.task.variable)))?;
        let (pred, gt) = match s.coverage.as_ref() {
            None => (s.pred.data.view(), s.gt.data.view()),
            Some(mask) => {
                let Some((r0, c0, r1, c1)) = covered_window(mask) else {
                    return Err(Error::MissingData(format!("prediction for {} at {} covers no pixels", s.task, s.gt.timestamp)));
                };
                (s.pred.data.slice(s![r0..r1, c0..c1]), s.gt.data.slice(s![r0..r1, c0..c1]))
            }
        };
        let mut out = Vec::new();
        if vm.rmse {
            out.push((Key::Rmse, Some(rmse_arrays(pred, gt)?), ContingencyCounts::default()));
        }
        if vm.ssim {
            out.push((Key::Ssim, Some(ssim_arrays(pred, gt, vm.dynamic_range)?), ContingencyCounts::default()));
        }
        if vm.psnr {
            out.push((Key::Psnr, Some(psnr_arrays(pred, gt, vm.dynamic_range)?), ContingencyCounts::default()));
        }
        for (ti, &t) in vm.csi_thresholds.iter().enumerate() {
            for (pi, &p) in vm.pools.iter().enumerate() {
                let c = pooled_contingency(pred, gt, t, p)?;
                out.push((Key::Csi(ti, pi), csi(&c), c));
            }
        }
        Ok(out)
    });

    let mut table: BTreeMap<(Task, Key), Acc> = BTreeMap::new();
    let mut report = MetricReport::default();
    for (s, r) in samples.iter().zip(per_image) {
        *report.samples.entry(s.task.to_string()).or_insert(0) += 1;
        for (k, v, c) in r? {
            let acc = table.entry((s.task, k)).or_insert_with(Acc::new);
            acc.push(v);
            acc.counts += c;
        }
    }
    for ((task, key), acc) in table {
        let vm = &config.variables[&task.variable];
        let (metric, threshold, pool, value) = match key {
            Key::Rmse => ("RMSE", None, None, acc.mean()),
            Key::Ssim => ("SSIM", None, None, acc.mean()),
            Key::Psnr => ("PSNR", None, None, acc.mean()),
            Key::Csi(ti, pi) => {
                let value = match config.aggregation {
                    CsiAggregation::PerImage => acc.mean(),
                    CsiAggregation::PooledCounts => csi(&acc.counts),
                };
                ("CSI", Some(vm.csi_thresholds[ti]), Some(vm.pools[pi]), value)
            }
        };
        report.cells.push(MetricCell {
            task,
            metric: metric.into(),
            threshold,
            pool,
            value,
            n_defined: acc.defined,
            n_undefined: acc.undefined,
        });
    }
    Ok(report)
}

impl MetricReport {
    pub fn get(&self, task: Task, metric: &str, threshold: Option<f32>, pool: Option<usize>) -> Option<&MetricCell> {
        self.cells
            .iter()
            .find(|c| c.task == task && c.metric == metric && c.threshold == threshold && c.pool == pool)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "metric", "threshold", "pool", "value", "n_defined", "n_undefined"])?;
        for c in &self.cells {
            w.write_record([
                c.task.to_string(),
                c.metric.clone(),
                c.threshold.map(|t| t.to_string()).unwrap_or_default(),
                c.pool.map(|p| p.to_string()).unwrap_or_default(),
                c.value.map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".into()),
                c.n_defined.to_string(),
                c.n_undefined.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Aligned text table, one row per task.
    pub fn table(&self) -> String {
        let mut tasks: BTreeMap<Task, Vec<&MetricCell>> = BTreeMap::new();
        for c in &self.cells {
            tasks.entry(c.task).or_default().push(c);
        }
        let mut out = String::new();
        for (task, cells) in tasks {
            let head: Vec<String> = cells.iter().map(|c| c.label()).collect();
            let vals: Vec<String> = cells
                .iter()
                .map(|c| c.value.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()))
                .collect();
            let widths: Vec<usize> = head.iter().zip(&vals).map(|(h, v)| h.len().max(v.len())).collect();
            let name = task.to_string();
            let pad = name.len().max(6);
            let _ = write!(out, "{:<pad$}", "task");
            for (h, w) in head.iter().zip(&widths) {
                let _ = write!(out, "  {h:>w$}");
            }
            let _ = write!(out, "\n{name:<pad$}");
            for (v, w) in vals.iter().zip(&widths) {
                let _ = write!(out, "  {v:>w$}");
            }
            out.push('\n');
        }
        out
    }
}
