//! KL-regularized convolutional autoencoder shared by every weather variable.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Map;
use synweather_autograd::{clip_grad_norm, AdamW, Float, Graph, ParamSet, Tensor, Var};

use crate::checkpoint::{load_checkpoint, restore, save_checkpoint};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, Split};
use crate::metrics::{rmse_arrays, ssim_arrays};
use crate::nn;
use crate::preprocess::{denormalize, normalize, NormTable};
use crate::swt1::load_field;
use crate::types::{RegionId, VariableId, WeatherField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub in_channels: usize,
    pub latent_channels: usize,
    /// Channel width per resolution level; each level ends in a 2× downsample.
    pub widths: Vec<usize>,
    pub layers_per_block: usize,
    pub groups: usize,
}

impl AeConfig {
    pub fn reference() -> Self {
        Self { in_channels: 1, latent_channels: 4, widths: vec![64, 128, 256], layers_per_block: 2, groups: 32 }
    }

    pub fn tiny() -> Self {
        Self { in_channels: 1, latent_channels: 4, widths: vec![8, 16, 32], layers_per_block: 2, groups: 8 }
    }

    pub fn downsample(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.layers_per_block == 0 || self.latent_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("autoencoder needs at least one level, block layer and channel".into()));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w % self.groups != 0) {
            return Err(Error::Config(format!("width {w} is not divisible into {} groups", self.groups)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeMode {
    Sample,
    Mean,
}

/// `C_z × H_z × W_z` latent with its task of origin.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub data: Tensor<f32>,
    pub source: (RegionId, VariableId),
}

impl LatentTensor {
    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder<T> {
    pub config: AeConfig,
    pub params: ParamSet<T>,
}

fn init_resblock<T: Float, R: Rng + ?Sized>(ps: &mut ParamSet<T>, prefix: &str, cin: usize, cout: usize, rng: &mut R) {
    nn::init_norm(ps, &format!("{prefix}.norm1"), cin, rng);
    nn::init_conv(ps, &format!("{prefix}.conv1"), cin, cout, 3, 1.0, rng);
    nn::init_norm(ps, &format!("{prefix}.norm2"), cout, rng);
    nn::init_conv(ps, &format!("{prefix}.conv2"), cout, cout, 3, 0.5, rng);
    if cin != cout {
        nn::init_conv(ps, &format!("{prefix}.skip"), cin, cout, 1, 1.0, rng);
    }
}

fn resblock<T: Float>(g: &mut Graph<T>, ps: &ParamSet<T>, x: Var, prefix: &str, groups: usize) -> Var {
    let h = nn::group_norm(g, ps, x, &format!("{prefix}.norm1"), groups);
    let h = g.silu(h);
    let h = nn::conv(g, ps, h, &format!("{prefix}.conv1"), 1, 1);
    let h = nn::group_norm(g, ps, h, &format!("{prefix}.norm2"), groups);
    let h = g.silu(h);
    let h = nn::conv(g, ps, h, &format!("{prefix}.conv2"), 1, 1);
    let skip_name = format!("{prefix}.skip");
    let skip = if ps.id(&format!("{skip_name}.weight")).is_some() { nn::conv(g, ps, x, &skip_name, 1, 0) } else { x };
    g.add(skip, h)
}

/// Optional adversarial term: returns the generator-side loss for a reconstruction.
pub trait Discriminator<T: Float> {
    fn generator_loss(&self, g: &mut Graph<T>, reconstruction: Var) -> Var;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeLossWeights {
    pub rec: f64,
    pub kl: f64,
    pub adv: f64,
}

impl Default for AeLossWeights {
    fn default() -> Self {
        Self { rec: 1.0, kl: 1e-6, adv: 0.0 }
    }
}

pub struct AeLossVars {
    pub total: Var,
    pub rec: Var,
    pub kl: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeLossParts {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
}

/// `λ_rec·mean((x − x̂)²) + λ_kl·mean(½(μ² + σ² − 1 − log σ²)) [+ λ_adv·adv]`.
pub fn ae_loss_graph<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    recon: Var,
    mean: Var,
    logvar: Var,
    weights: &AeLossWeights,
    disc: Option<&dyn Discriminator<T>>,
) -> AeLossVars {
    let rec = g.mse(recon, x);
    let m2 = g.square(mean);
    let var = g.exp(logvar);
    let s = g.add(m2, var);
    let s = g.sub(s, logvar);
    let s = g.add_scalar(s, -1.0);
    let s = g.scale(s, 0.5);
    let kl = g.mean_all(s);
    let a = g.scale(rec, weights.rec);
    let b = g.scale(kl, weights.kl);
    let mut total = g.add(a, b);
    if let Some(d) = disc.filter(|_| weights.adv != 0.0) {
        let adv = d.generator_loss(g, recon);
        let adv = g.scale(adv, weights.adv);
        total = g.add(total, adv);
    }
    AeLossVars { total, rec, kl }
}

pub fn ae_loss<T: Float>(x: &Tensor<T>, recon: &Tensor<T>, mean: &Tensor<T>, logvar: &Tensor<T>, weights: &AeLossWeights) -> Result<AeLossParts> {
    if x.shape() != recon.shape() || mean.shape() != logvar.shape() {
        return Err(Error::Shape(format!("ae_loss: x {:?} recon {:?} mean {:?} logvar {:?}", x.shape(), recon.shape(), mean.shape(), logvar.shape())));
    }
    let mut g = Graph::new();
    let (x, r, m, l) = (g.constant(x.clone()), g.constant(recon.clone()), g.constant(mean.clone()), g.constant(logvar.clone()));
    let v = ae_loss_graph(&mut g, x, r, m, l, weights, None);
    Ok(AeLossParts { total: g.value(v.total).item().f64(), rec: g.value(v.rec).item().f64(), kl: g.value(v.kl).item().f64() })
}

pub const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

impl<T: Float> Autoencoder<T> {
    pub fn new<R: Rng + ?Sized>(config: AeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let w = &config.widths;
        let last = *w.last().unwrap();
        nn::init_conv(&mut ps, "enc.conv_in", config.in_channels, w[0], 3, 1.0, rng);
        let mut prev = w[0];
        for (i, &wi) in w.iter().enumerate() {
            for j in 0..config.layers_per_block {
                init_resblock(&mut ps, &format!("enc.down.{i}.res.{j}"), prev, wi, rng);
                prev = wi;
            }
            nn::init_conv(&mut ps, &format!("enc.down.{i}.down"), wi, wi, 3, 1.0, rng);
        }
        init_resblock(&mut ps, "enc.mid", last, last, rng);
        nn::init_norm(&mut ps, "enc.norm_out", last, rng);
        nn::init_conv(&mut ps, "enc.conv_out", last, 2 * config.latent_channels, 3, 1.0, rng);

        nn::init_conv(&mut ps, "dec.conv_in", config.latent_channels, last, 3, 1.0, rng);
        init_resblock(&mut ps, "dec.mid", last, last, rng);
        let mut prev = last;
        for (i, &wi) in w.iter().enumerate().rev() {
            nn::init_conv(&mut ps, &format!("dec.up.{i}.up"), prev, wi, 3, 1.0, rng);
            for j in 0..config.layers_per_block {
                init_resblock(&mut ps, &format!("dec.up.{i}.res.{j}"), wi, wi, rng);
            }
            prev = wi;
        }
        nn::init_norm(&mut ps, "dec.norm_out", w[0], rng);
        nn::init_conv(&mut ps, "dec.conv_out", w[0], config.in_channels, 3, 1.0, rng);
        Ok(Self { config, params: ps })
    }

    pub fn cast<U: Float>(&self) -> Autoencoder<U> {
        Autoencoder { config: self.config.clone(), params: self.params.cast() }
    }

    /// Latent shape `[B, C_z, H / f, W / f]` for a valid input shape.
    pub fn latent_shape(&self, input: &[usize]) -> Vec<usize> {
        let f = self.config.downsample();
        vec![input[0], self.config.latent_channels, input[2] / f, input[3] / f]
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.config.downsample();
        match shape {
            [_, c, h, w] if *c == self.config.in_channels && h % f == 0 && w % f == 0 && *h > 0 && *w > 0 => Ok(()),
            _ => Err(Error::Shape(format!(
                "autoencoder input {shape:?} must be [B, {}, H, W] with H, W divisible by {f}",
                self.config.in_channels
            ))),
        }
    }

    /// Posterior `(mean, logvar)` for `x: [B, 1, H, W]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        let (ps, groups) = (&self.params, self.config.groups);
        let mut h = nn::conv(g, ps, x, "enc.conv_in", 1, 1);
        for i in 0..self.config.widths.len() {
            for j in 0..self.config.layers_per_block {
                h = resblock(g, ps, h, &format!("enc.down.{i}.res.{j}"), groups);
            }
            h = nn::conv(g, ps, h, &format!("enc.down.{i}.down"), 2, 1);
        }
        h = resblock(g, ps, h, "enc.mid", groups);
        h = nn::group_norm(g, ps, h, "enc.norm_out", groups);
        h = g.silu(h);
        h = nn::conv(g, ps, h, "enc.conv_out", 1, 1);
        let cz = self.config.latent_channels;
        let mean = g.narrow(h, 1, 0, cz);
        let logvar = g.narrow(h, 1, cz, cz);
        let logvar = g.clamp(logvar, LOGVAR_RANGE.0, LOGVAR_RANGE.1);
        (mean, logvar)
    }

    /// Unclamped reconstruction for `z: [B, C_z, H_z, W_z]`.
    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var) -> Var {
        let (ps, groups) = (&self.params, self.config.groups);
        let mut h = nn::conv(g, ps, z, "dec.conv_in", 1, 1);
        h = resblock(g, ps, h, "dec.mid", groups);
        for i in (0..self.config.widths.len()).rev() {
            h = g.upsample2x(h);
            h = nn::conv(g, ps, h, &format!("dec.up.{i}.up"), 1, 1);
            for j in 0..self.config.layers_per_block {
                h = resblock(g, ps, h, &format!("dec.up.{i}.res.{j}"), groups);
            }
        }
        h = nn::group_norm(g, ps, h, "dec.norm_out", groups);
        h = g.silu(h);
        nn::conv(g, ps, h, "dec.conv_out", 1, 1)
    }

    /// Batched posterior moments.
    pub fn encode_moments(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (m, l) = self.encode_graph(&mut g, xv);
        Ok((g.value(m).clone(), g.value(l).clone()))
    }

    /// Batched encoding; `Sample` draws `μ + σ·ε`.
    pub fn encode_tensor<R: Rng + ?Sized>(&self, x: &Tensor<T>, mode: EncodeMode, rng: &mut R) -> Result<Tensor<T>> {
        let (m, l) = self.encode_moments(x)?;
        Ok(match mode {
            EncodeMode::Mean => m,
            EncodeMode::Sample => {
                let data = m.data().iter().zip(l.data()).map(|(&mu, &lv)| {
                    let e: f64 = StandardNormal.sample(rng);
                    mu + (lv * T::c(0.5)).exp() * T::c(e)
                });
                Tensor::from_vec(m.shape(), data.collect())
            }
        })
    }

    /// Batched decoding clamped to `[0, 1]`.
    pub fn decode_tensor(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        match z.shape() {
            [_, c, _, _] if *c == self.config.latent_channels => {}
            s => return Err(Error::Shape(format!("latent {s:?} must be [B, {}, H_z, W_z]", self.config.latent_channels))),
        }
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.decode_graph(&mut g, zv);
        let out = g.clamp(out, 0.0, 1.0);
        Ok(g.value(out).clone())
    }
}

fn field_tensor(field: &WeatherField) -> Tensor<f32> {
    let (h, w) = field.shape();
    Tensor::from_vec(&[1, 1, h, w], field.data.iter().copied().collect())
}

impl Autoencoder<f32> {
    /// Encode one normalized field to a `C_z × H/f × W/f` latent.
    pub fn encode<R: Rng + ?Sized>(&self, field: &WeatherField, mode: EncodeMode, rng: &mut R) -> Result<LatentTensor> {
        if !field.normalized {
            return Err(Error::InvalidArgument("autoencoder input must be normalized".into()));
        }
        let z = self.encode_tensor(&field_tensor(field), mode, rng)?;
        let s = z.shape()[1..].to_vec();
        Ok(LatentTensor { data: z.reshape(&s), source: (field.region, field.variable) })
    }

    /// Decode to a normalized field carrying `norm` for later denormalization.
    pub fn decode(&self, z: &LatentTensor, norm: Option<crate::types::NormState>, timestamp: i64) -> Result<WeatherField> {
        let mut s = vec![1];
        s.extend_from_slice(z.shape());
        let out = self.decode_tensor(&z.data.clone().reshape(&s))?;
        let (h, w) = (out.shape()[2], out.shape()[3]);
        let data = Array2::from_shape_vec((h, w), out.into_data()).map_err(|e| Error::Shape(e.to_string()))?;
        let mut f = WeatherField::new(data, z.source.0, z.source.1, timestamp)?;
        f.norm = norm;
        f.normalized = true;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, "autoencoder", &self.config, &self.params, Map::new())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params, _) = load_checkpoint::<AeConfig>(path, "autoencoder")?;
        let mut model = Self::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        restore(&mut model.params, &params)?;
        Ok(model)
    }
}

/// Optimizer state and settings for autoencoder training.
pub struct AeTrainer {
    pub opt: AdamW<f32>,
    pub weights: AeLossWeights,
    pub grad_clip: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeStepMetrics {
    pub loss: AeLossParts,
    pub grad_norm: f64,
}

/// One optimizer step on `batch: [B, 1, H, W]`, posterior sampled with `rng`.
/// Full objective with the reparameterized latent `μ + exp(½·logvar)·eps`.
pub fn ae_objective_graph<T: Float>(model: &Autoencoder<T>, g: &mut Graph<T>, batch: &Tensor<T>, eps: &Tensor<T>, weights: &AeLossWeights) -> AeLossVars {
    let x = g.constant(batch.clone());
    let (mean, logvar) = model.encode_graph(g, x);
    let eps = g.constant(eps.clone());
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps);
    let z = g.add(mean, noise);
    let recon = model.decode_graph(g, z);
    ae_loss_graph(g, x, recon, mean, logvar, weights, None)
}

pub fn ae_train_step<R: Rng + ?Sized>(
    model: &mut Autoencoder<f32>,
    trainer: &mut AeTrainer,
    batch: &Tensor<f32>,
    lr: f64,
    step: usize,
    rng: &mut R,
) -> Result<AeStepMetrics> {
    model.check_input(batch.shape())?;
    let shape = model.latent_shape(batch.shape());
    let eps = Tensor::from_vec(&shape, (0..shape.iter().product()).map(|_| StandardNormal.sample(rng)).collect());
    let mut g = Graph::new();
    let vars = ae_objective_graph(model, &mut g, batch, &eps, &trainer.weights);
    let loss = AeLossParts {
        total: g.value(vars.total).item() as f64,
        rec: g.value(vars.rec).item() as f64,
        kl: g.value(vars.kl).item() as f64,
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { step, detail: format!("autoencoder loss {loss:?}") });
    }
    let mut grads = g.backward(vars.total).for_params(&model.params);
    let grad_norm = clip_grad_norm(&mut grads, trainer.grad_clip.unwrap_or(f64::INFINITY));
    trainer.opt.step(&mut model.params, &grads, lr);
    Ok(AeStepMetrics { loss, grad_norm })
}

/// Reconstruction map from a normalized field to its normalized reconstruction.
pub trait FieldCodec: Sync {
    fn reconstruct(&self, normalized: &Array2<f32>) -> Result<Array2<f32>>;
}

impl FieldCodec for Autoencoder<f32> {
    fn reconstruct(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        let (h, w) = x.dim();
        let t = Tensor::from_vec(&[1, 1, h, w], x.iter().copied().collect());
        let (z, _) = self.encode_moments(&t)?;
        let out = self.decode_tensor(&z)?;
        Array2::from_shape_vec((h, w), out.into_data()).map_err(|e| Error::Shape(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRow {
    pub variable: VariableId,
    pub fields: usize,
    /// Physical units.
    pub rmse: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub rows: Vec<ReconstructionRow>,
    /// Per-variable latent moments, present when the codec exposes latents.
    pub latents: BTreeMap<VariableId, LatentStats>,
}

/// Per-variable reconstruction RMSE/SSIM over the fields of `split` (all splits when `None`).
pub fn ae_reconstruction_report(
    manifest: &Manifest,
    codec: &dyn FieldCodec,
    norms: &NormTable,
    split: Option<Split>,
    ssim_ranges: &BTreeMap<VariableId, f64>,
) -> Result<ReconstructionReport> {
    let mut report = ReconstructionReport::default();
    for v in manifest.variables() {
        let norm = norms.get(v)?;
        let entries: Vec<_> = manifest.entries.iter().filter(|e| e.variable == Some(v) && split.is_none_or(|s| e.split == s)).collect();
        let results = crate::par::map_slice(&entries, |e| -> Result<(f64, f64)> {
            let gt = load_field(&manifest.resolve(e))?.into_weather()?;
            let n = normalize(&gt, &norm)?;
            let rec = WeatherField { data: codec.reconstruct(&n.data)?, ..n };
            let rec = denormalize(&rec)?;
            let range = ssim_ranges.get(&v).copied().unwrap_or_else(|| norm.physical_range());
            Ok((rmse_arrays(rec.data.view(), gt.data.view())?, ssim_arrays(rec.data.view(), gt.data.view(), range)?))
        });
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let n = results.len().max(1) as f64;
        report.rows.push(ReconstructionRow {
            variable: v,
            fields: results.len(),
            rmse: results.iter().map(|r| r.0).sum::<f64>() / n,
            ssim: results.iter().map(|r| r.1).sum::<f64>() / n,
        });
    }
    Ok(report)
}

/// Latent mean/std per variable over `fields` (normalized).
pub fn latent_statistics(ae: &Autoencoder<f32>, fields: &BTreeMap<VariableId, Vec<Array2<f32>>>) -> Result<BTreeMap<VariableId, LatentStats>> {
    let mut out = BTreeMap::new();
    for (v, list) in fields {
        let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
        for x in list {
            let (h, w) = x.dim();
            let t = Tensor::from_vec(&[1, 1, h, w], x.iter().copied().collect());
            let (m, _) = ae.encode_moments(&t)?;
            for &z in m.data() {
                s += z as f64;
                s2 += (z as f64) * (z as f64);
                n += 1;
            }
        }
        if n > 0 {
            let mean = s / n as f64;
            out.insert(*v, LatentStats { mean, std: (s2 / n as f64 - mean * mean).max(0.0).sqrt() });
        }
    }
    Ok(out)
}

/// Stack of `[1, H, W]` fields into `[B, 1, H, W]`.
pub fn batch_fields(fields: &[&Array2<f32>]) -> Tensor<f32> {
    let (h, w) = fields[0].dim();
    let mut data = Vec::with_capacity(fields.len() * h * w);
    for f in fields {
        data.extend(f.iter().copied());
    }
    Tensor::from_vec(&[fields.len(), 1, h, w], data)
}

/// Stack of `[C, H, W]` arrays into `[B, C, H, W]`.
pub fn batch_stacks(stacks: &[&Array3<f32>]) -> Tensor<f32> {
    let (c, h, w) = stacks[0].dim();
    let mut data = Vec::with_capacity(stacks.len() * c * h * w);
    for s in stacks {
        data.extend(s.iter().copied());
    }
    Tensor::from_vec(&[stacks.len(), c, h, w], data)
}
