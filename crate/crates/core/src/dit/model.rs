use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Map;
use synweather_autograd::{Float, Graph, Init, ParamSet, Tensor, Var};

use super::prompt::{vocabulary, PromptSpec};
use crate::autoencoder::LatentTensor;
use crate::checkpoint::{load_checkpoint, restore, save_checkpoint};
use crate::error::{Error, Result};
use crate::nn;

/// Vision transformer mapping a satellite stack onto the latent grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatEncoderConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub patch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub latent_channels: usize,
    pub patch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    pub max_prompt_len: usize,
    pub timesteps: usize,
    /// Std of the normal init used for modulation, output and embedding weights.
    pub init_std: f64,
    pub encoder: SatEncoderConfig,
}

impl DitConfig {
    pub fn reference() -> Self {
        Self {
            latent_channels: 4,
            patch: 2,
            hidden: 512,
            depth: 12,
            heads: 16,
            mlp_ratio: 4.0,
            freq_dim: 256,
            max_prompt_len: 16,
            timesteps: 1000,
            init_std: 0.02,
            encoder: SatEncoderConfig { in_channels: 10, out_channels: 10, patch: 8, hidden: 256, depth: 12, heads: 8, mlp_ratio: 4.0 },
        }
    }

    pub fn tiny() -> Self {
        Self {
            hidden: 128,
            depth: 4,
            heads: 4,
            freq_dim: 128,
            encoder: SatEncoderConfig { in_channels: 10, out_channels: 10, patch: 8, hidden: 64, depth: 2, heads: 4, mlp_ratio: 4.0 },
            ..Self::reference()
        }
    }

    /// Channels entering the patch embedding: noisy latent plus satellite features.
    pub fn input_channels(&self) -> usize {
        self.latent_channels + self.encoder.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let checks = [
            (self.hidden.is_multiple_of(self.heads), "hidden width must divide into heads"),
            (self.hidden.is_multiple_of(4), "hidden width must be a multiple of 4 for 2-D position features"),
            (e.hidden.is_multiple_of(e.heads), "encoder width must divide into heads"),
            (e.hidden.is_multiple_of(4), "encoder width must be a multiple of 4"),
            (self.freq_dim.is_multiple_of(2) && self.freq_dim > 0, "freq_dim must be even"),
            (self.patch > 0 && e.patch > 0, "patch sizes must be positive"),
            (self.timesteps > 0, "timesteps must be positive"),
        ];
        match checks.iter().find(|c| !c.0) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

fn mlp_width(d: usize, ratio: f64) -> usize {
    ((d as f64) * ratio).round() as usize
}

/// Sinusoidal features `[cos(t f_i), sin(t f_i)]` with geometric frequencies.
pub fn timestep_embedding<T: Float>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let (mut c, mut s) = (Vec::with_capacity(half), Vec::with_capacity(half));
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            c.push(T::c((ti as f64 * f).cos()));
            s.push(T::c((ti as f64 * f).sin()));
        }
        out.extend(c);
        out.extend(s);
    }
    Tensor::from_vec(&[t.len(), dim], out)
}

fn sincos_1d(dim: usize, pos: f64, out: &mut Vec<f64>) {
    let half = dim / 2;
    for i in 0..half {
        out.push((pos / 10000f64.powf(i as f64 / half as f64)).sin());
    }
    for i in 0..half {
        out.push((pos / 10000f64.powf(i as f64 / half as f64)).cos());
    }
}

/// Fixed 2-D sinusoidal positions for an `h × w` token grid, row-major.
fn pos_embed_2d<T: Float>(dim: usize, h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            let mut row = Vec::with_capacity(dim);
            sincos_1d(dim / 2, y as f64, &mut row);
            sincos_1d(dim / 2, x as f64, &mut row);
            data.extend(row.into_iter().map(T::c));
        }
    }
    Tensor::from_vec(&[h * w, dim], data)
}

#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    pub config: DitConfig,
    pub params: ParamSet<T>,
}

fn init_block<T: Float, R: Rng + ?Sized>(ps: &mut ParamSet<T>, prefix: &str, d: usize, ratio: f64, affine: bool, rng: &mut R) {
    if affine {
        nn::init_norm(ps, &format!("{prefix}.norm1"), d, rng);
        nn::init_norm(ps, &format!("{prefix}.norm2"), d, rng);
    }
    let m = mlp_width(d, ratio);
    nn::init_xavier(ps, &format!("{prefix}.qkv"), d, 3 * d, rng);
    nn::init_xavier(ps, &format!("{prefix}.proj"), d, d, rng);
    nn::init_xavier(ps, &format!("{prefix}.fc1"), d, m, rng);
    nn::init_xavier(ps, &format!("{prefix}.fc2"), m, d, rng);
}

fn attn_mlp<T: Float>(g: &mut Graph<T>, ps: &ParamSet<T>, h: Var, prefix: &str, heads: usize, which: &str) -> Var {
    match which {
        "attn" => {
            let qkv = nn::linear(g, ps, h, &format!("{prefix}.qkv"));
            let a = g.attention(qkv, heads);
            nn::linear(g, ps, a, &format!("{prefix}.proj"))
        }
        _ => {
            let m = nn::linear(g, ps, h, &format!("{prefix}.fc1"));
            let m = g.gelu(m);
            nn::linear(g, ps, m, &format!("{prefix}.fc2"))
        }
    }
}

/// `x * (1 + scale) + shift` with per-sample `[B, D]` modulation over `[B, L, D]`.
fn modulate<T: Float>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Var {
    let len = g.shape(x)[1];
    let s = g.add_scalar(scale, 1.0);
    let s = g.expand_tokens(s, len);
    let sh = g.expand_tokens(shift, len);
    let y = g.mul(x, s);
    g.add(y, sh)
}

fn gated<T: Float>(g: &mut Graph<T>, x: Var, gate: Var) -> Var {
    let len = g.shape(x)[1];
    let gt = g.expand_tokens(gate, len);
    g.mul(x, gt)
}

impl<T: Float> Denoiser<T> {
    pub fn new<R: Rng + ?Sized>(config: DitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let e = &config.encoder;
        let std = Init::Normal(config.init_std);

        let enc_in = e.in_channels * e.patch * e.patch;
        nn::init_xavier(&mut ps, "sat.embed", enc_in, e.hidden, rng);
        for i in 0..e.depth {
            init_block(&mut ps, &format!("sat.blocks.{i}"), e.hidden, e.mlp_ratio, true, rng);
        }
        nn::init_norm(&mut ps, "sat.norm_out", e.hidden, rng);
        nn::init_xavier(&mut ps, "sat.out", e.hidden, e.out_channels, rng);

        let d = config.hidden;
        ps.init("prompt.table", &[vocabulary().len(), d], std, rng);
        ps.init("prompt.pos", &[config.max_prompt_len, d], std, rng);

        nn::init_linear(&mut ps, "t_embed.fc1", config.freq_dim, d, std, rng);
        nn::init_linear(&mut ps, "t_embed.fc2", d, d, std, rng);

        let p_in = config.input_channels() * config.patch * config.patch;
        nn::init_xavier(&mut ps, "x_embed", p_in, d, rng);
        for i in 0..config.depth {
            let prefix = format!("blocks.{i}");
            init_block(&mut ps, &prefix, d, config.mlp_ratio, false, rng);
            nn::init_linear(&mut ps, &format!("{prefix}.ada"), d, 6 * d, std, rng);
        }
        nn::init_linear(&mut ps, "final.ada", d, 2 * d, std, rng);
        nn::init_linear(&mut ps, "final.out", d, config.latent_channels * config.patch * config.patch, std, rng);
        Ok(Self { config, params: ps })
    }

    pub fn cast<U: Float>(&self) -> Denoiser<U> {
        Denoiser { config: self.config.clone(), params: self.params.cast() }
    }

    /// `[B, C, H, W]` stack → `[B, C_out, H/p, W/p]` features.
    pub fn encode_satellite_graph(&self, g: &mut Graph<T>, stack: Var) -> Var {
        let (ps, e) = (&self.params, &self.config.encoder);
        let s = g.shape(stack).to_vec();
        let (hz, wz) = (s[2] / e.patch, s[3] / e.patch);
        let tok = g.patchify(stack, e.patch);
        let mut x = nn::linear(g, ps, tok, "sat.embed");
        let pos = g.constant(pos_embed_2d(e.hidden, hz, wz));
        x = g.add_trailing(x, pos);
        for i in 0..e.depth {
            let prefix = format!("sat.blocks.{i}");
            for (norm, which) in [("norm1", "attn"), ("norm2", "mlp")] {
                let h = nn::layer_norm(g, ps, x, &format!("{prefix}.{norm}"));
                let h = attn_mlp(g, ps, h, &prefix, e.heads, which);
                x = g.add(x, h);
            }
        }
        x = nn::layer_norm(g, ps, x, "sat.norm_out");
        let out = nn::linear(g, ps, x, "sat.out");
        g.unpatchify(out, 1, e.out_channels, hz, wz)
    }

    /// Token ids → `[L_p, D]` embeddings with learned positions.
    pub fn embed_prompt_graph(&self, g: &mut Graph<T>, ids: &[usize]) -> Var {
        let table = nn::p(g, &self.params, "prompt.table");
        let pos = nn::p(g, &self.params, "prompt.pos");
        let tok = g.embedding(table, ids);
        let pos = g.narrow(pos, 0, 0, ids.len());
        g.add(tok, pos)
    }

    /// ε-prediction for `z_t: [B, C_z, H_z, W_z]` given features `cond` and prompt `[L_p, D]`.
    pub fn predict_noise_graph(&self, g: &mut Graph<T>, z_t: Var, t: &[usize], cond: Var, prompt: Var) -> Var {
        let (ps, c) = (&self.params, &self.config);
        let s = g.shape(z_t).to_vec();
        let (b, hz, wz) = (s[0], s[2], s[3]);
        let (d, p) = (c.hidden, c.patch);

        let x = g.concat(&[z_t, cond], 1);
        let tok = g.patchify(x, p);
        let tok = nn::linear(g, ps, tok, "x_embed");
        let pos = g.constant(pos_embed_2d(d, hz / p, wz / p));
        let tok = g.add_trailing(tok, pos);
        let n_img = (hz / p) * (wz / p);

        let lp = g.shape(prompt)[0];
        let flat = g.reshape(prompt, &[1, lp * d]);
        let rep = g.expand_tokens(flat, b);
        let prompt_b = g.reshape(rep, &[b, lp, d]);
        let mut x = g.concat(&[prompt_b, tok], 1);

        let tf = g.constant(timestep_embedding(t, c.freq_dim));
        let te = nn::linear(g, ps, tf, "t_embed.fc1");
        let te = g.silu(te);
        let te = nn::linear(g, ps, te, "t_embed.fc2");
        let cond_vec = g.silu(te);

        for i in 0..c.depth {
            let prefix = format!("blocks.{i}");
            let m = nn::linear(g, ps, cond_vec, &format!("{prefix}.ada"));
            let chunk: Vec<Var> = (0..6).map(|k| g.narrow(m, 1, k * d, d)).collect();
            for (k, which) in [(0, "attn"), (3, "mlp")] {
                let h = g.layer_norm(x, None, 1e-6);
                let h = modulate(g, h, chunk[k], chunk[k + 1]);
                let h = attn_mlp(g, ps, h, &prefix, c.heads, which);
                let h = gated(g, h, chunk[k + 2]);
                x = g.add(x, h);
            }
        }
        let m = nn::linear(g, ps, cond_vec, "final.ada");
        let shift = g.narrow(m, 1, 0, d);
        let scale = g.narrow(m, 1, d, d);
        let h = g.layer_norm(x, None, 1e-6);
        let h = modulate(g, h, shift, scale);
        let out = nn::linear(g, ps, h, "final.out");
        let img = g.narrow(out, 1, lp, n_img);
        g.unpatchify(img, p, c.latent_channels, hz, wz)
    }

    fn check_prompt(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.config.max_prompt_len {
            return Err(Error::InvalidArgument(format!("prompt of {} tokens exceeds limit {}", ids.len(), self.config.max_prompt_len)));
        }
        let v = vocabulary().len();
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(())
    }

    fn check_stack(&self, shape: &[usize]) -> Result<()> {
        let e = &self.config.encoder;
        let f = e.patch * self.config.patch;
        match shape {
            [_, c, h, w] if *c == e.in_channels && h % f == 0 && w % f == 0 && *h > 0 && *w > 0 => Ok(()),
            _ => Err(Error::Shape(format!("satellite input {shape:?} must be [B, {}, H, W] with H, W divisible by {f}", e.in_channels))),
        }
    }

    /// Batched satellite features `[B, C_out, H/p, W/p]`.
    pub fn encode_satellite(&self, stack: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_stack(stack.shape())?;
        let mut g = Graph::new();
        let s = g.constant(stack.clone());
        let out = self.encode_satellite_graph(&mut g, s);
        Ok(g.value(out).clone())
    }

    pub fn embed_prompt(&self, prompt: &PromptSpec) -> Result<Tensor<T>> {
        self.check_prompt(&prompt.token_ids)?;
        let mut g = Graph::new();
        let out = self.embed_prompt_graph(&mut g, &prompt.token_ids);
        Ok(g.value(out).clone())
    }

    /// Batched noise prediction from precomputed features and prompt embedding.
    pub fn predict_noise_batch(&self, z_t: &Tensor<T>, t: &[usize], cond: &Tensor<T>, prompt_emb: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let (zs, cs) = (z_t.shape(), cond.shape());
        let ok = zs.len() == 4
            && cs.len() == 4
            && zs[1] == c.latent_channels
            && cs[1] == c.encoder.out_channels
            && zs[0] == cs[0]
            && zs[2..] == cs[2..]
            && zs[2] % c.patch == 0
            && zs[3] % c.patch == 0
            && t.len() == zs[0];
        if !ok {
            return Err(Error::Shape(format!("z_t {zs:?}, cond {cs:?}, {} timesteps", t.len())));
        }
        if let Some(bad) = t.iter().find(|&&t| t < 1 || t > c.timesteps) {
            return Err(Error::InvalidArgument(format!("timestep {bad} outside [1, {}]", c.timesteps)));
        }
        if prompt_emb.shape().len() != 2 || prompt_emb.shape()[1] != c.hidden || prompt_emb.shape()[0] > c.max_prompt_len {
            return Err(Error::Shape(format!("prompt embedding {:?}", prompt_emb.shape())));
        }
        let mut g = Graph::new();
        let z = g.constant(z_t.clone());
        let cv = g.constant(cond.clone());
        let pv = g.constant(prompt_emb.clone());
        let out = self.predict_noise_graph(&mut g, z, t, cv, pv);
        Ok(g.value(out).clone())
    }

    /// Image-token count for an `h × w` latent.
    pub fn image_tokens(&self, hz: usize, wz: usize) -> usize {
        (hz / self.config.patch) * (wz / self.config.patch)
    }
}

impl Denoiser<f32> {
    /// Single-sample noise prediction with the same shape as `z_t`.
    pub fn predict_noise(&self, z_t: &LatentTensor, t: usize, cond: &Tensor<f32>, prompt_emb: &Tensor<f32>) -> Result<LatentTensor> {
        let mut zs = vec![1];
        zs.extend_from_slice(z_t.shape());
        let mut cs = vec![1];
        cs.extend_from_slice(cond.shape());
        let out = self.predict_noise_batch(&z_t.data.clone().reshape(&zs), &[t], &cond.clone().reshape(&cs), prompt_emb)?;
        Ok(LatentTensor { data: out.reshape(z_t.shape()), source: z_t.source })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, "denoiser", &self.config, &self.params, Map::new())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params, _) = load_checkpoint::<DitConfig>(path, "denoiser")?;
        let mut model = Self::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        restore(&mut model.params, &params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::render_prompt;
    use crate::types::{RegionId, VariableId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_shapes_and_token_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Denoiser::<f32>::new(DitConfig::tiny(), &mut rng).unwrap();
        let stack = Tensor::full(&[2, 10, 64, 64], 0.4f32);
        let cond = m.encode_satellite(&stack).unwrap();
        assert_eq!(cond.shape(), &[2, 10, 8, 8]);
        let prompt = m.embed_prompt(&render_prompt(RegionId::Conus, VariableId::Cr)).unwrap();
        assert_eq!(prompt.shape(), &[12, 128]);
        let z = Tensor::full(&[2, 4, 8, 8], 0.1f32);
        let eps = m.predict_noise_batch(&z, &[10, 500], &cond, &prompt).unwrap();
        assert_eq!(eps.shape(), &[2, 4, 8, 8]);
        assert_eq!(m.image_tokens(32, 32), 256);
        assert!(m.predict_noise_batch(&z, &[0, 5], &cond, &prompt).is_err());
    }

    #[test]
    fn two_d_positions_are_distinct() {
        let p = pos_embed_2d::<f64>(16, 3, 3);
        let rows: Vec<&[f64]> = p.data().chunks(16).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert!(rows[i].iter().zip(rows[j]).any(|(a, b)| (a - b).abs() > 1e-6));
            }
        }
    }
}
