//! Full-grid synthesis: tile the satellite stack, predict each window, reassemble, denormalize.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use synweather_autograd::Tensor;

use crate::autoencoder::{batch_stacks, Autoencoder};
use crate::diffusion::{ddim_sample, DdimSettings, DiffusionSchedule};
use crate::dit::{render_prompt, Denoiser, PromptSpec};
use crate::error::{Error, Result};
use crate::preprocess::{denormalize, mask_channels, reassemble_arrays, window_origins, Reassembled, StackNorm};
use crate::rng::RngPolicy;
use crate::types::{NormState, SatelliteStack, Task, WeatherField};

/// Maps one normalized stack window to a normalized target window.
pub trait FieldModel: Sync {
    fn predict_window(&self, stack: &Array3<f32>, task: Task, seed: u64) -> Result<Array2<f32>>;
}

/// Latent diffusion sampler: satellite features → DDIM in latent space → decoder.
pub struct LatentDiffusion<'a> {
    pub ae: &'a Autoencoder<f32>,
    pub dit: &'a Denoiser<f32>,
    pub sched: &'a DiffusionSchedule,
    pub ddim: DdimSettings,
}

impl LatentDiffusion<'_> {
    pub fn check_compatible(&self) -> Result<()> {
        let (ae, dit) = (&self.ae.config, &self.dit.config);
        if ae.latent_channels != dit.latent_channels {
            return Err(Error::Checkpoint(format!("autoencoder has {} latent channels, denoiser expects {}", ae.latent_channels, dit.latent_channels)));
        }
        if ae.downsample() != dit.encoder.patch {
            return Err(Error::Checkpoint(format!("latent grid factor {} differs from satellite patch {}", ae.downsample(), dit.encoder.patch)));
        }
        if self.sched.timesteps() != dit.timesteps {
            return Err(Error::Checkpoint(format!("schedule has {} steps, denoiser was built for {}", self.sched.timesteps(), dit.timesteps)));
        }
        Ok(())
    }

    /// Latent sample for one window with an explicit prompt.
    pub fn sample_latent(&self, stack: &Array3<f32>, prompt: &PromptSpec, seed: u64) -> Result<Tensor<f32>> {
        self.check_compatible()?;
        let s = batch_stacks(&[stack]);
        let cond = self.dit.encode_satellite(&s)?;
        let emb = self.dit.embed_prompt(prompt)?;
        let predictor = |z: &Tensor<f32>, t: usize| self.dit.predict_noise_batch(z, &[t], &cond, &emb);
        let cs = cond.shape();
        let shape = [1, self.dit.config.latent_channels, cs[2], cs[3]];
        let policy = RngPolicy::new(seed);
        ddim_sample(&predictor, &shape, self.sched, &self.ddim, &mut policy.stream("ddim-init", 0), &mut policy.stream("ddim-step", 0))
    }

    pub fn predict_with_prompt(&self, stack: &Array3<f32>, prompt: &PromptSpec, seed: u64) -> Result<Array2<f32>> {
        let z = self.sample_latent(stack, prompt, seed)?;
        let x = self.ae.decode_tensor(&z)?;
        let (h, w) = (x.shape()[2], x.shape()[3]);
        Array2::from_shape_vec((h, w), x.into_data()).map_err(|e| Error::Shape(e.to_string()))
    }
}

impl FieldModel for LatentDiffusion<'_> {
    fn predict_window(&self, stack: &Array3<f32>, task: Task, seed: u64) -> Result<Array2<f32>> {
        self.predict_with_prompt(stack, &render_prompt(task.region, task.variable), seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSettings {
    pub window: usize,
    pub stride: usize,
    pub seed: u64,
}

/// Synthesize a physical-unit field over the full stack grid.
pub fn synthesize_field(
    model: &dyn FieldModel,
    stack: &SatelliteStack,
    task: Task,
    target_norm: NormState,
    stack_norm: &StackNorm,
    masked_channels: &[usize],
    settings: &SynthesisSettings,
) -> Result<Reassembled> {
    if stack.region != task.region {
        return Err(Error::InvalidArgument(format!("stack region {} does not match task {task}", stack.region)));
    }
    let (h, w) = stack.grid();
    let mut norm_stack = stack_norm.apply(&stack.data);
    mask_channels(&mut norm_stack, masked_channels);
    let origins = window_origins(h, w, settings.window, settings.stride)?;
    let policy = RngPolicy::new(settings.seed);
    let tiles = crate::par::map_range(origins.len(), |i| {
        let (r, c) = origins[i];
        let window = norm_stack.slice(ndarray::s![.., r..r + settings.window, c..c + settings.window]).to_owned();
        model.predict_window(&window, task, policy.derive_seed("tile", i as u64))
    });
    let tiles = tiles.into_iter().collect::<Result<Vec<_>>>()?;
    let (data, coverage) = reassemble_arrays(origins.iter().copied().zip(tiles.iter().map(|t| t.view())), (h, w))?;
    let mut field = WeatherField::new(data, task.region, task.variable, stack.timestamp)?;
    field.norm = Some(target_norm);
    field.normalized = true;
    let mut field = denormalize(&field)?;
    ndarray::Zip::from(&mut field.data).and(&coverage).for_each(|v, &c| {
        if !c {
            *v = 0.0;
        }
    });
    Ok(Reassembled { field, coverage })
}

/// Satellite stack and prompt to a physical-unit field via latent diffusion.
#[allow(clippy::too_many_arguments)]
pub fn synthesize(
    stack: &SatelliteStack,
    prompt: &PromptSpec,
    ae: &Autoencoder<f32>,
    dit: &Denoiser<f32>,
    sched: &DiffusionSchedule,
    ddim: DdimSettings,
    target_norm: NormState,
    stack_norm: &StackNorm,
    settings: &SynthesisSettings,
) -> Result<Reassembled> {
    let model = LatentDiffusion { ae, dit, sched, ddim };
    model.check_compatible()?;
    synthesize_field(&model, stack, Task::new(prompt.region, prompt.variable), target_norm, stack_norm, &[], settings)
}
