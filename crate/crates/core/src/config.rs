//! Sectioned TOML run configuration with `tiny` and `reference` presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeConfig, AeLossWeights};
use crate::diffusion::{build_schedule, DdimSettings, DiffusionSchedule};
use crate::dit::DitConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::synthesis::SynthesisSettings;
use crate::synthgen::{GenOptions, SceneConfig};
use crate::training::{task_set, ChannelGroups, DataConfig, OptimConfig, RegressorConfig, StageConfig, TaskPreset, TaskSpec};
use crate::types::{RegionId, Task, VariableId};

pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSection {
    pub scenes: usize,
    pub scene: SceneConfig,
    pub options: GenOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeSection {
    pub model: AeConfig,
    pub train: StageConfig,
    pub loss: AeLossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitSection {
    pub model: DitConfig,
    pub train: StageConfig,
    pub finetune: StageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling_steps: usize,
    pub eta: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TasksSection {
    pub preset: TaskPreset,
    pub primary: Option<Task>,
    pub tasks: Vec<Task>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSection {
    pub groups: ChannelGroups,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSection {
    pub model: RegressorConfig,
    pub train: StageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub output: PathBuf,
    pub gen: GenSection,
    pub data: DataConfig,
    pub ae: AeSection,
    pub dit: DitSection,
    pub diffusion: DiffusionSection,
    pub optim: OptimConfig,
    pub tasks: TasksSection,
    pub ablation: AblationSection,
    pub metrics: MetricsConfig,
    pub baseline: BaselineSection,
}

impl RunConfig {
    /// 64×64 fields, 8×8 latents, hidden 128, depth 4, heads 4; CONUS reflectivity only.
    pub fn tiny() -> Self {
        let scene = SceneConfig::default();
        Self {
            preset: "tiny".into(),
            seed: 0,
            output: PathBuf::from("runs/tiny"),
            gen: GenSection { scenes: 200, scene, options: GenOptions { regions: vec![RegionId::Conus], ..GenOptions::default() } },
            data: DataConfig::tiny(),
            ae: AeSection { model: AeConfig::tiny(), train: StageConfig { steps: 1000, batch: 4 }, loss: AeLossWeights::default() },
            dit: DitSection {
                model: DitConfig::tiny(),
                train: StageConfig { steps: 3000, batch: 16 },
                finetune: StageConfig { steps: 1000, batch: 16 },
            },
            diffusion: DiffusionSection { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02, sampling_steps: 20, eta: 0.0, seed: 0 },
            optim: OptimConfig::for_steps(3000),
            tasks: TasksSection { preset: TaskPreset::Uniform, primary: None, tasks: vec![Task::new(RegionId::Conus, VariableId::Cr)] },
            ablation: AblationSection { groups: ChannelGroups::default() },
            metrics: MetricsConfig::default(),
            baseline: BaselineSection { model: RegressorConfig::default(), train: StageConfig { steps: 500, batch: 8 } },
        }
    }

    /// Full-size architecture, six standard tasks, 600K steps at batch 16.
    pub fn reference() -> Self {
        let tiny = Self::tiny();
        Self {
            preset: "reference".into(),
            output: PathBuf::from("runs/reference"),
            gen: GenSection {
                scenes: 2000,
                scene: SceneConfig { grid: (256, 256), ..SceneConfig::default() },
                options: GenOptions::default(),
            },
            data: DataConfig::reference(),
            ae: AeSection { model: AeConfig::reference(), train: StageConfig { steps: 100_000, batch: 16 }, ..tiny.ae },
            dit: DitSection {
                model: DitConfig::reference(),
                train: StageConfig { steps: 600_000, batch: 16 },
                finetune: StageConfig { steps: 1000, batch: 16 },
            },
            optim: OptimConfig::for_steps(600_000),
            tasks: TasksSection { preset: TaskPreset::Uniform, primary: None, tasks: Task::STANDARD.to_vec() },
            ..tiny
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "reference" => Ok(Self::reference()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected tiny or reference)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Write `config.toml` into `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.scene.validate()?;
        self.ae.model.validate()?;
        self.dit.model.validate()?;
        let (ae, dit) = (&self.ae.model, &self.dit.model);
        if ae.latent_channels != dit.latent_channels {
            return Err(Error::Config(format!("ae latent channels {} differ from dit {}", ae.latent_channels, dit.latent_channels)));
        }
        if ae.downsample() != dit.encoder.patch {
            return Err(Error::Config(format!("ae downsampling {} differs from satellite patch {}", ae.downsample(), dit.encoder.patch)));
        }
        if dit.timesteps != self.diffusion.timesteps {
            return Err(Error::Config(format!("dit timesteps {} differ from diffusion timesteps {}", dit.timesteps, self.diffusion.timesteps)));
        }
        let w = self.data.window;
        if w == 0 || !w.is_multiple_of(ae.downsample() * dit.patch) || self.data.stride == 0 {
            return Err(Error::Config(format!("window {w} must be a positive multiple of {}", ae.downsample() * dit.patch)));
        }
        if self.gen.scene.channels.len() != dit.encoder.in_channels {
            return Err(Error::Config(format!("{} scene channels but the encoder expects {}", self.gen.scene.channels.len(), dit.encoder.in_channels)));
        }
        self.ablation.groups.validate(dit.encoder.in_channels)?;
        self.task_specs()?;
        self.schedule()?;
        Ok(())
    }

    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        task_set(&self.tasks.tasks, self.tasks.preset, self.tasks.primary)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.diffusion.timesteps, self.diffusion.beta_start, self.diffusion.beta_end)
    }

    pub fn ddim(&self) -> DdimSettings {
        DdimSettings { steps: self.diffusion.sampling_steps, eta: self.diffusion.eta }
    }

    pub fn synthesis(&self) -> SynthesisSettings {
        SynthesisSettings { window: self.data.window, stride: self.data.stride, seed: self.diffusion.seed }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig { seed: self.seed, ..self.gen.scene.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip_through_toml() {
        for cfg in [RunConfig::tiny(), RunConfig::reference()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        }
        let text = RunConfig::tiny().to_toml().unwrap();
        assert!(text.contains("[ablation.groups]"));
        let parsed: toml::Table = text.parse().unwrap();
        assert_eq!(parsed["ablation"]["groups"]["GAS"].as_array().unwrap().len(), 2);
        assert_eq!(parsed["metrics"]["variables"]["CR"]["csi_thresholds"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let mut cfg = RunConfig::tiny();
        cfg.dit.model.latent_channels = 8;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::preset("huge").is_err());
    }
}
