//! Prompt-conditioned latent diffusion for weather field synthesis from satellite stacks.
//!
//! Pipeline: [`synthgen`] scenes → [`preprocess`] patches → [`autoencoder`] latents →
//! [`dit`] denoiser trained by [`training`] under the [`diffusion`] schedule → [`metrics`].

pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod manifest;
pub mod metrics;
mod nn;
pub mod par;
pub mod preprocess;
pub mod rng;
pub mod swt1;
pub mod synthesis;
pub mod synthgen;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use manifest::{build_manifest, Manifest, ManifestEntry, Split, SplitRule};
pub use rng::RngPolicy;
pub use swt1::{load_field, save_field, FieldFile};
pub use types::{NormState, RegionId, SatelliteStack, Task, VariableId, WeatherField};
