//! Text-guided diffusion transformer: satellite encoder, prompt embedder and noise predictor.

mod model;
mod prompt;

pub use model::{timestep_embedding, Denoiser, DitConfig, SatEncoderConfig};
pub use prompt::{render_prompt, tokenize, vocabulary, PromptSpec};
