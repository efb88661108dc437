//! Abstract interface to a latent diffusion model.
//!
//! A backend provides noise prediction, text embedding, the image↔latent
//! codec, DIFT-style intermediate features and cross-attention captures.
//! [`MockBackend`] is a deterministic, seed-derived stand-in that makes every
//! algebraic property of the pipeline testable without model weights.

mod mock;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

pub use mock::{MockBackend, MockConfig, MOCK_DIFT_LAYERS};

use crate::image::RgbImage;
use crate::latent::Latent;
use crate::schedule::Timestep;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Conditional,
    Unconditional,
}

/// Token-wise prompt embedding (`tokens × dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub data: Array2<f32>,
    pub kind: EmbeddingKind,
}

impl TextEmbedding {
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Intermediate network features at a backend-defined resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `feature_dim × h × w`.
    pub data: Array3<f32>,
    pub source_timestep: Timestep,
    pub source_layer: String,
}

impl FeatureMap {
    pub fn new(data: Array3<f32>) -> Self {
        Self {
            data,
            source_timestep: Timestep::CLEAN,
            source_layer: String::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    /// Multiplies every feature vector by `k`.
    pub fn scaled(&self, k: f32) -> Self {
        Self {
            data: self.data.mapv(|v| v * k),
            ..self.clone()
        }
    }
}

/// Cross-attention probabilities of one attention layer for the requested tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub name: String,
    /// One `selected_tokens × h × w` array per head.
    pub heads: Vec<Array3<f32>>,
}

impl AttentionLayer {
    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.heads[0].dim();
        (h, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub token_indices: Vec<usize>,
    pub layers: Vec<AttentionLayer>,
}

impl AttentionCapture {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.iter().any(|l| l.heads.is_empty()) {
            return Err(Error::Contract("attention capture has no maps".into()));
        }
        for layer in &self.layers {
            for head in &layer.heads {
                if head.dim().0 != self.token_indices.len() {
                    return Err(Error::shape(&[self.token_indices.len()], &[head.dim().0]));
                }
                if head.iter().any(|&v| !v.is_finite() || v < 0.0) {
                    return Err(Error::Contract(format!(
                        "negative or non-finite attention weight in layer {}",
                        layer.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything the transfer pipeline needs from a latent diffusion model.
///
/// Implementations must be deterministic: identical inputs give
/// bit-identical outputs.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// Stable identity used in cache keys; changes whenever outputs could.
    fn fingerprint(&self) -> String;

    fn latent_channels(&self) -> usize;

    /// Image size `(height, width)` the codec expects.
    fn image_size(&self) -> (usize, usize);

    fn token_count(&self) -> usize;

    /// Embeds a prompt; the empty prompt yields the unconditional embedding.
    fn embed_text(&self, prompt: &str) -> Result<TextEmbedding>;

    /// Token positions of `word` (all pieces of a multi-token word) in `prompt`.
    fn token_indices(&self, prompt: &str, word: &str) -> Result<Vec<usize>>;

    /// Unguided noise prediction `ε_θ(x, t, emb)`.
    fn predict_noise_raw(&self, x: &Latent, t: Timestep, emb: &TextEmbedding) -> Result<Latent>;

    /// Vector-Jacobian product `∂⟨cotangent, ε_θ(x, t, uncond)⟩ / ∂uncond`.
    ///
    /// `None` means the backend cannot differentiate through the text path.
    fn uncond_vjp(
        &self,
        x: &Latent,
        t: Timestep,
        uncond: &TextEmbedding,
        cotangent: &Latent,
    ) -> Result<Option<Array2<f32>>>;

    fn encode_image(&self, image: &RgbImage) -> Result<Latent>;

    fn decode_latent(&self, x0: &Latent) -> Result<RgbImage>;

    /// Features of an `x0`-space latent, re-noised to `t` internally.
    fn extract_dift_features(&self, x0: &Latent, t: Timestep, layer: &str) -> Result<FeatureMap>;

    /// Cross-attention maps of a conditioned pass at `(x, t)` for the given tokens.
    fn capture_cross_attention(
        &self,
        x: &Latent,
        t: Timestep,
        cond: &TextEmbedding,
        token_indices: &[usize],
    ) -> Result<AttentionCapture>;

    /// Classifier-free guided prediction `ε_u + s·(ε_c − ε_u)`.
    ///
    /// At `guidance_scale == 1` the conditional prediction is returned as is.
    fn predict_noise(
        &self,
        x: &Latent,
        t: Timestep,
        cond: &TextEmbedding,
        uncond: &TextEmbedding,
        guidance_scale: f32,
    ) -> Result<Latent> {
        let eps_c = self.predict_noise_raw(x, t, cond)?;
        if guidance_scale == 1.0 {
            return Ok(eps_c);
        }
        let eps_u = self.predict_noise_raw(x, t, uncond)?;
        let data = Zip::from(&eps_u.data)
            .and(&eps_c.data)
            .map_collect(|&u, &c| u + guidance_scale * (c - u));
        Ok(Latent::new(data).with_step(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Diffusion,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(Self::Mock),
            "diffusion" => Ok(Self::Diffusion),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        }
    }
}

/// Settings for a pretrained latent diffusion model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub model_id: String,
    pub device: String,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            model_id: "stabilityai/stable-diffusion-2-base".into(),
            device: "cuda".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub guidance_scale: f32,
    pub dift_layer: String,
    pub dift_timestep: i32,
    /// Only attention layers at this square resolution feed the mask; `None` uses all.
    pub attention_resolution: Option<usize>,
    pub mock: MockConfig,
    pub diffusion: DiffusionConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            guidance_scale: 7.5,
            dift_layer: "up1".into(),
            dift_timestep: 261,
            attention_resolution: Some(16),
            mock: MockConfig::default(),
            diffusion: DiffusionConfig::default(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 1.0) {
            return Err(Error::Config(format!(
                "guidance scale must be >= 1, got {}",
                self.guidance_scale
            )));
        }
        if self.dift_timestep < 0 {
            return Err(Error::Config("DIFT timestep must be non-negative".into()));
        }
        Ok(())
    }
}

/// Instantiates the configured backend.
pub fn open(cfg: &BackendConfig) -> Result<Box<dyn Backend>> {
    cfg.validate()?;
    match cfg.kind {
        BackendKind::Mock => Ok(Box::new(MockBackend::new(cfg.mock.clone())?)),
        BackendKind::Diffusion => Err(Error::Backend(format!(
            "diffusion backend `{}` on `{}` is unavailable: this build ships no model runtime",
            cfg.diffusion.model_id, cfg.diffusion.device
        ))),
    }
}
