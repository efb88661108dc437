//! Deterministic stand-in backend.
//!
//! * noise: `ε(x, t) = tanh(W_b·x + b_b) + κ·P·mean(emb)`, with a seed-derived
//!   channel-mixing matrix `W_b` per band of 100 timesteps, applied pointwise
//!   over the grid. `κ` (text coupling) defaults to 0, making the predictor
//!   text-independent.
//! * codec: `f×f` box average down / nearest replication up over RGB plus a
//!   luma-like fourth channel; lossless at `f = 1`.
//! * DIFT features: `tanh` of a fixed random projection of 3×3 latent patches
//!   after re-noising with a fixed per-layer noise draw.
//! * attention: a softmax over fixed Gaussian bumps, one per token index.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{AttentionCapture, AttentionLayer, Backend, EmbeddingKind, FeatureMap, TextEmbedding};
use crate::exec::Exec;
use crate::image::RgbImage;
use crate::latent::Latent;
use crate::rng;
use crate::schedule::{compose_latent, Schedule, ScheduleConfig, Timestep};
use crate::{Error, Result};

/// Known feature layers and their spatial stride relative to the latent grid.
pub const MOCK_DIFT_LAYERS: [(&str, usize); 3] = [("up0", 2), ("up1", 1), ("up2", 1)];

const BAND_WIDTH: i32 = 100;
const TRAIN_TIMESTEPS: usize = 1000;
const HEAD_SIGMAS: [f32; 2] = [0.14, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub seed: u64,
    pub latent_channels: usize,
    /// Side of the square latent grid.
    pub latent_size: usize,
    pub token_count: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    /// Codec down-sampling factor.
    pub downsample: usize,
    /// Approximate operator norm of each noise band's mixing matrix.
    pub noise_gain: f32,
    pub text_coupling: f32,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            latent_channels: 4,
            latent_size: 16,
            token_count: 8,
            embed_dim: 16,
            feature_dim: 32,
            downsample: 1,
            noise_gain: 0.6,
            text_coupling: 0.0,
        }
    }
}

struct NoiseBand {
    weight: Array2<f32>,
    bias: Array1<f32>,
}

pub struct MockBackend {
    cfg: MockConfig,
    schedule: Schedule,
    bands: Vec<NoiseBand>,
    text_proj: Array2<f32>,
    dift_proj: HashMap<&'static str, Array2<f32>>,
    exec: Exec,
}

impl MockBackend {
    pub fn new(cfg: MockConfig) -> Result<Self> {
        let c = cfg.latent_channels;
        if c < 3 {
            return Err(Error::Config("mock backend needs at least 3 latent channels".into()));
        }
        if cfg.latent_size == 0 || cfg.downsample == 0 || cfg.embed_dim == 0 || cfg.feature_dim == 0 {
            return Err(Error::Config("mock backend dimensions must be positive".into()));
        }
        if cfg.token_count < 3 {
            return Err(Error::Config("mock backend needs room for at least one word token".into()));
        }
        let schedule = Schedule::new(&ScheduleConfig {
            num_sample_steps: TRAIN_TIMESTEPS,
            num_train_timesteps: TRAIN_TIMESTEPS,
            steps_offset: 0,
            ..ScheduleConfig::default()
        })?;

        let sigma = cfg.noise_gain / (2.0 * (c as f32).sqrt());
        let bands = (0..TRAIN_TIMESTEPS as i32 / BAND_WIDTH)
            .map(|b| {
                let mut r = rng::stream(cfg.seed, &format!("noise-band:{b}"));
                NoiseBand {
                    weight: Array2::from_shape_vec((c, c), rng::normals(&mut r, c * c, sigma))
                        .expect("sized"),
                    bias: Array1::from(rng::normals(&mut r, c, cfg.noise_gain / 6.0)),
                }
            })
            .collect();

        let mut r = rng::stream(cfg.seed, "text-projection");
        let text_proj = Array2::from_shape_vec(
            (c, cfg.embed_dim),
            rng::normals(&mut r, c * cfg.embed_dim, 1.0 / (cfg.embed_dim as f32).sqrt()),
        )
        .expect("sized");

        let patch = c * 9;
        let dift_proj = MOCK_DIFT_LAYERS
            .iter()
            .map(|&(name, _)| {
                let mut r = rng::stream(cfg.seed, &format!("dift-projection:{name}"));
                let p = Array2::from_shape_vec(
                    (cfg.feature_dim, patch),
                    rng::normals(&mut r, cfg.feature_dim * patch, 1.0 / (patch as f32).sqrt()),
                )
                .expect("sized");
                (name, p)
            })
            .collect();

        Ok(Self {
            cfg,
            schedule,
            bands,
            text_proj,
            dift_proj,
            exec: Exec::default(),
        })
    }

    /// Execution policy for feature extraction; results do not depend on it.
    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &MockConfig {
        &self.cfg
    }

    /// The backend's shape for a given grid.
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.cfg.latent_channels, self.cfg.latent_size, self.cfg.latent_size]
    }

    pub fn tokenize(&self, prompt: &str) -> Vec<String> {
        let mut tokens = vec!["<bos>".to_string()];
        tokens.extend(words(prompt).take(self.cfg.token_count - 2));
        tokens.push("<eos>".into());
        while tokens.len() < self.cfg.token_count {
            tokens.push("<pad>".into());
        }
        tokens
    }

    fn band(&self, t: Timestep) -> &NoiseBand {
        let idx = (t.0.max(0) / BAND_WIDTH) as usize;
        &self.bands[idx.min(self.bands.len() - 1)]
    }

    fn check_latent(&self, x: &Latent) -> Result<()> {
        if x.channels() != self.cfg.latent_channels {
            let [_, h, w] = x.shape();
            return Err(Error::shape(&[self.cfg.latent_channels, h, w], &x.shape()));
        }
        Ok(())
    }

    fn check_embedding(&self, emb: &TextEmbedding) -> Result<()> {
        let expected = (self.cfg.token_count, self.cfg.embed_dim);
        if emb.data.dim() != expected {
            let (a, b) = emb.data.dim();
            return Err(Error::shape(&[expected.0, expected.1], &[a, b]));
        }
        Ok(())
    }

    fn check_timestep(&self, t: Timestep) -> Result<()> {
        if t.0 >= TRAIN_TIMESTEPS as i32 || t.0 < Timestep::CLEAN.0 {
            return Err(Error::UnknownTimestep(t.0));
        }
        Ok(())
    }

    // Per-channel shift contributed by the text path.
    fn text_bias(&self, emb: &TextEmbedding) -> Array1<f32> {
        if self.cfg.text_coupling == 0.0 {
            return Array1::zeros(self.cfg.latent_channels);
        }
        let mean = emb.data.mean_axis(ndarray::Axis(0)).expect("non-empty embedding");
        self.text_proj.dot(&mean) * self.cfg.text_coupling
    }
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

fn block_average(x: &Array3<f32>, stride: usize) -> Array3<f32> {
    if stride == 1 {
        return x.clone();
    }
    let (c, h, w) = x.dim();
    let (hh, ww) = (h.div_ceil(stride), w.div_ceil(stride));
    Array3::from_shape_fn((c, hh, ww), |(k, i, j)| {
        let (y0, x0) = (i * stride, j * stride);
        let (y1, x1) = ((y0 + stride).min(h), (x0 + stride).min(w));
        let mut sum = 0.0f32;
        for y in y0..y1 {
            for xx in x0..x1 {
                sum += x[[k, y, xx]];
            }
        }
        sum / ((y1 - y0) * (x1 - x0)) as f32
    })
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn fingerprint(&self) -> String {
        format!(
            "mock:v1:{}",
            serde_json::to_string(&self.cfg).expect("config serializes")
        )
    }

    fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    fn image_size(&self) -> (usize, usize) {
        let side = self.cfg.latent_size * self.cfg.downsample;
        (side, side)
    }

    fn token_count(&self) -> usize {
        self.cfg.token_count
    }

    fn embed_text(&self, prompt: &str) -> Result<TextEmbedding> {
        let tokens = self.tokenize(prompt);
        let d = self.cfg.embed_dim;
        let mut data = Array2::zeros((tokens.len(), d));
        for (row, tok) in tokens.iter().enumerate() {
            let mut r = rng::stream(self.cfg.seed, &format!("token:{tok}"));
            let v = rng::normals(&mut r, d, 1.0);
            data.row_mut(row).assign(&Array1::from(v));
        }
        let kind = if words(prompt).next().is_none() {
            EmbeddingKind::Unconditional
        } else {
            EmbeddingKind::Conditional
        };
        Ok(TextEmbedding { data, kind })
    }

    fn token_indices(&self, prompt: &str, word: &str) -> Result<Vec<usize>> {
        let tokens = self.tokenize(prompt);
        let pieces: Vec<String> = words(word).collect();
        if pieces.is_empty() {
            return Err(Error::Config("object word is empty".into()));
        }
        let idx: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, tok)| pieces.contains(tok))
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return Err(Error::Config(format!(
                "object word `{word}` does not occur in prompt `{prompt}`"
            )));
        }
        Ok(idx)
    }

    fn predict_noise_raw(&self, x: &Latent, t: Timestep, emb: &TextEmbedding) -> Result<Latent> {
        self.check_latent(x)?;
        self.check_embedding(emb)?;
        self.check_timestep(t)?;
        let band = self.band(t);
        let shift = self.text_bias(emb);
        let (c, h, w) = x.data.dim();
        let mut out = Array3::zeros((c, h, w));
        for i in 0..h {
            for j in 0..w {
                for o in 0..c {
                    let mut acc = band.bias[o];
                    for k in 0..c {
                        acc += band.weight[[o, k]] * x.data[[k, i, j]];
                    }
                    out[[o, i, j]] = acc.tanh() + shift[o];
                }
            }
        }
        Ok(Latent::new(out).with_step(t))
    }

    fn uncond_vjp(
        &self,
        x: &Latent,
        t: Timestep,
        uncond: &TextEmbedding,
        cotangent: &Latent,
    ) -> Result<Option<Array2<f32>>> {
        self.check_latent(x)?;
        self.check_embedding(uncond)?;
        self.check_timestep(t)?;
        x.ensure_same_shape(cotangent)?;
        let per_channel = cotangent.data.sum_axis(ndarray::Axis(2)).sum_axis(ndarray::Axis(1));
        let row = self.text_proj.t().dot(&per_channel)
            * (self.cfg.text_coupling / self.cfg.token_count as f32);
        let grad = Array2::from_shape_fn(uncond.data.dim(), |(_, d)| row[d]);
        Ok(Some(grad))
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Latent> {
        let (h, w, _) = image.data.dim();
        let f = self.cfg.downsample;
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(&[h - h % f, w - w % f, 3], &[h, w, 3]));
        }
        let c = self.cfg.latent_channels;
        let (lh, lw) = (h / f, w / f);
        let norm = (f * f) as f32;
        let mut out = Array3::zeros((c, lh, lw));
        for i in 0..lh {
            for j in 0..lw {
                for ch in 0..3 {
                    let mut sum = 0.0f32;
                    for y in i * f..(i + 1) * f {
                        for x in j * f..(j + 1) * f {
                            sum += image.data[[y, x, ch]];
                        }
                    }
                    out[[ch, i, j]] = sum / norm;
                }
                if c >= 4 {
                    out[[3, i, j]] = (out[[0, i, j]] + out[[1, i, j]] + out[[2, i, j]]) / 3.0;
                }
            }
        }
        Ok(Latent::new(out))
    }

    fn decode_latent(&self, x0: &Latent) -> Result<RgbImage> {
        self.check_latent(x0)?;
        let f = self.cfg.downsample;
        let (_, lh, lw) = x0.data.dim();
        let d = &x0.data;
        let mut out = Array3::zeros((lh * f, lw * f, 3));
        for i in 0..lh {
            for j in 0..lw {
                let luma = if self.cfg.latent_channels >= 4 {
                    d[[3, i, j]] - (d[[0, i, j]] + d[[1, i, j]] + d[[2, i, j]]) / 3.0
                } else {
                    0.0
                };
                for ch in 0..3 {
                    let v = d[[ch, i, j]] + luma;
                    for y in i * f..(i + 1) * f {
                        for x in j * f..(j + 1) * f {
                            out[[y, x, ch]] = v;
                        }
                    }
                }
            }
        }
        RgbImage::new(out)
    }

    fn extract_dift_features(&self, x0: &Latent, t: Timestep, layer: &str) -> Result<FeatureMap> {
        self.check_latent(x0)?;
        self.check_timestep(t)?;
        let (name, stride) = MOCK_DIFT_LAYERS
            .iter()
            .copied()
            .find(|(n, _)| *n == layer)
            .ok_or_else(|| Error::Config(format!("unknown DIFT layer `{layer}`")))?;
        let proj = &self.dift_proj[name];

        let noisy = if t.is_clean() {
            x0.clone()
        } else {
            let mut r = rng::stream(self.cfg.seed, &format!("dift-noise:{name}"));
            let noise = Latent::new(
                Array3::from_shape_vec(x0.data.dim(), rng::normals(&mut r, x0.len(), 1.0))
                    .expect("sized"),
            );
            compose_latent(x0, &noise, t, &self.schedule)?
        };
        let coarse = block_average(&noisy.data, stride);
        let (c, h, w) = coarse.dim();
        let fdim = self.cfg.feature_dim;

        let mut flat = vec![0.0f32; h * w * fdim];
        self.exec.fill_chunks(&mut flat, fdim, |loc, out| {
            let (i, j) = (loc / w, loc % w);
            let mut patch = Vec::with_capacity(c * 9);
            for k in 0..c {
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let y = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                        let x = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                        patch.push(coarse[[k, y, x]]);
                    }
                }
            }
            for (f, o) in out.iter_mut().enumerate() {
                let acc: f32 = proj.row(f).iter().zip(&patch).map(|(a, b)| a * b).sum();
                *o = acc.tanh();
            }
        });
        // Stored location-major above; present as feature × h × w.
        let data = Array3::from_shape_fn((fdim, h, w), |(f, i, j)| flat[(i * w + j) * fdim + f]);
        Ok(FeatureMap {
            data,
            source_timestep: t,
            source_layer: name.to_string(),
        })
    }

    fn capture_cross_attention(
        &self,
        x: &Latent,
        t: Timestep,
        cond: &TextEmbedding,
        token_indices: &[usize],
    ) -> Result<AttentionCapture> {
        self.check_latent(x)?;
        self.check_embedding(cond)?;
        self.check_timestep(t)?;
        let n_tok = self.cfg.token_count;
        if let Some(&bad) = token_indices.iter().find(|&&k| k >= n_tok) {
            return Err(Error::Index(format!("token index {bad} >= token count {n_tok}")));
        }
        let (h, w) = x.grid();
        let grids = [("attn_full", h, w), ("attn_half", (h / 2).max(1), (w / 2).max(1))];
        let layers = grids
            .iter()
            .map(|&(name, gh, gw)| AttentionLayer {
                name: name.into(),
                heads: HEAD_SIGMAS
                    .iter()
                    .map(|&sigma| attention_head(n_tok, gh, gw, sigma, token_indices))
                    .collect(),
            })
            .collect();
        Ok(AttentionCapture {
            token_indices: token_indices.to_vec(),
            layers,
        })
    }
}

/// Center of token `k`'s bump in normalized coordinates.
fn token_center(k: usize, n_tok: usize) -> (f32, f32) {
    if k == 1 {
        return (0.5, 0.5);
    }
    let ring = (n_tok - 2).max(1) as f32;
    let theta = std::f32::consts::TAU * (k as f32 - 2.0) / ring;
    (0.5 + 0.28 * theta.sin(), 0.5 + 0.28 * theta.cos())
}

fn attention_head(n_tok: usize, h: usize, w: usize, sigma: f32, selected: &[usize]) -> Array3<f32> {
    let mut out = Array3::zeros((selected.len(), h, w));
    let mut logits = vec![0.0f32; n_tok];
    for i in 0..h {
        for j in 0..w {
            let (py, px) = ((i as f32 + 0.5) / h as f32, (j as f32 + 0.5) / w as f32);
            for (k, l) in logits.iter_mut().enumerate() {
                *l = if k == 0 {
                    1.0
                } else {
                    let (cy, cx) = token_center(k, n_tok);
                    let d2 = (py - cy).powi(2) + (px - cx).powi(2);
                    4.0 * (-d2 / (2.0 * sigma * sigma)).exp()
                };
            }
            let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = logits.iter().map(|l| (l - max).exp()).sum();
            for (s, &k) in selected.iter().enumerate() {
                out[[s, i, j]] = (logits[k] - max).exp() / z;
            }
        }
    }
    out
}
