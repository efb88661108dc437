//! End-to-end appearance transfer run: inversions, the guided denoising loop
//! with per-step matching, transfer and latent deviation, then decoding and
//! run persistence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archive::{save_latent, ArrayArchive};
use crate::backend::{self, Backend, BackendConfig};
use crate::cache::{cache_key, KeyParts, TrajectoryCache};
use crate::deviation::{deviation_step, DeviationStep, StepWindow};
use crate::image::{load_mask_png, save_mask_png, RgbImage};
use crate::inversion::{
    invert_latent, null_text_invert, replay_path, DdimInversionConfig, LatentTrajectory, NullTextConfig,
};
use crate::latent::Latent;
use crate::masking::{extract_object_mask, ObjectMask};
use crate::matching::{apply_correlation, Matcher};
use crate::rng::content_hash;
use crate::schedule::{ddim_step, predict_x0, Schedule, ScheduleConfig, Timestep};
use crate::transfer::{transfer_delta, transfer_x0, TransferParams};
use crate::{Error, Result};

pub const DEFAULT_SEED: u64 = 42;
const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    pub source_prompt: String,
    pub target_prompt: String,
    /// Word of the source prompt naming the object that receives the appearance.
    pub object_word: String,
    pub transfer: TransferParams,
    pub schedule: ScheduleConfig,
    pub backend: BackendConfig,
    pub null_text: NullTextConfig,
    pub inversion: DdimInversionConfig,
    pub cache_dir: Option<PathBuf>,
    pub use_cache: bool,
    pub out_dir: PathBuf,
    /// Root seed; it replaces the mock backend's own seed.
    pub seed: u64,
    /// Binary PNG used instead of the attention-derived mask.
    pub mask: Option<PathBuf>,
    pub export_mask: bool,
    pub dump_diagnostics: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: PathBuf::new(),
            target: PathBuf::new(),
            source_prompt: String::new(),
            target_prompt: String::new(),
            object_word: String::new(),
            transfer: TransferParams::default(),
            schedule: ScheduleConfig::default(),
            backend: BackendConfig::default(),
            null_text: NullTextConfig::default(),
            inversion: DdimInversionConfig::default(),
            cache_dir: None,
            use_cache: true,
            out_dir: PathBuf::from("out"),
            seed: DEFAULT_SEED,
            mask: None,
            export_mask: false,
            dump_diagnostics: false,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Backend settings with the run seed applied.
    pub fn effective_backend(&self) -> BackendConfig {
        let mut b = self.backend.clone();
        b.mock.seed = self.seed;
        b
    }

    /// Checks everything that can be checked without a backend.
    pub fn validate(&self) -> Result<()> {
        for (what, path) in [("source", &self.source), ("target", &self.target)] {
            if path.as_os_str().is_empty() {
                return Err(Error::Config(format!("{what} image path is not set")));
            }
            if !path.exists() {
                return Err(Error::MissingFile(path.clone()));
            }
        }
        if let Some(m) = &self.mask {
            if !m.exists() {
                return Err(Error::MissingFile(m.clone()));
            }
        }
        for (what, text) in [
            ("source prompt", &self.source_prompt),
            ("target prompt", &self.target_prompt),
            ("object word", &self.object_word),
        ] {
            if text.trim().is_empty() {
                return Err(Error::Config(format!("{what} is empty")));
            }
        }
        self.transfer.validate(self.schedule.num_sample_steps)?;
        self.backend.validate()?;
        self.null_text.validate()
    }
}

/// Pipeline stage at which a run failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Backend,
    LoadImages,
    SourceInversion,
    TargetInversion,
    Mask,
    Denoise(usize),
    Decode,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Config => f.write_str("config"),
            Stage::Backend => f.write_str("backend"),
            Stage::LoadImages => f.write_str("load images"),
            Stage::SourceInversion => f.write_str("source inversion"),
            Stage::TargetInversion => f.write_str("target inversion"),
            Stage::Mask => f.write_str("mask"),
            Stage::Denoise(i) => write!(f, "denoise step {i}"),
            Stage::Decode => f.write_str("decode"),
            Stage::Write => f.write_str("write outputs"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {error}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub error: Error,
}

impl StageError {
    pub fn is_config_error(&self) -> bool {
        self.stage == Stage::Config || self.error.is_config_error()
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

/// A trajectory together with where it came from.
#[derive(Debug, Clone)]
pub struct Inverted {
    pub trajectory: LatentTrajectory,
    pub key: String,
    pub cache_hit: bool,
}

fn cached_inversion(
    cache: Option<&TrajectoryCache>,
    parts: KeyParts<'_>,
    s: &Schedule,
    compute: impl FnOnce() -> Result<LatentTrajectory>,
) -> Result<Inverted> {
    let key = cache_key(&parts);
    if let Some(t) = cache.and_then(|c| c.get(&key)) {
        match t.validate(s) {
            Ok(()) => {
                return Ok(Inverted {
                    trajectory: t,
                    key,
                    cache_hit: true,
                })
            }
            Err(e) => log::warn!("cache entry {key} does not fit this schedule: {e}"),
        }
    }
    let trajectory = compute()?;
    if let Some(c) = cache {
        let config = serde_json::from_str(parts.method).unwrap_or(serde_json::Value::Null);
        c.put(&key, &trajectory, config);
    }
    Ok(Inverted {
        trajectory,
        key,
        cache_hit: false,
    })
}

/// Null-text inversion of the source image, through the cache when given.
#[allow(clippy::too_many_arguments)]
pub fn invert_source(
    image: &RgbImage,
    prompt: &str,
    s: &Schedule,
    b: &dyn Backend,
    guidance_scale: f32,
    null_text: &NullTextConfig,
    inversion: &DdimInversionConfig,
    cache: Option<&TrajectoryCache>,
) -> Result<Inverted> {
    let method = serde_json::json!({
        "method": "null_text",
        "guidance_scale": guidance_scale,
        "null_text": null_text,
        "inversion": inversion,
    })
    .to_string();
    let parts = KeyParts {
        image,
        prompt,
        schedule_fingerprint: &s.fingerprint(),
        backend_fingerprint: &b.fingerprint(),
        method: &method,
    };
    cached_inversion(cache, parts, s, || {
        null_text_invert(image, prompt, s, b, guidance_scale, null_text, inversion)
    })
}

/// DDIM inversion of the target image, through the cache when given.
pub fn invert_target(
    image: &RgbImage,
    prompt: &str,
    s: &Schedule,
    b: &dyn Backend,
    inversion: &DdimInversionConfig,
    cache: Option<&TrajectoryCache>,
) -> Result<Inverted> {
    let method = serde_json::json!({ "method": "ddim", "inversion": inversion }).to_string();
    let parts = KeyParts {
        image,
        prompt,
        schedule_fingerprint: &s.fingerprint(),
        backend_fingerprint: &b.fingerprint(),
        method: &method,
    };
    cached_inversion(cache, parts, s, || {
        let clean = b.encode_image(image)?;
        invert_latent(&clean, prompt, s, b, inversion)
    })
}

/// Loads an image and fits it to the backend's input size.
pub fn load_image_for(path: &Path, b: &dyn Backend) -> Result<RgbImage> {
    let img = RgbImage::load(path)?;
    let (h, w) = b.image_size();
    if (img.height(), img.width()) == (h, w) {
        Ok(img)
    } else {
        log::info!(
            "resizing {} from {}x{} to {w}x{h}",
            path.display(),
            img.width(),
            img.height()
        );
        Ok(img.resized(h, w))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub timestep: i32,
    pub prev_timestep: i32,
    pub delta: f32,
    pub lambda: f32,
    pub gamma: f32,
    /// Fraction of the grid that received transferred appearance.
    pub mask_coverage: f32,
    pub mean_match_score: f32,
    pub identity_match: bool,
    /// `max |x'_0 − x0^src|`.
    pub transfer_max_abs: f32,
    /// `max |x'_t − x_t|`.
    pub deviation_max_abs: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    /// `attention` or `file`.
    pub origin: String,
    pub computed_at_step: Option<usize>,
    pub coverage: f32,
    pub token_indices: Vec<usize>,
    pub threshold: f32,
}

/// Deterministic description of a run; wall-clock data lives in [`Timings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub config: RunConfig,
    pub schedule_fingerprint: String,
    pub backend_fingerprint: String,
    pub source_key: String,
    pub target_key: String,
    pub source_residuals: Vec<Option<f32>>,
    pub mask: MaskSummary,
    /// One record per deviated step.
    pub steps: Vec<StepRecord>,
    /// SHA-256 of the output's 8-bit RGB pixels.
    pub output_sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub source_inversion_s: f64,
    pub target_inversion_s: f64,
    pub denoise_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
    pub source_cache_hit: bool,
    pub target_cache_hit: bool,
}

/// Intermediate arrays of one deviated step.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub index: usize,
    pub step: DeviationStep,
    pub x0_src: Latent,
    pub x0_tar: Latent,
    pub x0_tar_aligned: Latent,
    pub x0_prime: Latent,
    pub transfer_delta: Latent,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub output: RgbImage,
    pub final_latent: Latent,
    pub mask: ObjectMask,
    /// Predicted x0 of the guided path at every step, in sampling order.
    pub x0_trace: Vec<Latent>,
    pub source: LatentTrajectory,
    pub target: LatentTrajectory,
    pub manifest: RunManifest,
    pub timings: Timings,
    pub diagnostics: Vec<StepDiagnostics>,
}

fn seconds(since: Instant) -> f64 {
    since.elapsed().as_secs_f64()
}

fn resolve_mask(
    cfg: &RunConfig,
    x: &Latent,
    t: Timestep,
    cond: &crate::backend::TextEmbedding,
    tokens: &[usize],
    b: &dyn Backend,
) -> Result<(ObjectMask, MaskSummary)> {
    let (h, w) = x.grid();
    if let Some(path) = &cfg.mask {
        let m = ObjectMask::from_binary(load_mask_png(path)?).resized(h, w);
        let summary = MaskSummary {
            origin: "file".into(),
            computed_at_step: None,
            coverage: m.coverage(),
            token_indices: Vec::new(),
            threshold: m.threshold,
        };
        return Ok((m, summary));
    }
    let capture = b.capture_cross_attention(x, t, cond, tokens)?;
    let m = extract_object_mask(
        &[capture],
        tokens,
        cfg.transfer.mask_threshold,
        (h, w),
        cfg.backend.attention_resolution,
    )?;
    let summary = MaskSummary {
        origin: "attention".into(),
        computed_at_step: Some(cfg.transfer.start_step),
        coverage: m.coverage(),
        token_indices: tokens.to_vec(),
        threshold: m.threshold,
    };
    Ok((m, summary))
}

/// Runs the transfer against an open backend without touching the output directory.
pub fn run_transfer_with(
    cfg: &RunConfig,
    b: &dyn Backend,
    cache: Option<&TrajectoryCache>,
) -> std::result::Result<RunResult, StageError> {
    let started = Instant::now();
    cfg.validate().at(Stage::Config)?;
    let s = Schedule::new(&cfg.schedule).at(Stage::Config)?;
    let tokens = b
        .token_indices(&cfg.source_prompt, &cfg.object_word)
        .at(Stage::Config)?;
    let p = &cfg.transfer;
    let w = cfg.backend.guidance_scale;

    let src_img = load_image_for(&cfg.source, b).at(Stage::LoadImages)?;
    let tar_img = load_image_for(&cfg.target, b).at(Stage::LoadImages)?;

    let mut timings = Timings::default();
    let t0 = Instant::now();
    let source = invert_source(
        &src_img,
        &cfg.source_prompt,
        &s,
        b,
        w,
        &cfg.null_text,
        &cfg.inversion,
        cache,
    )
    .at(Stage::SourceInversion)?;
    timings.source_inversion_s = seconds(t0);
    timings.source_cache_hit = source.cache_hit;

    let t0 = Instant::now();
    let target = invert_target(&tar_img, &cfg.target_prompt, &s, b, &cfg.inversion, cache)
        .at(Stage::TargetInversion)?;
    timings.target_inversion_s = seconds(t0);
    timings.target_cache_hit = target.cache_hit;

    let t0 = Instant::now();
    let cond = b.embed_text(&cfg.source_prompt).at(Stage::Denoise(0))?;
    let mut matcher = Matcher::new(p.matching_mode, cfg.backend.dift_layer.clone(), Timestep(cfg.backend.dift_timestep));
    matcher
        .prepare(&source.trajectory.clean, &target.trajectory.clean, b)
        .at(Stage::Denoise(p.start_step))?;

    let src = &source.trajectory;
    let tar = &target.trajectory;
    let mut x = src.top().clone();
    let mut mask: Option<(ObjectMask, MaskSummary)> = None;
    let mut x0_trace = Vec::with_capacity(s.num_sample_steps());
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();

    for i in 0..s.num_sample_steps() {
        let stage = Stage::Denoise(i);
        let t = s.timestep(i);
        let t_prev = s.prev_timestep(i);
        let uncond = src.entries[i]
            .uncond
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("source trajectory lacks an unconditional embedding at step {i}")))
            .at(stage)?;
        let noise = |v: &Latent| b.predict_noise(v, t, &cond, uncond, w);
        let eps = noise(&x).at(stage)?;
        let x0_src = predict_x0(&x, &eps, t, &s).at(stage)?;

        if !p.in_window(i) {
            x0_trace.push(x0_src);
            x = ddim_step(&x, &eps, t, t_prev, &s).at(stage)?;
            continue;
        }

        if mask.is_none() {
            mask = Some(resolve_mask(cfg, &x, t, &cond, &tokens, b).at(Stage::Mask)?);
        }
        let (object_mask, _) = mask.as_ref().expect("mask resolved");

        let x0_tar = &tar.entries[i].predicted_x0;
        let corr = matcher.match_step(&x0_src, x0_tar, b).at(stage)?;
        let aligned = apply_correlation(&corr, x0_tar).at(stage)?;
        let step_mask = match p.match_score_threshold {
            Some(thr) => {
                let mut m = object_mask.clone();
                m.data.zip_mut_with(&corr.score, |v, &sc| {
                    if sc < thr {
                        *v = 0.0;
                    }
                });
                m
            }
            None => object_mask.clone(),
        };
        let x0_prime = transfer_x0(&x0_src, &aligned, &step_mask, p.delta).at(stage)?;
        let tdelta = transfer_delta(&x0_prime, &x0_src).at(stage)?;
        let window = StepWindow {
            index: i,
            start_step: p.start_step,
            end_step: p.end_step,
        };
        let step = deviation_step(&x, &eps, &tdelta, t, t_prev, window, p.lambda_, p.gamma, &s, &noise).at(stage)?;

        records.push(StepRecord {
            index: i,
            timestep: t.0,
            prev_timestep: t_prev.0,
            delta: p.delta,
            lambda: p.lambda_,
            gamma: p.gamma,
            mask_coverage: step_mask.coverage(),
            mean_match_score: corr.mean_score(),
            identity_match: corr.is_identity(),
            transfer_max_abs: tdelta.max_abs(),
            deviation_max_abs: step.x_t_prime.max_abs_diff(&step.x_t),
        });
        x0_trace.push(x0_src.clone());
        x = step.x_prev_star.clone();
        if cfg.dump_diagnostics {
            diagnostics.push(StepDiagnostics {
                index: i,
                step,
                x0_src,
                x0_tar: x0_tar.clone(),
                x0_tar_aligned: aligned,
                x0_prime,
                transfer_delta: tdelta,
            });
        }
    }
    timings.denoise_s = seconds(t0);

    let t0 = Instant::now();
    let output = b.decode_latent(&x).at(Stage::Decode)?;
    timings.decode_s = seconds(t0);
    timings.total_s = seconds(started);

    let (mask, mask_summary) = mask.expect("window is non-empty");
    let manifest = RunManifest {
        format: MANIFEST_FORMAT,
        config: cfg.clone(),
        schedule_fingerprint: s.fingerprint(),
        backend_fingerprint: b.fingerprint(),
        source_key: source.key,
        target_key: target.key,
        source_residuals: src.residuals(),
        mask: mask_summary,
        steps: records,
        output_sha256: content_hash(output.to_rgb8().as_raw()),
    };
    Ok(RunResult {
        output,
        final_latent: x,
        mask,
        x0_trace,
        source: source.trajectory,
        target: target.trajectory,
        manifest,
        timings,
        diagnostics,
    })
}

/// Predicted x0 along the plain replay of a source trajectory, in sampling order.
pub fn reconstruction_x0_trace(traj: &LatentTrajectory, s: &Schedule, b: &dyn Backend) -> Result<Vec<Latent>> {
    let cond = b.embed_text(&traj.prompt)?;
    let path = replay_path(traj, s, b)?;
    traj.entries
        .iter()
        .zip(&path)
        .map(|(e, x)| {
            let eps = match &e.uncond {
                Some(u) => b.predict_noise(x, e.timestep, &cond, u, traj.guidance_scale)?,
                None => b.predict_noise_raw(x, e.timestep, &cond)?,
            };
            predict_x0(x, &eps, e.timestep, s)
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Paths written by [`run_transfer`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub output: PathBuf,
    pub manifest: PathBuf,
    pub timings: PathBuf,
    pub mask: Option<PathBuf>,
    pub diagnostics: Option<PathBuf>,
}

/// Writes the output image, manifest, timings and optional extras.
pub fn write_run(cfg: &RunConfig, result: &RunResult) -> Result<RunFiles> {
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = RunFiles {
        output: dir.join("output.png"),
        manifest: dir.join("manifest.json"),
        timings: dir.join("timings.json"),
        mask: cfg.export_mask.then(|| dir.join("mask.png")),
        diagnostics: cfg.dump_diagnostics.then(|| dir.join("diagnostics")),
    };
    result.output.save_png(&files.output)?;
    write_json(&files.manifest, &result.manifest)?;
    write_json(&files.timings, &result.timings)?;
    if let Some(p) = &files.mask {
        save_mask_png(&result.mask.data, p)?;
    }
    if let Some(d) = &files.diagnostics {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        ArrayArchive::new("mask", None, result.mask.data.clone().into_dyn()).save(&d.join("mask.x0ta"))?;
        for diag in &result.diagnostics {
            let i = diag.index;
            let extra = [
                ("x0_src", &diag.x0_src),
                ("x0_tar", &diag.x0_tar),
                ("x0_tar_aligned", &diag.x0_tar_aligned),
                ("x0_prime", &diag.x0_prime),
                ("transfer_delta", &diag.transfer_delta),
            ];
            for (name, v) in diag.step.fields().into_iter().chain(extra) {
                save_latent(&d.join(format!("step_{i:03}_{name}.x0ta")), name, v)?;
            }
        }
    }
    Ok(files)
}

/// Opens the configured backend and cache, runs the transfer and writes its outputs.
pub fn run_transfer(cfg: &RunConfig) -> std::result::Result<(RunResult, RunFiles), StageError> {
    cfg.validate().at(Stage::Config)?;
    let b = backend::open(&cfg.effective_backend()).at(Stage::Backend)?;
    let cache = match (&cfg.cache_dir, cfg.use_cache) {
        (Some(dir), true) => Some(TrajectoryCache::new(dir)),
        _ => None,
    };
    let result = run_transfer_with(cfg, b.as_ref(), cache.as_ref())?;
    let files = write_run(cfg, &result).at(Stage::Write)?;
    Ok((result, files))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockConfig};

    fn write_image(dir: &Path, name: &str, seed: u32) -> PathBuf {
        let img = image::RgbImage::from_fn(16, 16, |x, y| {
            let v = |k: u32| ((x * 37 + y * 11 + seed * 53 + k * 29) % 251) as u8;
            image::Rgb([v(0), v(1), v(2)])
        });
        let p = dir.join(name);
        img.save(&p).unwrap();
        p
    }

    fn config(dir: &Path) -> RunConfig {
        RunConfig {
            source: write_image(dir, "src.png", 1),
            target: write_image(dir, "tar.png", 2),
            source_prompt: "a photo of a cat".into(),
            target_prompt: "a photo of a dog".into(),
            object_word: "cat".into(),
            schedule: ScheduleConfig {
                num_sample_steps: 12,
                ..ScheduleConfig::default()
            },
            transfer: TransferParams {
                start_step: 3,
                end_step: 7,
                ..TransferParams::default()
            },
            out_dir: dir.join("out"),
            ..RunConfig::default()
        }
    }

    #[test]
    fn validation_classifies_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        assert!(cfg.validate().is_ok());
        let missing = RunConfig {
            source: dir.path().join("nope.png"),
            ..cfg.clone()
        };
        assert!(matches!(missing.validate(), Err(Error::MissingFile(_))));
        let empty = RunConfig {
            target_prompt: " ".into(),
            ..cfg.clone()
        };
        assert!(matches!(empty.validate(), Err(Error::Config(_))));
        let b = MockBackend::new(MockConfig::default()).unwrap();
        let absent = RunConfig {
            object_word: "zebra".into(),
            ..cfg
        };
        let err = run_transfer_with(&absent, &b, None).unwrap_err();
        assert_eq!(err.stage, Stage::Config);
        assert!(err.is_config_error());
    }

    #[test]
    fn run_records_window_and_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        cfg.export_mask = true;
        cfg.dump_diagnostics = true;
        cfg.cache_dir = Some(dir.path().join("cache"));
        let (result, files) = run_transfer(&cfg).unwrap();
        let idx: Vec<usize> = result.manifest.steps.iter().map(|r| r.index).collect();
        assert_eq!(idx, (3..7).collect::<Vec<_>>());
        assert_eq!(result.x0_trace.len(), 12);
        assert_eq!(result.manifest.source_residuals.len(), 12);
        assert!(files.output.exists() && files.manifest.exists() && files.timings.exists());
        assert!(files.mask.unwrap().exists());
        let d = files.diagnostics.unwrap();
        assert!(d.join("step_003_eps_star.x0ta").exists());
        assert!(d.join("step_006_transfer_delta.x0ta").exists());
        assert!(!result.timings.source_cache_hit);
        let (again, _) = run_transfer(&cfg).unwrap();
        assert!(again.timings.source_cache_hit && again.timings.target_cache_hit);
        assert_eq!(again.manifest, result.manifest);
    }

    #[test]
    fn transfer_changes_the_masked_region_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        let b = MockBackend::new(cfg.effective_backend().mock).unwrap();
        let r = run_transfer_with(&cfg, &b, None).unwrap();
        assert!(r.mask.coverage() > 0.0 && r.mask.coverage() < 1.0);
        assert!(r.manifest.steps.iter().any(|s| s.transfer_max_abs > 0.0));
        let s = Schedule::new(&cfg.schedule).unwrap();
        let rec = crate::inversion::replay_reconstruction(&r.source, &s, &b).unwrap();
        for ((c, i, j), v) in r.final_latent.data.indexed_iter() {
            if r.mask.data[[i, j]] == 0.0 {
                assert_eq!(v.to_bits(), rec.data[[c, i, j]].to_bits());
            }
        }
        assert!(r.final_latent.max_abs_diff(&rec) > 1e-3);
    }

    #[test]
    fn unavailable_backend_is_a_staged_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        cfg.backend.kind = crate::backend::BackendKind::Diffusion;
        let err = run_transfer(&cfg).unwrap_err();
        assert_eq!(err.stage, Stage::Backend);
        assert!(!err.is_config_error());
    }
}
