//! Layered run configuration: built-in defaults, then `X0T_CACHE_DIR`, then
//! the JSON config file, then command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::Value;
use x0t_core::backend::BackendKind;
use x0t_core::matching::MatchingMode;
use x0t_core::pipeline::RunConfig;
use x0t_core::{Error, Result};

pub const CACHE_ENV: &str = "X0T_CACHE_DIR";
const FALLBACK_CACHE_DIR: &str = ".x0t-cache";

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub source_prompt: Option<String>,
    #[arg(long)]
    pub target_prompt: Option<String>,
    /// Word of the source prompt naming the edited object.
    #[arg(long)]
    pub object_word: Option<String>,
    #[arg(long)]
    pub delta: Option<f32>,
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub gamma: Option<f32>,
    #[arg(long)]
    pub start_step: Option<usize>,
    #[arg(long)]
    pub end_step: Option<usize>,
    #[arg(long, value_parser = ["progressive", "initial"])]
    pub matching: Option<String>,
    #[arg(long, value_parser = ["mock", "diffusion"])]
    pub backend: Option<String>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Recompute inversions and do not write to the cache.
    #[arg(long)]
    pub no_cache: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write per-step intermediate arrays next to the output.
    #[arg(long)]
    pub dump_diagnostics: bool,
    /// Also write the object mask as `mask.png`.
    #[arg(long)]
    pub export_mask: bool,
    /// Binary mask PNG replacing the attention-derived mask.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

/// Recursively overlays `over` onto `base`.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_file(path: &Path) -> Result<Value> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let v: Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
    }
    Ok(v)
}

impl RunArgs {
    /// Resolves the effective configuration; `env_cache` is the value of `X0T_CACHE_DIR`.
    pub fn resolve(&self, env_cache: Option<PathBuf>) -> Result<RunConfig> {
        let mut base = RunConfig {
            cache_dir: env_cache,
            ..RunConfig::default()
        };
        if let Some(path) = &self.config {
            let mut value = serde_json::to_value(&base)?;
            merge(&mut value, read_file(path)?);
            base = serde_json::from_value(value)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        let mut c = base;
        let set = |slot: &mut PathBuf, v: &Option<PathBuf>| {
            if let Some(v) = v {
                *slot = v.clone();
            }
        };
        set(&mut c.source, &self.source);
        set(&mut c.target, &self.target);
        set(&mut c.out_dir, &self.out_dir);
        for (slot, v) in [
            (&mut c.source_prompt, &self.source_prompt),
            (&mut c.target_prompt, &self.target_prompt),
            (&mut c.object_word, &self.object_word),
        ] {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        let t = &mut c.transfer;
        t.delta = self.delta.unwrap_or(t.delta);
        t.lambda_ = self.lambda.unwrap_or(t.lambda_);
        t.gamma = self.gamma.unwrap_or(t.gamma);
        t.start_step = self.start_step.unwrap_or(t.start_step);
        t.end_step = self.end_step.unwrap_or(t.end_step);
        if let Some(m) = &self.matching {
            t.matching_mode = m.parse::<MatchingMode>()?;
        }
        if let Some(b) = &self.backend {
            c.backend.kind = b.parse::<BackendKind>()?;
        }
        if self.cache_dir.is_some() {
            c.cache_dir = self.cache_dir.clone();
        }
        if c.cache_dir.is_none() {
            c.cache_dir = Some(PathBuf::from(FALLBACK_CACHE_DIR));
        }
        if self.no_cache {
            c.use_cache = false;
        }
        c.seed = self.seed.unwrap_or(c.seed);
        c.dump_diagnostics |= self.dump_diagnostics;
        c.export_mask |= self.export_mask;
        if self.mask.is_some() {
            c.mask = self.mask.clone();
        }
        Ok(c)
    }
}
