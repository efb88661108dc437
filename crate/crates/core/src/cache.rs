//! Content-addressed on-disk cache of inverted trajectories.
//!
//! Each entry is a directory named by its key holding `meta.json` and one
//! archive per stored array. Entries are staged in a scratch directory and
//! renamed into place, so readers never observe a partial entry and the
//! first writer of a key wins.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Ix2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{load_latent, save_latent, ArrayArchive};
use crate::backend::{EmbeddingKind, TextEmbedding};
use crate::image::RgbImage;
use crate::inversion::{LatentTrajectory, TrajectoryEntry, TrajectoryKind};
use crate::schedule::Timestep;
use crate::{Error, Result};

const FORMAT: u32 = 1;

/// Everything that determines an inverted trajectory.
pub struct KeyParts<'a> {
    pub image: &'a RgbImage,
    pub prompt: &'a str,
    pub schedule_fingerprint: &'a str,
    pub backend_fingerprint: &'a str,
    /// Serialized inversion method and its settings.
    pub method: &'a str,
}

pub fn cache_key(p: &KeyParts<'_>) -> String {
    let mut h = Sha256::new();
    let mut field = |label: &str, bytes: &[u8]| {
        h.update(label.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    let (ih, iw, _) = p.image.data.dim();
    let mut pixels = Vec::with_capacity(16 + 4 * p.image.data.len());
    pixels.extend_from_slice(&(ih as u64).to_le_bytes());
    pixels.extend_from_slice(&(iw as u64).to_le_bytes());
    for v in p.image.data.iter() {
        pixels.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    field("image", &pixels);
    field("prompt", p.prompt.as_bytes());
    field("schedule", p.schedule_fingerprint.as_bytes());
    field("backend", p.backend_fingerprint.as_bytes());
    field("method", p.method.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StepMeta {
    timestep: i32,
    residual: Option<f32>,
    uncond_kind: Option<EmbeddingKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub format: u32,
    pub key: String,
    pub kind: TrajectoryKind,
    pub prompt: String,
    pub guidance_scale: f32,
    /// Free-form description of how the entry was produced.
    pub config: serde_json::Value,
    steps: Vec<StepMeta>,
}

impl EntryMeta {
    pub fn residuals(&self) -> Vec<Option<f32>> {
        self.steps.iter().map(|s| s.residual).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryCache {
    root: PathBuf,
}

static SCRATCH: AtomicU64 = AtomicU64::new(0);

impl TrajectoryCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_dir(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    /// Returns the stored trajectory, or `None` on a miss. Unreadable or
    /// corrupt entries count as misses.
    pub fn get(&self, key: &str) -> Option<LatentTrajectory> {
        let dir = self.entry_dir(key);
        if !dir.join("meta.json").exists() {
            return None;
        }
        match read_entry(&dir, key) {
            Ok(t) => Some(t),
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {}: {e}", dir.display());
                None
            }
        }
    }

    /// Stores a trajectory. Failures are logged and reported as `false`.
    pub fn put(&self, key: &str, traj: &LatentTrajectory, config: serde_json::Value) -> bool {
        match self.try_put(key, traj, config) {
            Ok(()) => true,
            Err(e) => {
                log::warn!("could not write cache entry {key}: {e}");
                false
            }
        }
    }

    fn try_put(&self, key: &str, traj: &LatentTrajectory, config: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let scratch = self.root.join(format!(
            ".tmp-{key}-{}-{}",
            std::process::id(),
            SCRATCH.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir(&scratch).map_err(|e| Error::io(&scratch, e))?;
        let result = write_entry(&scratch, key, traj, config).and_then(|()| {
            let dest = self.entry_dir(key);
            if dest.exists() {
                // Another writer finished first; it wrote the same content.
                return Ok(());
            }
            std::fs::rename(&scratch, &dest).map_err(|e| Error::io(&dest, e))
        });
        if scratch.exists() {
            let _ = std::fs::remove_dir_all(&scratch);
        }
        result
    }

    /// Metadata of every readable entry.
    pub fn list(&self) -> Result<Vec<EntryMeta>> {
        let mut out = Vec::new();
        let Ok(rd) = std::fs::read_dir(&self.root) else {
            return Ok(out);
        };
        for e in rd {
            let e = e.map_err(|err| Error::io(&self.root, err))?;
            let name = e.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') {
                continue;
            }
            if let Ok(meta) = read_meta(&e.path()) {
                out.push(meta);
            }
        }
        out.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(out)
    }

    /// Removes every entry; returns how many were removed.
    pub fn clear(&self) -> Result<usize> {
        let Ok(rd) = std::fs::read_dir(&self.root) else {
            return Ok(0);
        };
        let mut n = 0;
        for e in rd {
            let path = e.map_err(|err| Error::io(&self.root, err))?.path();
            if path.is_dir() {
                std::fs::remove_dir_all(&path).map_err(|err| Error::io(&path, err))?;
                n += 1;
            }
        }
        Ok(n)
    }
}

fn step_file(dir: &Path, i: usize, what: &str) -> PathBuf {
    dir.join(format!("step_{i:03}_{what}.x0ta"))
}

fn write_entry(dir: &Path, key: &str, traj: &LatentTrajectory, config: serde_json::Value) -> Result<()> {
    save_latent(&dir.join("clean.x0ta"), "clean", &traj.clean)?;
    for (i, e) in traj.entries.iter().enumerate() {
        save_latent(&step_file(dir, i, "latent"), "latent", &e.latent)?;
        save_latent(&step_file(dir, i, "eps"), "eps", &e.eps)?;
        save_latent(&step_file(dir, i, "x0"), "predicted_x0", &e.predicted_x0)?;
        if let Some(u) = &e.uncond {
            ArrayArchive::new("uncond", Some(e.timestep), u.data.clone().into_dyn())
                .save(&step_file(dir, i, "uncond"))?;
        }
    }
    let meta = EntryMeta {
        format: FORMAT,
        key: key.to_string(),
        kind: traj.kind,
        prompt: traj.prompt.clone(),
        guidance_scale: traj.guidance_scale,
        config,
        steps: traj
            .entries
            .iter()
            .map(|e| StepMeta {
                timestep: e.timestep.0,
                residual: e.residual,
                uncond_kind: e.uncond.as_ref().map(|u| u.kind),
            })
            .collect(),
    };
    let path = dir.join("meta.json");
    let json = serde_json::to_vec_pretty(&meta)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn read_meta(dir: &Path) -> Result<EntryMeta> {
    let path = dir.join("meta.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: EntryMeta = serde_json::from_slice(&bytes)?;
    if meta.format != FORMAT {
        return Err(Error::Archive(format!("unsupported cache format {}", meta.format)));
    }
    Ok(meta)
}

fn read_entry(dir: &Path, key: &str) -> Result<LatentTrajectory> {
    let meta = read_meta(dir)?;
    if meta.key != key {
        return Err(Error::Archive(format!("entry is keyed {}", meta.key)));
    }
    let clean = load_latent(&dir.join("clean.x0ta"))?;
    let entries = meta
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let uncond = match s.uncond_kind {
                Some(kind) => {
                    let data = ArrayArchive::load(&step_file(dir, i, "uncond"))?
                        .data
                        .into_dimensionality::<Ix2>()
                        .map_err(|e| Error::Archive(e.to_string()))?;
                    Some(TextEmbedding { data, kind })
                }
                None => None,
            };
            Ok(TrajectoryEntry {
                timestep: Timestep(s.timestep),
                latent: load_latent(&step_file(dir, i, "latent"))?,
                eps: load_latent(&step_file(dir, i, "eps"))?,
                predicted_x0: load_latent(&step_file(dir, i, "x0"))?,
                uncond,
                residual: s.residual,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentTrajectory {
        kind: meta.kind,
        prompt: meta.prompt,
        guidance_scale: meta.guidance_scale,
        clean,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, MockBackend, MockConfig};
    use crate::inversion::{null_text_invert, DdimInversionConfig, NullTextConfig};
    use crate::schedule::{Schedule, ScheduleConfig};

    fn setup() -> (MockBackend, Schedule, RgbImage) {
        let b = MockBackend::new(MockConfig::default()).unwrap();
        let s = Schedule::new(&ScheduleConfig {
            num_sample_steps: 5,
            ..ScheduleConfig::default()
        })
        .unwrap();
        let img = RgbImage::new(ndarray::Array3::from_shape_fn((16, 16, 3), |(i, j, c)| {
            ((i * 7 + j * 3 + c) % 11) as f32 / 10.0
        }))
        .unwrap();
        (b, s, img)
    }

    fn key(img: &RgbImage, prompt: &str, s: &Schedule, b: &MockBackend) -> String {
        cache_key(&KeyParts {
            image: img,
            prompt,
            schedule_fingerprint: &s.fingerprint(),
            backend_fingerprint: &b.fingerprint(),
            method: "null-text",
        })
    }

    #[test]
    fn put_then_get_round_trips() {
        let (b, s, img) = setup();
        let traj = null_text_invert(&img, "a cat", &s, &b, 7.5, &NullTextConfig::default(), &DdimInversionConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = TrajectoryCache::new(dir.path());
        let k = key(&img, "a cat", &s, &b);
        assert!(cache.get(&k).is_none());
        assert!(cache.put(&k, &traj, serde_json::json!({"steps": 5})));
        let back = cache.get(&k).unwrap();
        assert_eq!(back, traj);
        for (a, b) in back.entries.iter().zip(&traj.entries) {
            assert!(a.latent.bit_eq(&b.latent) && a.eps.bit_eq(&b.eps));
        }
        let listed = cache.list().unwrap();
        assert_eq!(listed.len(), 1);
        assert_eq!(listed[0].residuals(), traj.residuals());
        // A second put of the same key keeps the first entry.
        assert!(cache.put(&k, &traj, serde_json::Value::Null));
        assert_eq!(cache.clear().unwrap(), 1);
        assert!(cache.get(&k).is_none());
    }

    #[test]
    fn key_tracks_inputs() {
        let (b, s, img) = setup();
        let k = key(&img, "a cat", &s, &b);
        assert_eq!(k, key(&img, "a cat", &s, &b));
        assert_ne!(k, key(&img, "a dog", &s, &b));
        let s10 = Schedule::new(&ScheduleConfig {
            num_sample_steps: 10,
            ..ScheduleConfig::default()
        })
        .unwrap();
        assert_ne!(k, key(&img, "a cat", &s10, &b));
        let mut img2 = img.clone();
        img2.data[[0, 0, 0]] += 0.01;
        assert_ne!(k, key(&img2, "a cat", &s, &b));
        let b2 = MockBackend::new(MockConfig { seed: 7, ..MockConfig::default() }).unwrap();
        assert_ne!(k, key(&img, "a cat", &s, &b2));
    }

    #[test]
    fn corrupt_entry_is_a_miss() {
        let (b, s, img) = setup();
        let traj = crate::inversion::ddim_invert(&img, "a cat", &s, &b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = TrajectoryCache::new(dir.path());
        let k = key(&img, "a cat", &s, &b);
        assert!(cache.put(&k, &traj, serde_json::Value::Null));
        let f = dir.path().join(&k).join("step_002_eps.x0ta");
        let bytes = std::fs::read(&f).unwrap();
        std::fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
        assert!(cache.get(&k).is_none());
    }

    #[test]
    fn concurrent_writers_leave_one_entry() {
        let (b, s, img) = setup();
        let traj = crate::inversion::ddim_invert(&img, "a cat", &s, &b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = TrajectoryCache::new(dir.path());
        let k = key(&img, "a cat", &s, &b);
        std::thread::scope(|sc| {
            for _ in 0..4 {
                sc.spawn(|| cache.put(&k, &traj, serde_json::Value::Null));
                sc.spawn(|| cache.get(&k).map(|t| assert_eq!(t, traj)));
            }
        });
        assert_eq!(cache.get(&k).unwrap(), traj);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
