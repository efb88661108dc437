//! Latent trajectories: DDIM inversion for the target image and null-text
//! inversion (per-step tuning of the unconditional embedding) for the source.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, TextEmbedding};
use crate::image::RgbImage;
use crate::latent::Latent;
use crate::schedule::{ddim_inverse_step, ddim_step, predict_x0, Schedule, Timestep};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Null-text inverted; carries an unconditional embedding per step.
    Source,
    /// Plain DDIM inverted.
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEntry {
    pub timestep: Timestep,
    pub latent: Latent,
    /// The noise estimate that produced `latent` during inversion.
    pub eps: Latent,
    pub predicted_x0: Latent,
    /// Unconditional embedding used when denoising out of this step.
    pub uncond: Option<TextEmbedding>,
    /// `‖replayed x_{t_prev} − pivot x_{t_prev}‖∞` after this step.
    pub residual: Option<f32>,
}

/// Per-step record of an inverted image, in sampling order (noisiest first).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub kind: TrajectoryKind,
    pub prompt: String,
    pub guidance_scale: f32,
    pub clean: Latent,
    pub entries: Vec<TrajectoryEntry>,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self) -> &Latent {
        &self.entries[0].latent
    }

    /// Pivot latent reached after denoising step `index`.
    pub fn pivot_after(&self, index: usize) -> &Latent {
        self.entries
            .get(index + 1)
            .map(|e| &e.latent)
            .unwrap_or(&self.clean)
    }

    pub fn residuals(&self) -> Vec<Option<f32>> {
        self.entries.iter().map(|e| e.residual).collect()
    }

    /// Checks ordering, length and kind-specific embedding invariants.
    pub fn validate(&self, s: &Schedule) -> Result<()> {
        if self.entries.len() != s.num_sample_steps() {
            return Err(Error::Contract(format!(
                "trajectory has {} entries, schedule has {} steps",
                self.entries.len(),
                s.num_sample_steps()
            )));
        }
        for (entry, &t) in self.entries.iter().zip(s.timesteps()) {
            if entry.timestep != t {
                return Err(Error::Contract(format!(
                    "trajectory timestep {} does not match schedule timestep {t}",
                    entry.timestep
                )));
            }
            match (self.kind, &entry.uncond) {
                (TrajectoryKind::Source, None) => {
                    return Err(Error::Contract(format!(
                        "source trajectory lacks an unconditional embedding at timestep {t}"
                    )))
                }
                (TrajectoryKind::Target, Some(_)) => {
                    return Err(Error::Contract(format!(
                        "target trajectory carries an unconditional embedding at timestep {t}"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Fixed-point refinement of each inversion step.
///
/// Plain DDIM inversion evaluates `ε` at the less noisy point; each extra
/// iteration re-evaluates it at the current estimate of the noisier latent
/// so that the forward step reproduces its input. Zero iterations is the
/// textbook scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdimInversionConfig {
    pub fixed_point_iterations: usize,
    pub fixed_point_tolerance: f32,
}

impl Default for DdimInversionConfig {
    fn default() -> Self {
        Self {
            fixed_point_iterations: 30,
            fixed_point_tolerance: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NullTextConfig {
    pub iterations_per_step: usize,
    pub learning_rate: f32,
    pub early_stop_epsilon: f32,
}

impl Default for NullTextConfig {
    fn default() -> Self {
        Self {
            iterations_per_step: 10,
            learning_rate: 1e-2,
            early_stop_epsilon: 1e-5,
        }
    }
}

impl NullTextConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f32| v.is_finite() && v > 0.0;
        if self.iterations_per_step == 0 || !positive(self.learning_rate) || !positive(self.early_stop_epsilon) {
            return Err(Error::Config(
                "null-text iterations, learning rate and epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// DDIM inversion of an image under its prompt at guidance scale 1.
pub fn ddim_invert(image: &RgbImage, prompt: &str, s: &Schedule, b: &dyn Backend) -> Result<LatentTrajectory> {
    ddim_invert_with(image, prompt, s, b, &DdimInversionConfig::default())
}

pub fn ddim_invert_with(
    image: &RgbImage,
    prompt: &str,
    s: &Schedule,
    b: &dyn Backend,
    cfg: &DdimInversionConfig,
) -> Result<LatentTrajectory> {
    let clean = b.encode_image(image)?;
    invert_latent(&clean, prompt, s, b, cfg)
}

/// DDIM inversion starting from an already encoded clean latent.
pub fn invert_latent(
    clean: &Latent,
    prompt: &str,
    s: &Schedule,
    b: &dyn Backend,
    cfg: &DdimInversionConfig,
) -> Result<LatentTrajectory> {
    let cond = b.embed_text(prompt)?;
    let n = s.num_sample_steps();
    let mut entries = Vec::with_capacity(n);
    let mut x = clean.clone();
    let mut t_cur = Timestep::CLEAN;
    for i in (0..n).rev() {
        let t_next = s.timestep(i);
        let mut eps = b.predict_noise_raw(&x, t_next, &cond)?;
        let mut x_next = ddim_inverse_step(&x, &eps, t_cur, t_next, s)?;
        for _ in 0..cfg.fixed_point_iterations {
            let refined = b.predict_noise_raw(&x_next, t_next, &cond)?;
            let candidate = ddim_inverse_step(&x, &refined, t_cur, t_next, s)?;
            let change = candidate.max_abs_diff(&x_next);
            eps = refined;
            x_next = candidate;
            if change <= cfg.fixed_point_tolerance {
                break;
            }
        }
        if !x_next.is_finite() {
            return Err(Error::Backend(format!("non-finite latent while inverting at {t_next}")));
        }
        let predicted_x0 = predict_x0(&x_next, &eps, t_next, s)?;
        entries.push(TrajectoryEntry {
            timestep: t_next,
            latent: x_next.clone(),
            eps,
            predicted_x0,
            uncond: None,
            residual: None,
        });
        x = x_next;
        t_cur = t_next;
    }
    entries.reverse();
    Ok(LatentTrajectory {
        kind: TrajectoryKind::Target,
        prompt: prompt.to_string(),
        guidance_scale: 1.0,
        clean: clean.clone(),
        entries,
    })
}

struct Adam {
    m: Array2<f32>,
    v: Array2<f32>,
    step: i32,
    lr: f32,
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(shape: (usize, usize), lr: f32) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            step: 0,
            lr,
        }
    }

    fn update(&mut self, param: &mut Array2<f32>, grad: &Array2<f32>) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
            });
    }
}

/// Null-text inversion: tunes the unconditional embedding at every step so
/// that guided denoising retraces the DDIM-inverted pivot path.
pub fn null_text_invert(
    image: &RgbImage,
    prompt: &str,
    s: &Schedule,
    b: &dyn Backend,
    guidance_scale: f32,
    cfg: &NullTextConfig,
    inversion: &DdimInversionConfig,
) -> Result<LatentTrajectory> {
    cfg.validate()?;
    let pivots = ddim_invert_with(image, prompt, s, b, inversion)?;
    let cond = b.embed_text(prompt)?;
    let mut uncond = b.embed_text("")?;
    let w = guidance_scale;

    let mut entries = pivots.entries.clone();
    let mut x = pivots.top().clone();
    for (i, entry) in entries.iter_mut().enumerate() {
        let t = s.timestep(i);
        let t_prev = s.prev_timestep(i);
        let target = pivots.pivot_after(i);

        if w != 1.0 {
            let eps_c = b.predict_noise_raw(&x, t, &cond)?;
            let a_t = s.alpha(t)?;
            let a_p = s.alpha(t_prev)?;
            // ∂x_prev/∂ε for a fixed x_t.
            let d_step = ((1.0 - a_p).sqrt() - (a_p * (1.0 - a_t) / a_t).sqrt()) as f32;
            let mut adam = Adam::new(uncond.data.dim(), cfg.learning_rate);
            for _ in 0..cfg.iterations_per_step {
                let eps_u = b.predict_noise_raw(&x, t, &uncond)?;
                let eps = eps_u.zip_map(&eps_c, |u, c| u + w * (c - u))?;
                let x_prev = ddim_step(&x, &eps, t, t_prev, s)?;
                if x_prev.max_abs_diff(target) < cfg.early_stop_epsilon {
                    break;
                }
                let n = x_prev.len() as f32;
                let cot = x_prev.zip_map(target, |p, q| (1.0 - w) * d_step * 2.0 * (p - q) / n)?;
                let Some(grad) = b.uncond_vjp(&x, t, &uncond, &cot)? else {
                    break;
                };
                if grad.iter().all(|&g| g == 0.0) {
                    break;
                }
                adam.update(&mut uncond.data, &grad);
            }
        }

        let eps = b.predict_noise(&x, t, &cond, &uncond, w)?;
        x = ddim_step(&x, &eps, t, t_prev, s)?;
        let residual = x.max_abs_diff(target);
        if residual >= cfg.early_stop_epsilon {
            log::warn!(
                "null-text inversion did not converge at step {i} (timestep {t}): residual {residual:.3e}"
            );
        }
        entry.uncond = Some(uncond.clone());
        entry.residual = Some(residual);
    }

    Ok(LatentTrajectory {
        kind: TrajectoryKind::Source,
        prompt: prompt.to_string(),
        guidance_scale: w,
        clean: pivots.clean,
        entries,
    })
}

/// Every latent of the denoising replay, starting at the top latent and
/// ending at the clean reconstruction (`len + 1` values).
pub fn replay_path(traj: &LatentTrajectory, s: &Schedule, b: &dyn Backend) -> Result<Vec<Latent>> {
    traj.validate(s)?;
    let cond = b.embed_text(&traj.prompt)?;
    let mut path = Vec::with_capacity(traj.len() + 1);
    let mut x = traj.top().clone();
    path.push(x.clone());
    for (i, entry) in traj.entries.iter().enumerate() {
        let t = entry.timestep;
        let eps = match &entry.uncond {
            Some(u) => b.predict_noise(&x, t, &cond, u, traj.guidance_scale)?,
            None => b.predict_noise_raw(&x, t, &cond)?,
        };
        x = ddim_step(&x, &eps, t, s.prev_timestep(i), s)?;
        path.push(x.clone());
    }
    Ok(path)
}

/// Denoises the trajectory's top latent with its stored conditioning.
pub fn replay_reconstruction(traj: &LatentTrajectory, s: &Schedule, b: &dyn Backend) -> Result<Latent> {
    Ok(replay_path(traj, s, b)?.pop().expect("path is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockConfig};
    use crate::schedule::{ScheduleConfig};
    use ndarray::Array3;

    fn image(seed: u64) -> RgbImage {
        let mut r = crate::rng::stream(seed, "inversion-image");
        let v = crate::rng::normals(&mut r, 16 * 16 * 3, 0.25)
            .into_iter()
            .map(|x| (x + 0.5).clamp(0.0, 1.0))
            .collect();
        RgbImage::new(Array3::from_shape_vec((16, 16, 3), v).unwrap()).unwrap()
    }

    fn schedule() -> Schedule {
        Schedule::new(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn zero_noise_closed_form() {
        let b = MockBackend::new(MockConfig {
            noise_gain: 0.0,
            ..MockConfig::default()
        })
        .unwrap();
        let s = schedule();
        let img = image(1);
        let traj = ddim_invert(&img, "a cat", &s, &b).unwrap();
        assert_eq!(traj.len(), 50);
        for e in &traj.entries {
            let scale = s.alpha(e.timestep).unwrap().sqrt() as f32;
            assert!(e.latent.max_abs_diff(&traj.clean.map(|v| v * scale)) < 1e-6);
            assert!(e.predicted_x0.max_abs_diff(&traj.clean) < 1e-5);
        }
    }

    #[test]
    fn stored_eps_walks_back_to_clean() {
        let b = MockBackend::new(MockConfig::default()).unwrap();
        let s = schedule();
        let traj = ddim_invert(&image(2), "a cat", &s, &b).unwrap();
        traj.validate(&s).unwrap();
        let mut x = traj.top().clone();
        for (i, e) in traj.entries.iter().enumerate() {
            x = ddim_step(&x, &e.eps, e.timestep, s.prev_timestep(i), &s).unwrap();
        }
        assert!(x.max_abs_diff(&traj.clean) < 1e-4);
        for e in &traj.entries {
            let again = predict_x0(&e.latent, &e.eps, e.timestep, &s).unwrap();
            assert!(again.bit_eq(&e.predicted_x0));
        }
    }

    #[test]
    fn mock_null_text_is_a_no_op_with_exact_replay() {
        let b = MockBackend::new(MockConfig::default()).unwrap();
        let s = schedule();
        let cfg = NullTextConfig::default();
        let traj = null_text_invert(&image(3), "a cat", &s, &b, 7.5, &cfg, &DdimInversionConfig::default()).unwrap();
        traj.validate(&s).unwrap();
        let null = b.embed_text("").unwrap();
        let path = replay_path(&traj, &s, &b).unwrap();
        for (i, e) in traj.entries.iter().enumerate() {
            assert_eq!(e.uncond.as_ref().unwrap(), &null);
            let r = e.residual.unwrap();
            assert!(r < 1e-6, "step {i}: {r}");
            assert!(path[i + 1].max_abs_diff(traj.pivot_after(i)) < cfg.early_stop_epsilon);
        }
        let rec = replay_reconstruction(&traj, &s, &b).unwrap();
        assert!(rec.max_abs_diff(&traj.clean) < 1e-4);
    }

    #[test]
    fn optimization_reduces_residual_when_text_matters() {
        let b = MockBackend::new(MockConfig {
            text_coupling: 0.05,
            ..MockConfig::default()
        })
        .unwrap();
        let s = Schedule::new(&ScheduleConfig {
            num_sample_steps: 10,
            ..ScheduleConfig::default()
        })
        .unwrap();
        let img = image(4);
        let inv = DdimInversionConfig::default();
        let tuned_cfg = NullTextConfig {
            iterations_per_step: 200,
            learning_rate: 5e-2,
            early_stop_epsilon: 1e-5,
        };
        let tuned = null_text_invert(&img, "a cat", &s, &b, 7.5, &tuned_cfg, &inv).unwrap();
        let untuned_cfg = NullTextConfig {
            iterations_per_step: 1,
            learning_rate: 1e-12,
            ..tuned_cfg.clone()
        };
        let untuned = null_text_invert(&img, "a cat", &s, &b, 7.5, &untuned_cfg, &inv).unwrap();
        let worst = |t: &LatentTrajectory| t.residuals().into_iter().flatten().fold(0.0f32, f32::max);
        assert!(worst(&untuned) > 1e-3, "{}", worst(&untuned));
        assert!(worst(&tuned) < 0.1 * worst(&untuned), "{} vs {}", worst(&tuned), worst(&untuned));
        // Replay uses exactly the stored embeddings.
        let path = replay_path(&tuned, &s, &b).unwrap();
        for (i, e) in tuned.entries.iter().enumerate() {
            assert_eq!(path[i + 1].max_abs_diff(tuned.pivot_after(i)), e.residual.unwrap());
        }
        // Warm start: embeddings differ from the null embedding after tuning.
        assert_ne!(tuned.entries[9].uncond.as_ref().unwrap(), &b.embed_text("").unwrap());
    }

    #[test]
    fn replay_requires_embeddings_on_source() {
        let b = MockBackend::new(MockConfig::default()).unwrap();
        let s = schedule();
        let mut traj = ddim_invert(&image(5), "a cat", &s, &b).unwrap();
        traj.kind = TrajectoryKind::Source;
        assert!(matches!(replay_reconstruction(&traj, &s, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn target_replay_reconstructs() {
        let b = MockBackend::new(MockConfig::default()).unwrap();
        let s = schedule();
        let traj = ddim_invert(&image(6), "a dog", &s, &b).unwrap();
        let rec = replay_reconstruction(&traj, &s, &b).unwrap();
        assert!(rec.max_abs_diff(&traj.clean) < 1e-4);
    }
}
