//! DDIM timestep bookkeeping and the three linear maps between `x_t`, the
//! predicted `x0`, and the noise estimate `ε`.
//!
//! Throughout, `a_t` is the *cumulative* signal coefficient (the product of
//! `1 − β` up to `t`), so that
//!
//! ```text
//! x_t = √a_t · x0 + √(1 − a_t) · ε
//! ```
//!
//! holds exactly and the deterministic DDIM update is
//!
//! ```text
//! x_{t−1} = √a_{t−1} · (x_t − √(1 − a_t) · ε) / √a_t + √(1 − a_{t−1}) · ε
//! ```

use std::fmt;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::latent::Latent;
use crate::{Error, Result};

/// A model timestep. [`Timestep::CLEAN`] marks the fully denoised end of the
/// trajectory, whose coefficient is the schedule's `final_alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestep(pub i32);

impl Timestep {
    pub const CLEAN: Timestep = Timestep(-1);

    pub fn is_clean(self) -> bool {
        self == Self::CLEAN
    }
}

impl fmt::Display for Timestep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            f.write_str("clean")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Linear,
    /// Linear in `√β`, as used by Stable Diffusion.
    ScaledLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub num_sample_steps: usize,
    pub num_train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_schedule: BetaSchedule,
    pub steps_offset: usize,
    /// Coefficient used for the final step onto the clean latent.
    pub final_alpha: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_sample_steps: 50,
            num_train_timesteps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            beta_schedule: BetaSchedule::ScaledLinear,
            steps_offset: 1,
            final_alpha: 1.0,
        }
    }
}

/// The sampling grid: descending timesteps with their cumulative signal
/// coefficients. Every `√a_t` factor in the crate is read from here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    timesteps: Vec<Timestep>,
    alphas: Vec<f64>,
    final_alpha: f64,
}

impl Schedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let n = cfg.num_sample_steps;
        let train = cfg.num_train_timesteps;
        if n == 0 || train == 0 || n > train {
            return Err(Error::Config(format!(
                "need 0 < num_sample_steps ({n}) <= num_train_timesteps ({train})"
            )));
        }
        if !(cfg.beta_start > 0.0 && cfg.beta_end < 1.0 && cfg.beta_start <= cfg.beta_end) {
            return Err(Error::Config(format!(
                "beta range [{}, {}] must satisfy 0 < start <= end < 1",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let betas: Vec<f64> = match cfg.beta_schedule {
            BetaSchedule::Linear => linspace(cfg.beta_start, cfg.beta_end, train),
            BetaSchedule::ScaledLinear => {
                linspace(cfg.beta_start.sqrt(), cfg.beta_end.sqrt(), train)
                    .into_iter()
                    .map(|b| b * b)
                    .collect()
            }
        };
        let mut cumulative = Vec::with_capacity(train);
        let mut acc = 1.0f64;
        for b in betas {
            acc *= 1.0 - b;
            cumulative.push(acc);
        }

        let stride = train / n;
        let mut timesteps = Vec::with_capacity(n);
        let mut alphas = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let t = i * stride + cfg.steps_offset;
            if t >= train {
                return Err(Error::Config(format!(
                    "steps_offset {} pushes timestep {t} outside the training range",
                    cfg.steps_offset
                )));
            }
            timesteps.push(Timestep(t as i32));
            alphas.push(cumulative[t]);
        }
        Self::from_alphas(timesteps, alphas, cfg.final_alpha)
    }

    /// Builds a schedule from explicit `(timestep, a_t)` pairs in sampling
    /// order (noisiest first).
    pub fn from_alphas(timesteps: Vec<Timestep>, alphas: Vec<f64>, final_alpha: f64) -> Result<Self> {
        if timesteps.is_empty() || timesteps.len() != alphas.len() {
            return Err(Error::Config(format!(
                "schedule needs equal, non-zero numbers of timesteps ({}) and coefficients ({})",
                timesteps.len(),
                alphas.len()
            )));
        }
        for w in timesteps.windows(2) {
            if w[0] <= w[1] {
                return Err(Error::Config(format!(
                    "timesteps must be strictly descending ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if timesteps.iter().any(|t| t.0 < 0) {
            return Err(Error::Config("negative timestep in schedule".into()));
        }
        for w in alphas.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(format!(
                    "signal coefficients must increase as noise decreases ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if alphas.iter().chain(std::iter::once(&final_alpha)).any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config("signal coefficients must lie in (0, 1]".into()));
        }
        if final_alpha < *alphas.last().unwrap() {
            return Err(Error::Config(
                "final coefficient must not be noisier than the last timestep".into(),
            ));
        }
        Ok(Self {
            timesteps,
            alphas,
            final_alpha,
        })
    }

    pub fn num_sample_steps(&self) -> usize {
        self.timesteps.len()
    }

    /// Sampling-order timesteps, noisiest first.
    pub fn timesteps(&self) -> &[Timestep] {
        &self.timesteps
    }

    pub fn timestep(&self, index: usize) -> Timestep {
        self.timesteps[index]
    }

    /// The timestep reached after denoising step `index`.
    pub fn prev_timestep(&self, index: usize) -> Timestep {
        self.timesteps
            .get(index + 1)
            .copied()
            .unwrap_or(Timestep::CLEAN)
    }

    pub fn index_of(&self, t: Timestep) -> Option<usize> {
        self.timesteps.binary_search_by(|probe| t.cmp(probe)).ok()
    }

    pub fn final_alpha(&self) -> f64 {
        self.final_alpha
    }

    /// Cumulative signal coefficient `a_t`.
    pub fn alpha(&self, t: Timestep) -> Result<f64> {
        if t.is_clean() {
            return Ok(self.final_alpha);
        }
        self.index_of(t)
            .map(|i| self.alphas[i])
            .ok_or(Error::UnknownTimestep(t.0))
    }

    /// `(√a_t, √(1 − a_t))`.
    pub fn sqrt_coefficients(&self, t: Timestep) -> Result<(f64, f64)> {
        let a = self.alpha(t)?;
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }

    /// Stable digest input: every timestep and coefficient bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut s = String::new();
        for (t, a) in self.timesteps.iter().zip(&self.alphas) {
            s.push_str(&format!("{}:{:016x};", t.0, a.to_bits()));
        }
        s.push_str(&format!("final:{:016x}", self.final_alpha.to_bits()));
        s
    }
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

/// Recovers the clean estimate: `x0 = (x_t − √(1 − a_t)·ε) / √a_t`.
pub fn predict_x0(x_t: &Latent, eps: &Latent, t: Timestep, s: &Schedule) -> Result<Latent> {
    x_t.ensure_same_shape(eps)?;
    let (sa, sb) = s.sqrt_coefficients(t)?;
    let data = Zip::from(&x_t.data)
        .and(&eps.data)
        .map_collect(|&x, &e| ((f64::from(x) - sb * f64::from(e)) / sa) as f32);
    Ok(Latent::new(data).with_step(t))
}

/// `x_t = √a_t·x0 + √(1 − a_t)·ε`.
pub fn compose_latent(x0: &Latent, eps: &Latent, t: Timestep, s: &Schedule) -> Result<Latent> {
    x0.ensure_same_shape(eps)?;
    let (sa, sb) = s.sqrt_coefficients(t)?;
    let data = Zip::from(&x0.data)
        .and(&eps.data)
        .map_collect(|&x, &e| (sa * f64::from(x) + sb * f64::from(e)) as f32);
    Ok(Latent::new(data).with_step(t))
}

/// Deterministic DDIM update from `t` to the less noisy `t_prev`.
pub fn ddim_step(
    x_t: &Latent,
    eps: &Latent,
    t: Timestep,
    t_prev: Timestep,
    s: &Schedule,
) -> Result<Latent> {
    x_t.ensure_same_shape(eps)?;
    if t_prev > t {
        return Err(Error::Ordering(format!(
            "denoising step from {t} to noisier timestep {t_prev}"
        )));
    }
    transport(x_t, eps, t, t_prev, s)
}

/// Deterministic DDIM inversion step from `t` to the noisier `t_next`.
pub fn ddim_inverse_step(
    x_t: &Latent,
    eps: &Latent,
    t: Timestep,
    t_next: Timestep,
    s: &Schedule,
) -> Result<Latent> {
    x_t.ensure_same_shape(eps)?;
    if t_next < t {
        return Err(Error::Ordering(format!(
            "inversion step from {t} to less noisy timestep {t_next}"
        )));
    }
    transport(x_t, eps, t, t_next, s)
}

// Arithmetic runs in f64 and rounds once on store.
// Moves x along the fixed-ε DDIM path from `from` to `to`.
fn transport(x: &Latent, eps: &Latent, from: Timestep, to: Timestep, s: &Schedule) -> Result<Latent> {
    let a_from = s.alpha(from)?;
    let a_to = s.alpha(to)?;
    if a_from == a_to {
        return Ok(x.clone().with_step(to));
    }
    let (sa_from, sb_from) = (a_from.sqrt(), (1.0 - a_from).sqrt());
    let (sa_to, sb_to) = (a_to.sqrt(), (1.0 - a_to).sqrt());
    let data = Zip::from(&x.data).and(&eps.data).map_collect(|&x, &e| {
        let e = f64::from(e);
        let x0 = (f64::from(x) - sb_from * e) / sa_from;
        (sa_to * x0 + sb_to * e) as f32
    });
    Ok(Latent::new(data).with_step(to))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f32) -> Latent {
        Latent::filled([1, 1, 1], v)
    }

    fn two_step(a_t: f64, a_prev: f64) -> Schedule {
        Schedule::from_alphas(vec![Timestep(20), Timestep(10)], vec![a_t, a_prev], 1.0).unwrap()
    }

    #[test]
    fn default_grid() {
        let s = Schedule::new(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.num_sample_steps(), 50);
        assert_eq!(s.timestep(0), Timestep(981));
        assert_eq!(s.timestep(49), Timestep(1));
        assert_eq!(s.prev_timestep(49), Timestep::CLEAN);
        assert_eq!(s.index_of(Timestep(501)), Some(24));
        let a: Vec<f64> = s.timesteps().iter().map(|&t| s.alpha(t).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&v| v > 0.0 && v <= 1.0));
        // Scaled-linear schedule at t = 981.
        assert!((a[0] - 0.005776).abs() < 1e-5, "{}", a[0]);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(Schedule::from_alphas(vec![Timestep(1), Timestep(2)], vec![0.1, 0.2], 1.0).is_err());
        assert!(Schedule::from_alphas(vec![Timestep(2), Timestep(1)], vec![0.3, 0.2], 1.0).is_err());
        assert!(Schedule::from_alphas(vec![Timestep(2)], vec![0.0], 1.0).is_err());
        let cfg = ScheduleConfig {
            num_sample_steps: 0,
            ..Default::default()
        };
        assert!(Schedule::new(&cfg).is_err());
    }

    #[test]
    fn predict_x0_zero_noise() {
        let s = two_step(0.3, 0.7);
        let x0 = Latent::filled([2, 3, 3], 0.8);
        let x_t = x0.map(|v| v * 0.3f64.sqrt() as f32);
        let out = predict_x0(&x_t, &Latent::zeros(2, 3, 3), Timestep(20), &s).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn predict_x0_scalar() {
        let s = two_step(0.25, 0.64);
        let out = predict_x0(&scalar(1.0), &scalar(1.0), Timestep(20), &s).unwrap();
        let expected = (1.0 - 0.75f64.sqrt()) / 0.5;
        assert!((out.data[[0, 0, 0]] as f64 - expected).abs() < 1e-6);
        assert!((out.data[[0, 0, 0]] - 0.26795).abs() < 1e-5);
    }

    #[test]
    fn compose_identity_and_noise_limb() {
        let s = Schedule::from_alphas(vec![Timestep(5), Timestep(3)], vec![0.5, 1.0], 1.0).unwrap();
        let x0 = Latent::filled([1, 2, 2], 0.37);
        let out = compose_latent(&x0, &Latent::zeros(1, 2, 2), Timestep(3), &s).unwrap();
        assert!(out.bit_eq(&x0));
        let e = Latent::filled([1, 2, 2], 2.0);
        let out = compose_latent(&Latent::zeros(1, 2, 2), &e, Timestep(5), &s).unwrap();
        assert!((out.data[[0, 1, 1]] - 0.5f32.sqrt() * 2.0).abs() < 1e-6);
    }

    #[test]
    fn ddim_step_scalar() {
        let s = two_step(0.25, 0.64);
        let out = ddim_step(&scalar(1.0), &scalar(0.5), Timestep(20), Timestep(10), &s).unwrap();
        let expected = 0.8 * (1.0 - 0.75f64.sqrt() * 0.5) / 0.5 + 0.6 * 0.5;
        assert!((out.data[[0, 0, 0]] as f64 - expected).abs() < 1e-6);
        // 0.8·(1 − 0.8660·0.5)/0.5 + 0.6·0.5
        assert!((out.data[[0, 0, 0]] - 1.20718).abs() < 1e-4);
    }

    #[test]
    fn ddim_noop_and_rescale() {
        let s = two_step(0.25, 0.64);
        let x = Latent::filled([1, 2, 2], 0.9);
        let e = Latent::filled([1, 2, 2], -0.3);
        let same = ddim_step(&x, &e, Timestep(20), Timestep(20), &s).unwrap();
        assert!(same.bit_eq(&x));
        let same = ddim_inverse_step(&x, &e, Timestep(10), Timestep(10), &s).unwrap();
        assert!(same.bit_eq(&x));

        let zero = Latent::zeros(1, 2, 2);
        let out = ddim_step(&x, &zero, Timestep(20), Timestep(10), &s).unwrap();
        assert!((out.data[[0, 0, 0]] - 0.9 * (0.64f32 / 0.25).sqrt()).abs() < 1e-6);
        let out = ddim_inverse_step(&x, &zero, Timestep(10), Timestep(20), &s).unwrap();
        assert!((out.data[[0, 0, 0]] - 0.9 * (0.25f32 / 0.64).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn ordering_and_lookup_errors() {
        let s = two_step(0.25, 0.64);
        let x = scalar(1.0);
        assert!(matches!(
            ddim_step(&x, &x, Timestep(10), Timestep(20), &s),
            Err(Error::Ordering(_))
        ));
        assert!(matches!(
            ddim_inverse_step(&x, &x, Timestep(20), Timestep(10), &s),
            Err(Error::Ordering(_))
        ));
        assert!(matches!(
            predict_x0(&x, &x, Timestep(15), &s),
            Err(Error::UnknownTimestep(15))
        ));
        assert!(matches!(
            predict_x0(&x, &Latent::zeros(1, 1, 2), Timestep(20), &s),
            Err(Error::Shape { .. })
        ));
    }

    proptest! {
        #[test]
        fn compose_predict_round_trip(
            vals in proptest::collection::vec((-1.0f32..1.0, -1.0f32..1.0), 12),
            idx in 0usize..50,
        ) {
            let s = Schedule::new(&ScheduleConfig::default()).unwrap();
            let t = s.timestep(idx);
            let x0 = Latent::new(ndarray::Array3::from_shape_vec((3, 2, 2), vals.iter().map(|v| v.0).collect()).unwrap());
            let e = Latent::new(ndarray::Array3::from_shape_vec((3, 2, 2), vals.iter().map(|v| v.1).collect()).unwrap());
            let x_t = compose_latent(&x0, &e, t, &s).unwrap();
            let back = predict_x0(&x_t, &e, t, &s).unwrap();
            prop_assert!(back.max_abs_diff(&x0) < 1e-6);
        }
    }
}
