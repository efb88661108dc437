//! Mask-wise appearance transfer in the predicted-x0 space.
//!
//! `x'_0 = M·((1−δ)·x0_src + δ·C(x0_tar)) + (1−M)·x0_src`, and the residual
//! form `T(x'_0, x0) = x'_0 − x0` consumed by latent deviation.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::latent::{mix, Latent};
use crate::masking::ObjectMask;
use crate::matching::MatchingMode;
use crate::{Error, Result};

/// Every knob of one transfer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferParams {
    /// Transfer weight δ.
    pub delta: f32,
    /// Latent balance λ.
    #[serde(rename = "lambda")]
    pub lambda_: f32,
    /// Noise mixing γ.
    pub gamma: f32,
    /// First deviated denoising step (inclusive).
    pub start_step: usize,
    /// Last deviated denoising step (exclusive).
    pub end_step: usize,
    pub matching_mode: MatchingMode,
    pub mask_threshold: f32,
    /// Matches scoring below this cosine are left untouched.
    pub match_score_threshold: Option<f32>,
}

impl Default for TransferParams {
    fn default() -> Self {
        Self {
            delta: 0.6,
            lambda_: 0.2,
            gamma: 0.2,
            start_step: 12,
            end_step: 21,
            matching_mode: MatchingMode::Progressive,
            mask_threshold: 0.5,
            match_score_threshold: None,
        }
    }
}

impl TransferParams {
    pub fn validate(&self, num_sample_steps: usize) -> Result<()> {
        for (name, v) in [("delta", self.delta), ("lambda", self.lambda_), ("gamma", self.gamma)] {
            check_unit(name, v)?;
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold <= 1.0) {
            return Err(Error::Domain(format!(
                "mask threshold must lie in (0, 1], got {}",
                self.mask_threshold
            )));
        }
        if !(self.start_step < self.end_step && self.end_step <= num_sample_steps) {
            return Err(Error::Domain(format!(
                "step window [{}, {}) must satisfy 0 <= start < end <= {num_sample_steps}",
                self.start_step, self.end_step
            )));
        }
        Ok(())
    }

    pub fn in_window(&self, step: usize) -> bool {
        (self.start_step..self.end_step).contains(&step)
    }
}

pub(crate) fn check_unit(name: &str, v: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Domain(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// Blends matched target features into the source inside the mask.
///
/// Outside the mask the source is returned bit-for-bit.
pub fn transfer_x0(x0_src: &Latent, x0_tar_aligned: &Latent, mask: &ObjectMask, delta: f32) -> Result<Latent> {
    x0_src.ensure_same_shape(x0_tar_aligned)?;
    check_unit("delta", delta)?;
    let (_, h, w) = x0_src.data.dim();
    if mask.data.dim() != (h, w) {
        let (mh, mw) = mask.data.dim();
        return Err(Error::shape(&[h, w], &[mh, mw]));
    }
    let mut out = x0_src.data.clone();
    for (mut plane, tar) in out.outer_iter_mut().zip(x0_tar_aligned.data.outer_iter()) {
        Zip::from(&mut plane)
            .and(&tar)
            .and(&mask.data)
            .for_each(|s, &t, &m| {
                if m != 0.0 {
                    let blended = mix(t, *s, delta);
                    *s = if m == 1.0 { blended } else { m * blended + (1.0 - m) * *s };
                }
            });
    }
    Ok(Latent::new(out))
}

/// The transfer residual `x'_0 − x0`.
pub fn transfer_delta(x0_prime: &Latent, x0: &Latent) -> Result<Latent> {
    x0_prime.zip_map(x0, |a, b| a - b)
}
