//! The latent array type shared by every stage of the pipeline.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::schedule::Timestep;
use crate::{Error, Result};

/// A `channels × height × width` latent: `x_t`, a predicted `x0`, or a noise
/// prediction, depending on where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub data: Array3<f32>,
    pub step: Option<Timestep>,
}

impl Latent {
    pub fn new(data: Array3<f32>) -> Self {
        Self { data, step: None }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(Array3::zeros((channels, height, width)))
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        Self::new(Array3::from_elem(shape, value))
    }

    pub fn with_step(mut self, t: Timestep) -> Self {
        self.step = Some(t);
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.data.dim();
        [c, h, w]
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// Spatial grid `(height, width)`.
    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Latent) -> Result<()> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::shape(&self.shape(), &other.shape()));
        }
        Ok(())
    }

    /// Elementwise combination of two equally shaped latents.
    pub fn zip_map(&self, other: &Latent, f: impl Fn(f32, f32) -> f32) -> Result<Latent> {
        self.ensure_same_shape(other)?;
        let data = Zip::from(&self.data)
            .and(&other.data)
            .map_collect(|&a, &b| f(a, b));
        Ok(Latent::new(data))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Latent {
        Latent::new(self.data.mapv(f))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// `‖self − other‖∞`; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Latent) -> f32 {
        assert_eq!(self.data.dim(), other.data.dim(), "shape mismatch");
        Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0f32, |m, a, b| m.max((a - b).abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Bitwise equality of the underlying arrays.
    pub fn bit_eq(&self, other: &Latent) -> bool {
        self.data.dim() == other.data.dim()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Mixes `a` and `b` as `w·a + (1−w)·b`.
///
/// Endpoints are exact: `w = 1` yields `a`, `w = 0` yields `b`, and `a == b`
/// yields `b` for every other weight.
#[inline]
pub fn mix(a: f32, b: f32, w: f32) -> f32 {
    if w == 0.0 || (a == b && w != 1.0) {
        b
    } else if w == 1.0 {
        a
    } else {
        w * a + (1.0 - w) * b
    }
}
