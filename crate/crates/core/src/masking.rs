//! Binary object mask from aggregated cross-attention.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::AttentionCapture;
use crate::resample::bilinear;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMask {
    /// `{0, 1}` values over the latent grid.
    pub data: Array2<f32>,
    pub token_indices: Vec<usize>,
    pub threshold: f32,
}

impl ObjectMask {
    /// Wraps an already binary grid (user override or tests).
    pub fn from_binary(data: Array2<f32>) -> Self {
        let data = data.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        Self {
            data,
            token_indices: Vec::new(),
            threshold: 0.5,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Fraction of grid cells inside the mask.
    pub fn coverage(&self) -> f32 {
        self.data.sum() / self.data.len() as f32
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Nearest-neighbor resampling onto another grid.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let (h, w) = self.grid();
        let data = Array2::from_shape_fn((height, width), |(i, j)| {
            self.data[[i * h / height, j * w / width]]
        });
        Self {
            data,
            ..self.clone()
        }
    }
}

/// Mean attention of the selected tokens over every capture, layer and head,
/// resampled to `grid` and min-max normalized to `[0, 1]`.
///
/// `resolution` keeps only square attention layers of that side length.
pub fn aggregate_attention(
    captures: &[AttentionCapture],
    token_indices: &[usize],
    grid: (usize, usize),
    resolution: Option<usize>,
) -> Result<Array2<f32>> {
    if captures.is_empty() {
        return Err(Error::Contract("no attention captures to aggregate".into()));
    }
    if token_indices.is_empty() {
        return Err(Error::Contract("no object tokens selected".into()));
    }
    let (h, w) = grid;
    let mut sum = Array2::<f64>::zeros((h, w));
    let mut count = 0usize;
    for cap in captures {
        cap.validate()?;
        let rows: Vec<usize> = token_indices
            .iter()
            .map(|k| {
                cap.token_indices
                    .iter()
                    .position(|c| c == k)
                    .ok_or_else(|| Error::Index(format!("token {k} was not captured")))
            })
            .collect::<Result<_>>()?;
        for layer in &cap.layers {
            let (lh, lw) = layer.grid();
            if resolution.is_some_and(|r| (lh, lw) != (r, r)) {
                continue;
            }
            for head in &layer.heads {
                for &row in &rows {
                    let map = head.index_axis(ndarray::Axis(0), row).to_owned();
                    let up = bilinear(&map, h, w);
                    sum.zip_mut_with(&up, |s, &v| *s += f64::from(v));
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Config(format!(
            "no attention layer at resolution {resolution:?}"
        )));
    }
    let mean = sum.mapv(|v| v / count as f64);
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(Array2::ones((h, w)));
    }
    Ok(mean.mapv(|v| ((v - lo) / (hi - lo)) as f32))
}

/// Thresholds the aggregated attention into a binary mask.
///
/// A constant attention field carries no location information; it yields the
/// all-ones mask with a warning.
pub fn extract_object_mask(
    captures: &[AttentionCapture],
    token_indices: &[usize],
    threshold: f32,
    grid: (usize, usize),
    resolution: Option<usize>,
) -> Result<ObjectMask> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Domain(format!("mask threshold must lie in (0, 1], got {threshold}")));
    }
    let norm = aggregate_attention(captures, token_indices, grid, resolution)?;
    let data = if norm.iter().all(|&v| v == 1.0) {
        log::warn!("attention map is constant; falling back to an all-ones object mask");
        norm
    } else {
        norm.mapv(|v| if v >= threshold { 1.0 } else { 0.0 })
    };
    Ok(ObjectMask {
        data,
        token_indices: token_indices.to_vec(),
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::AttentionLayer;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn capture_from(map: Array2<f32>) -> AttentionCapture {
        let (h, w) = map.dim();
        AttentionCapture {
            token_indices: vec![3],
            layers: vec![AttentionLayer {
                name: "l0".into(),
                heads: vec![map.into_shape_with_order((1, h, w)).unwrap()],
            }],
        }
    }

    fn bump(n: usize) -> Array2<f32> {
        let c = (n as f32 - 1.0) / 2.0;
        Array2::from_shape_fn((n, n), |(i, j)| {
            let d2 = (i as f32 - c).powi(2) + (j as f32 - c).powi(2);
            (-d2 / 8.0).exp()
        })
    }

    #[test]
    fn uniform_map_gives_all_ones() {
        let cap = capture_from(Array2::from_elem((8, 8), 0.2));
        let m = extract_object_mask(&[cap], &[3], 0.5, (8, 8), None).unwrap();
        assert!(m.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn centered_bump_gives_centered_blob() {
        let cap = capture_from(bump(16));
        let m = extract_object_mask(&[cap], &[3], 0.5, (16, 16), None).unwrap();
        assert!(m.is_binary());
        assert_eq!(m.data[[7, 7]], 1.0);
        assert_eq!(m.data[[0, 0]], 0.0);
        let cov = m.coverage();
        assert!(cov > 0.0 && cov < 1.0);
        // Symmetric about the center.
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(m.data[[i, j]], m.data[[15 - i, 15 - j]]);
            }
        }
    }

    #[test]
    fn threshold_one_selects_argmax() {
        let mut map = Array2::from_shape_fn((6, 6), |(i, j)| (i * 6 + j) as f32 * 0.01);
        map[[2, 3]] = 5.0;
        map[[4, 1]] = 5.0;
        let m = extract_object_mask(&[capture_from(map)], &[3], 1.0, (6, 6), None).unwrap();
        assert_eq!(m.data.sum(), 2.0);
        assert_eq!(m.data[[2, 3]], 1.0);
        assert_eq!(m.data[[4, 1]], 1.0);
    }

    #[test]
    fn coarse_layers_are_resampled() {
        let cap = capture_from(bump(4));
        let m = extract_object_mask(&[cap], &[3], 0.5, (16, 16), None).unwrap();
        assert_eq!(m.grid(), (16, 16));
        assert!(m.is_binary());
    }

    #[test]
    fn resolution_filter() {
        let mut cap = capture_from(bump(16));
        cap.layers.push(AttentionLayer {
            name: "l1".into(),
            heads: vec![Array3::from_elem((1, 4, 4), 0.3)],
        });
        let only_coarse = aggregate_attention(&[cap.clone()], &[3], (16, 16), Some(4)).unwrap();
        assert!(only_coarse.iter().all(|&v| v == 1.0));
        assert!(matches!(
            aggregate_attention(&[cap], &[3], (16, 16), Some(2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(
            extract_object_mask(&[], &[3], 0.5, (4, 4), None),
            Err(Error::Contract(_))
        ));
        let cap = capture_from(bump(4));
        assert!(matches!(
            extract_object_mask(std::slice::from_ref(&cap), &[5], 0.5, (4, 4), None),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            extract_object_mask(&[cap], &[3], 0.0, (4, 4), None),
            Err(Error::Domain(_))
        ));
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_pixels(
            vals in proptest::collection::vec(0.0f32..1.0, 64),
            t1 in 0.01f32..=1.0,
            t2 in 0.01f32..=1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let cap = capture_from(Array2::from_shape_vec((8, 8), vals).unwrap());
            let a = extract_object_mask(std::slice::from_ref(&cap), &[3], lo, (8, 8), None).unwrap();
            let b = extract_object_mask(&[cap], &[3], hi, (8, 8), None).unwrap();
            prop_assert!(a.is_binary() && b.is_binary());
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                prop_assert!(y <= x);
            }
        }
    }
}
