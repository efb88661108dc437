//! RGB images as `height × width × 3` float arrays in `[0, 1]`.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::Array3;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub data: Array3<f32>,
}

impl RgbImage {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (_, _, c) = data.dim();
        if c != 3 {
            let (h, w, _) = data.dim();
            return Err(Error::shape(&[h, w, 3], &[h, w, c]));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = f32::from(p[c]) / 255.0;
            }
        }
        Self { data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.data.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| quantize(self.data[[y as usize, x as usize, c]]);
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(Error::from)
    }

    /// Resamples to `height × width`; returns a clone when already that size.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if self.height() == height && self.width() == width {
            return self.clone();
        }
        let out = image::imageops::resize(&self.to_rgb8(), width as u32, height as u32, FilterType::Triangle);
        Self::from_rgb8(&out)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a `{0,1}` grid as a black/white PNG.
pub fn save_mask_png(mask: &ndarray::Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([quantize(mask[[y as usize, x as usize]])])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(Error::from)
}

/// Loads a grayscale PNG as a `{0,1}` grid (pixels ≥ 128 are inside).
pub fn load_mask_png(path: &Path) -> Result<ndarray::Array2<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(ndarray::Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        if img.get_pixel(x as u32, y as u32)[0] >= 128 {
            1.0
        } else {
            0.0
        }
    }))
}
