//! Grid resampling between attention/feature resolution and the latent grid.

use ndarray::Array2;

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear(src: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.clone();
    }
    let sy = sh as f32 / height as f32;
    let sx = sw as f32 / width as f32;
    Array2::from_shape_fn((height, width), |(i, j)| {
        let fy = ((i as f32 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f32);
        let fx = ((j as f32 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f32);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
        let (wy, wx) = (fy - y0 as f32, fx - x0 as f32);
        let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
        let bottom = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
        top * (1.0 - wy) + bottom * wy
    })
}
