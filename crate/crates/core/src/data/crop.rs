use rand::Rng;

use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Side fraction kept by a random crop.
pub const CROP_FRACTION: f64 = 0.8;

/// Crops a window of `fraction` of each side at a uniform position and
/// resizes it back to the input size with bilinear interpolation.
pub fn random_crop(image: &Tensor, fraction: f64, rng: &mut RngStream) -> Tensor {
    let [c, h, w] = *image.shape() else {
        panic!("random_crop needs [C, H, W], got {:?}", image.shape());
    };
    let ch = ((h as f64 * fraction).round() as usize).clamp(1, h);
    let cw = ((w as f64 * fraction).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    // Align corners of the crop with corners of the output grid.
    let sy = if h > 1 { (ch - 1) as f64 / (h - 1) as f64 } else { 0.0 };
    let sx = if w > 1 { (cw - 1) as f64 / (w - 1) as f64 } else { 0.0 };
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            let fy = y as f64 * sy;
            let (y_lo, ty) = (fy.floor() as usize, fy - fy.floor());
            let y_hi = (y_lo + 1).min(ch - 1);
            for x in 0..w {
                let fx = x as f64 * sx;
                let (x_lo, tx) = (fx.floor() as usize, fx - fx.floor());
                let x_hi = (x_lo + 1).min(cw - 1);
                let at = |yy: usize, xx: usize| plane[(y0 + yy) * w + x0 + xx];
                let top = at(y_lo, x_lo) * (1.0 - tx) + at(y_lo, x_hi) * tx;
                let bottom = at(y_hi, x_lo) * (1.0 - tx) + at(y_hi, x_hi) * tx;
                out[(ci * h + y) * w + x] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("shape")
}
