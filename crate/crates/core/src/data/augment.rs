//! Pad-and-crop plus horizontal flip.

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropFlip {
    /// Crop origin inside the zero-padded image, each in `0..=2*pad`.
    pub x: usize,
    pub y: usize,
    pub flip: bool,
}

pub fn sample_crop_flip<R: Rng + ?Sized>(rng: &mut R, crop_pad: usize, flip_prob: f64) -> CropFlip {
    let x = rng.random_range(0..=2 * crop_pad);
    let y = rng.random_range(0..=2 * crop_pad);
    let u: f64 = rng.random();
    CropFlip { x, y, flip: u < flip_prob }
}

/// Applies a fixed crop/flip to a `C×H×W` image padded by `crop_pad` zeros.
pub fn augment_with(img: &Tensor, crop_pad: usize, cf: CropFlip) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + cf.y) as isize - crop_pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if cf.flip { w - 1 - x } else { x };
                let sx = (xx + cf.x) as isize - crop_pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(img.shape(), out).expect("same shape")
}

pub fn augment<R: Rng + ?Sized>(img: &Tensor, rng: &mut R, crop_pad: usize, flip_prob: f64) -> Tensor {
    let cf = sample_crop_flip(rng, crop_pad, flip_prob);
    augment_with(img, crop_pad, cf)
}
