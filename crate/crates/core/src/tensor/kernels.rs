//! Raw numeric kernels behind the tape operations.
//!
//! Convolution runs image by image (im2col followed by one GEMM), so the
//! result for an image never depends on the other images in the batch.

use crate::error::{FlatError, Result};
use crate::par::Exec;

use super::Scalar;

/// `c (+)= op(a) · op(b)` where `op` optionally transposes.
/// `a` is logically `m×k` and `b` is logically `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Geometry of a 2-D convolution over `C×H×W` images with `F` square filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(FlatError::Dimension("convolution stride must be at least 1".into()));
        }
        if kernel == 0 || kernel > height + 2 * pad || kernel > width + 2 * pad {
            return Err(FlatError::Dimension(format!(
                "kernel {kernel}x{kernel} does not fit a {height}x{width} input with padding {pad}"
            )));
        }
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        Ok(ConvGeom { channels, height, width, filters, kernel, stride, pad, out_h, out_w })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.filters * self.out_pixels()
    }
}

pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_pixels();
    let mut cols = vec![T::zero(); g.col_rows() * p];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &img[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_pixels();
    let mut img = vec![T::zero(); g.in_len()];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + iy as usize) * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            img[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    img
}

/// Forward convolution of a batch. Returns the output and, when
/// `keep_cols`, the per-image im2col buffers needed for the kernel gradient.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    g: &ConvGeom,
    batch: usize,
    keep_cols: bool,
    exec: Exec,
) -> (Vec<T>, Vec<Vec<T>>) {
    let per_image = exec.map(batch, |b| {
        let img = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let cols = im2col(img, g);
        let mut out = vec![T::zero(); g.out_len()];
        gemm(g.filters, g.col_rows(), g.out_pixels(), kernel, false, &cols, false, &mut out, false);
        (out, if keep_cols { cols } else { Vec::new() })
    });
    let mut out = Vec::with_capacity(batch * g.out_len());
    let mut cols = Vec::with_capacity(if keep_cols { batch } else { 0 });
    for (o, c) in per_image {
        out.extend_from_slice(&o);
        if keep_cols {
            cols.push(c);
        }
    }
    (out, cols)
}

/// Backward convolution. `cols` must be the buffers kept by the forward pass
/// when `need_dk` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    dout: &[T],
    kernel: &[T],
    cols: &[Vec<T>],
    g: &ConvGeom,
    batch: usize,
    need_dx: bool,
    need_dk: bool,
    exec: Exec,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let klen = g.filters * g.col_rows();
    let per_image = exec.map(batch, |b| {
        let d = &dout[b * g.out_len()..(b + 1) * g.out_len()];
        let dk = need_dk.then(|| {
            let mut dk = vec![T::zero(); klen];
            gemm(g.filters, g.out_pixels(), g.col_rows(), d, false, &cols[b], true, &mut dk, false);
            dk
        });
        let dx = need_dx.then(|| {
            let mut dcols = vec![T::zero(); g.col_rows() * g.out_pixels()];
            gemm(g.col_rows(), g.filters, g.out_pixels(), kernel, true, d, false, &mut dcols, false);
            col2im(&dcols, g)
        });
        (dx, dk)
    });
    let mut dx_all = need_dx.then(|| Vec::with_capacity(batch * g.in_len()));
    let mut dk_all = need_dk.then(|| vec![T::zero(); klen]);
    for (dx, dk) in per_image {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dk)) = (dk_all.as_mut(), dk) {
            all.iter_mut().zip(&dk).for_each(|(a, &v)| *a += v);
        }
    }
    (dx_all, dk_all)
}

/// 2×2 max pooling with stride 2 over `planes` planes of `h×w`.
/// Returns the pooled values and the flat source index of each maximum.
/// Ties resolve to the first position in row-major order.
pub fn maxpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.out_len()];
        for f in 0..g.filters {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut s = 0.0;
                    for c in 0..g.channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                s += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * k[((f * g.channels + c) * g.kernel + ky) * g.kernel + kx];
                            }
                        }
                    }
                    out[(f * g.out_h + oy) * g.out_w + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_summation() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 2), (2, 2, 5)] {
            let g = ConvGeom::new(2, 7, 6, 3, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..g.in_len()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
            let kern: Vec<f64> =
                (0..g.filters * g.col_rows()).map(|i| ((i * 17 % 7) as f64 - 3.0) / 4.0).collect();
            let (out, _) = conv2d_forward(&x, &kern, &g, 1, false, Exec::Sequential);
            let want = naive_conv(&x, &kern, &g);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 5, 1, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.out_pixels()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        assert!(ConvGeom::new(1, 2, 2, 1, 5, 1, 1).is_err());
        assert!(ConvGeom::new(1, 4, 4, 1, 3, 0, 1).is_err());
        assert!(ConvGeom::new(1, 2, 2, 1, 4, 1, 1).is_ok());
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let x = [1.0f32, 3.0, 3.0, 0.0];
        let (v, a) = maxpool2_forward(&x, 1, 2, 2);
        assert_eq!(v, vec![3.0]);
        assert_eq!(a, vec![1]);
    }
}
