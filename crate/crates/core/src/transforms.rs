//! Random projective warps.
//!
//! A warp is encoded by the displacement of the four image corners
//! (top-left, top-right, bottom-right, bottom-left), each displacement given
//! as a fraction of the image width/height and bounded by the sampling
//! magnitude. The decoder regresses these eight numbers divided by the
//! magnitude, i.e. values in `[-1, 1]`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlatError, Result};
use crate::tensor::Tensor;

pub const TARGET_DIM: usize = 8;
pub const DEFAULT_MAGNITUDE: f32 = 0.25;
const MAX_RESAMPLES: usize = 10;
const MIN_DET: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectiveTransform {
    /// Corner displacements divided by `magnitude`; each in `[-1, 1]`.
    unit: [f32; TARGET_DIM],
    magnitude: f32,
}

impl ProjectiveTransform {
    pub fn identity() -> Self {
        ProjectiveTransform { unit: [0.0; TARGET_DIM], magnitude: 0.0 }
    }

    /// Builds a transform from normalized targets. Values are clamped to
    /// `[-1, 1]`.
    pub fn from_target(target: &[f32; TARGET_DIM], magnitude: f32) -> Self {
        let mut unit = *target;
        unit.iter_mut().for_each(|u| *u = u.clamp(-1.0, 1.0));
        ProjectiveTransform { unit, magnitude }
    }

    /// Builds a transform from raw corner offsets (fractions of width/height).
    pub fn from_offsets(offsets: &[f32; TARGET_DIM], magnitude: f32) -> Result<Self> {
        if let Some(o) = offsets.iter().find(|o| o.abs() > magnitude) {
            return Err(FlatError::config("magnitude", format!("offset {o} exceeds magnitude {magnitude}")));
        }
        let mut unit = [0.0; TARGET_DIM];
        if magnitude > 0.0 {
            for (u, &o) in unit.iter_mut().zip(offsets) {
                *u = o / magnitude;
            }
        }
        Ok(ProjectiveTransform { unit, magnitude })
    }

    pub fn magnitude(&self) -> f32 {
        self.magnitude
    }

    /// Corner displacements `(dx, dy)` for TL, TR, BR, BL.
    pub fn corner_offsets(&self) -> [f32; TARGET_DIM] {
        self.unit.map(|u| u * self.magnitude)
    }

    pub fn target(&self) -> [f32; TARGET_DIM] {
        self.unit
    }

    /// Determinant of the homography on the unit square.
    fn unit_square_det(&self) -> f64 {
        corners_to_matrix(&self.corner_offsets(), 1.0, 1.0, 1.0, 1.0).map(|m| m.determinant()).unwrap_or(0.0)
    }
}

/// A 3×3 projective matrix acting on pixel coordinates, bottom-right entry 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Homography { m: Matrix3::identity() }
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        let m = Matrix3::from_fn(|r, c| rows[r][c]);
        if m[(2, 2)] == 0.0 {
            return Err(FlatError::DegenerateTransform("bottom-right entry is zero".into()));
        }
        Ok(Homography { m: m / m[(2, 2)] })
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography { m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0) }
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
    }

    pub fn determinant(&self) -> f64 {
        self.m.determinant()
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        project(&self.m, x, y)
    }

    fn inverse(&self) -> Result<Matrix3<f64>> {
        if self.m.determinant().abs() <= MIN_DET {
            return Err(FlatError::DegenerateTransform(format!(
                "homography determinant {:e} is not invertible",
                self.m.determinant()
            )));
        }
        self.m
            .try_inverse()
            .ok_or_else(|| FlatError::DegenerateTransform("homography is singular".into()))
    }
}

fn project(m: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let p = m * Vector3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z)
}

/// Draws each normalized corner displacement uniformly from `[-1, 1)`,
/// retrying when the warp would not be invertible.
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R, magnitude: f32) -> Result<ProjectiveTransform> {
    if !(0.0..0.5).contains(&magnitude) {
        return Err(FlatError::config(
            "transform_magnitude",
            format!("must lie in [0, 0.5) so corners cannot cross, got {magnitude}"),
        ));
    }
    for _ in 0..MAX_RESAMPLES {
        let mut unit = [0.0f32; TARGET_DIM];
        for u in unit.iter_mut() {
            let r: f32 = rng.random();
            *u = if magnitude == 0.0 { 0.0 } else { 2.0 * r - 1.0 };
        }
        let t = ProjectiveTransform { unit, magnitude };
        if t.unit_square_det().abs() > MIN_DET {
            return Ok(t);
        }
    }
    Err(FlatError::DegenerateDistribution(format!(
        "{MAX_RESAMPLES} consecutive non-invertible warps at magnitude {magnitude}"
    )))
}

fn corner_points(width: f64, height: f64) -> [(f64, f64); 4] {
    let (x1, y1) = (width - 1.0, height - 1.0);
    [(0.0, 0.0), (x1, 0.0), (x1, y1), (0.0, y1)]
}

fn corners_to_matrix(offsets: &[f32; TARGET_DIM], width: f64, height: f64, sx: f64, sy: f64) -> Result<Matrix3<f64>> {
    let src = if width == 1.0 && height == 1.0 {
        [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    } else {
        corner_points(width, height)
    };
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, &(x, y)) in src.iter().enumerate() {
        let u = x + offsets[2 * i] as f64 * sx;
        let v = y + offsets[2 * i + 1] as f64 * sy;
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| FlatError::DegenerateTransform("corner system is singular".into()))?;
    Ok(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

/// Solves the four-point system mapping the image corners to their displaced
/// positions, in pixel coordinates.
pub fn corners_to_homography(t: &ProjectiveTransform, width: usize, height: usize) -> Result<Homography> {
    if width < 2 || height < 2 {
        return Err(FlatError::Dimension(format!("image must be at least 2x2, got {width}x{height}")));
    }
    let (w, h) = (width as f64, height as f64);
    let m = corners_to_matrix(&t.corner_offsets(), w, h, w, h)?;
    if !m.iter().all(|v| v.is_finite()) {
        return Err(FlatError::DegenerateTransform("corner system produced non-finite entries".into()));
    }
    Ok(Homography { m })
}

/// Positions of the displaced corners in pixel coordinates.
pub fn displaced_corners(t: &ProjectiveTransform, width: usize, height: usize) -> [(f64, f64); 4] {
    let (w, h) = (width as f64, height as f64);
    let off = t.corner_offsets();
    let mut out = corner_points(w, h);
    for (i, p) in out.iter_mut().enumerate() {
        p.0 += off[2 * i] as f64 * w;
        p.1 += off[2 * i + 1] as f64 * h;
    }
    out
}

pub fn source_corners(width: usize, height: usize) -> [(f64, f64); 4] {
    corner_points(width as f64, height as f64)
}

/// Inverse-maps every output pixel through `h` and samples the input
/// bilinearly. Samples outside the image read as 0.
pub fn warp_image(img: &Tensor, h: &Homography) -> Result<Tensor> {
    let [c, height, width] = match img.shape() {
        &[c, hh, ww] => [c, hh, ww],
        s => return Err(FlatError::Dimension(format!("warp expects a CxHxW image, got {s:?}"))),
    };
    let inv = h.inverse()?;
    let src = img.data();
    let mut out = vec![0.0f32; src.len()];
    let plane = height * width;
    let fetch = |ch: usize, x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            0.0
        } else {
            src[ch * plane + y as usize * width + x as usize] as f64
        }
    };
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = project(&inv, x as f64, y as f64);
            if !(sx > -1.0 && sy > -1.0 && sx < width as f64 && sy < height as f64) {
                continue;
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..c {
                let a = fetch(ch, x0, y0);
                let b = fetch(ch, x0 + 1, y0);
                let cc = fetch(ch, x0, y0 + 1);
                let d = fetch(ch, x0 + 1, y0 + 1);
                let v = (1.0 - fx) * (1.0 - fy) * a + fx * (1.0 - fy) * b + (1.0 - fx) * fy * cc + fx * fy * d;
                let lo = a.min(b).min(cc).min(d);
                let hi = a.max(b).max(cc).max(d);
                out[ch * plane + y * width + x] = v.clamp(lo, hi) as f32;
            }
        }
    }
    Tensor::new(img.shape(), out)
}

/// Regression target for the decoder.
pub fn transform_target(t: &ProjectiveTransform) -> Tensor {
    Tensor::from_vec(t.target().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    #[test]
    fn zero_magnitude_is_identity() {
        let mut rng = seed::stream(1, &[]);
        let t = sample_transform(&mut rng, 0.0).unwrap();
        assert_eq!(t.corner_offsets(), [0.0; 8]);
        let h = corners_to_homography(&t, 32, 32).unwrap();
        assert_eq!(h.rows(), Homography::identity().rows());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let a = sample_transform(&mut seed::stream(9, &[1]), 0.25).unwrap();
        let b = sample_transform(&mut seed::stream(9, &[1]), 0.25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_magnitude_is_a_config_error() {
        let mut rng = seed::stream(1, &[]);
        assert!(matches!(sample_transform(&mut rng, 0.5), Err(FlatError::Config { .. })));
        assert!(matches!(sample_transform(&mut rng, -0.1), Err(FlatError::Config { .. })));
    }

    #[test]
    fn monte_carlo_offsets_are_bounded_and_centred() {
        let mut rng = seed::stream(11, &[]);
        let mut sums = [0.0f64; 8];
        let n = 10_000;
        for _ in 0..n {
            let t = sample_transform(&mut rng, 0.25).unwrap();
            for (s, o) in sums.iter_mut().zip(t.corner_offsets()) {
                assert!((-0.25..=0.25).contains(&o));
                *s += o as f64;
            }
        }
        for s in sums {
            assert!((s / n as f64).abs() < 0.01);
        }
    }

    #[test]
    fn uniform_offset_gives_pure_translation() {
        let t = ProjectiveTransform::from_offsets(&[0.1, 0.0, 0.1, 0.0, 0.1, 0.0, 0.1, 0.0], 0.25).unwrap();
        let h = corners_to_homography(&t, 20, 10).unwrap().rows();
        let want = [[1.0, 0.0, 2.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for r in 0..3 {
            for c in 0..3 {
                assert!((h[r][c] - want[r][c]).abs() < 1e-6, "{h:?}");
            }
        }
    }

    #[test]
    fn homography_maps_corners_to_targets() {
        let mut rng = seed::stream(5, &[]);
        for _ in 0..200 {
            let t = sample_transform(&mut rng, 0.45).unwrap();
            let h = corners_to_homography(&t, 32, 24).unwrap();
            for (s, d) in source_corners(32, 24).iter().zip(displaced_corners(&t, 32, 24)) {
                let (x, y) = h.apply(s.0, s.1);
                assert!((x - d.0).abs() < 1e-4 && (y - d.1).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn tiny_images_are_rejected() {
        assert!(corners_to_homography(&ProjectiveTransform::identity(), 1, 5).is_err());
    }

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(&[c, h, w], (0..c * h * w).map(|i| 1.0 + i as f32).collect()).unwrap()
    }

    #[test]
    fn identity_warp_is_bitwise() {
        let img = Tensor::new(&[3, 7, 5], (0..105).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        assert_eq!(warp_image(&img, &Homography::identity()).unwrap(), img);
    }

    #[test]
    fn integer_translation_shifts_columns() {
        let img = ramp(1, 4, 4);
        let out = warp_image(&img, &Homography::translation(1.0, 0.0)).unwrap();
        for y in 0..4 {
            assert_eq!(out.data()[y * 4], 0.0);
            for x in 1..4 {
                assert_eq!(out.data()[y * 4 + x], img.data()[y * 4 + x - 1]);
            }
        }
    }

    #[test]
    fn everything_off_image_is_zero() {
        let img = ramp(2, 6, 6);
        let out = warp_image(&img, &Homography::translation(100.0, -50.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singular_homography_is_rejected() {
        let h = Homography::from_rows([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(warp_image(&ramp(1, 3, 3), &h), Err(FlatError::DegenerateTransform(_))));
    }

    #[test]
    fn target_examples() {
        assert_eq!(transform_target(&ProjectiveTransform::identity()).data(), &[0.0; 8]);
        let t = ProjectiveTransform::from_offsets(&[0.2; 8], 0.2).unwrap();
        assert_eq!(transform_target(&t).data(), &[1.0; 8]);
    }

    proptest! {
        #[test]
        fn warp_preserves_value_range(
            pix in prop::collection::vec(0.0f32..1.0, 2 * 8 * 8),
            s in any::<u64>(),
        ) {
            let img = Tensor::new(&[2, 8, 8], pix.clone()).unwrap();
            let t = sample_transform(&mut seed::stream(s, &[]), 0.3).unwrap();
            let h = corners_to_homography(&t, 8, 8).unwrap();
            let out = warp_image(&img, &h).unwrap();
            let hi = pix.iter().cloned().fold(0.0f32, f32::max);
            prop_assert!(out.data().iter().all(|&v| (0.0..=hi).contains(&v)));
        }

        #[test]
        fn target_round_trip_is_exact(s in any::<u64>(), mag in 0.01f32..0.49) {
            let t = sample_transform(&mut seed::stream(s, &[]), mag).unwrap();
            let target = t.target();
            prop_assert!(target.iter().all(|v| (-1.0..=1.0).contains(v)));
            let back = ProjectiveTransform::from_target(&target, mag);
            prop_assert_eq!(back.corner_offsets(), t.corner_offsets());
        }
    }
}
