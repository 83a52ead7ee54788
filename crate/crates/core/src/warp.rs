//! Fixed bilinear sampling maps for resizing and perspective crops.
//!
//! Maps are built once and applied with [`Var::resample`], so gradients flow
//! back to the source pixels.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;

use crate::autograd::SparseMap;
use crate::error::{ensure, Result};

/// Bilinear weights for sampling `(x, y)` from a `w x h` image, clamped to
/// the border. Pixel centres sit at integer coordinates.
fn bilinear(w: usize, h: usize, x: f64, y: f64) -> Vec<(usize, f64)> {
    let fx = x.clamp(0.0, (w - 1) as f64);
    let fy = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
    for (i, wt) in [
        (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * w + x1, tx * (1.0 - ty)),
        (y1 * w + x0, (1.0 - tx) * ty),
        (y1 * w + x1, tx * ty),
    ] {
        if wt == 0.0 {
            continue;
        }
        match row.iter_mut().find(|(j, _)| *j == i) {
            Some(e) => e.1 += wt,
            None => row.push((i, wt)),
        }
    }
    row
}

/// Samples arbitrary points from a `w x h` image.
pub fn sample_map(w: usize, h: usize, points: &[(f64, f64)]) -> SparseMap {
    SparseMap { n_in: w * h, n_out: points.len(), rows: points.iter().map(|&(x, y)| bilinear(w, h, x, y)).collect() }
}

/// Same sampling grid as [`crate::ImageTensor::resize`].
pub fn resize_map(w_in: usize, h_in: usize, w_out: usize, h_out: usize) -> SparseMap {
    let sx = w_in as f64 / w_out as f64;
    let sy = h_in as f64 / h_out as f64;
    let pts: Vec<(f64, f64)> = (0..h_out)
        .flat_map(|y| (0..w_out).map(move |x| ((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)))
        .collect();
    sample_map(w_in, h_in, &pts)
}

/// Homography taking the four `src` corners onto `dst`.
pub fn homography(src: [(f64, f64); 4], dst: [(f64, f64); 4]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (k, (&(x, y), &(u, v))) in src.iter().zip(&dst).enumerate() {
        let r = 2 * k;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

pub fn apply_homography(m: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let p = m * Vector3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z)
}

/// A square crop whose corners may be jittered into a general quad.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crop {
    /// Source-image corners in order top-left, top-right, bottom-right,
    /// bottom-left.
    pub corners: [(f64, f64); 4],
    pub size: usize,
}

impl Crop {
    pub fn axis_aligned(x0: f64, y0: f64, size: usize) -> Self {
        let s = (size - 1) as f64;
        Crop { corners: [(x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s)], size }
    }

    /// Random position; each corner moves by up to `jitter * size` per axis.
    pub fn random(w: usize, h: usize, size: usize, jitter: f64, rng: &mut impl Rng) -> Result<Self> {
        ensure!(size >= 2 && size <= w && size <= h, "crop size {size} does not fit a {w}x{h} image");
        let x0 = rng.random_range(0..=w - size) as f64;
        let y0 = rng.random_range(0..=h - size) as f64;
        let mut c = Self::axis_aligned(x0, y0, size);
        if jitter > 0.0 {
            let j = jitter * size as f64;
            for p in &mut c.corners {
                p.0 += rng.random_range(-j..=j);
                p.1 += rng.random_range(-j..=j);
            }
        }
        Ok(c)
    }

    /// Exact pixel copy when the crop is an unwarped, integer-aligned square.
    fn integer_origin(&self) -> Option<(f64, f64)> {
        let (x0, y0) = self.corners[0];
        (x0.fract() == 0.0 && y0.fract() == 0.0 && *self == Self::axis_aligned(x0, y0, self.size)).then_some((x0, y0))
    }

    pub fn map(&self, w: usize, h: usize) -> SparseMap {
        if let Some((x0, y0)) = self.integer_origin() {
            let pts: Vec<(f64, f64)> = (0..self.size)
                .flat_map(|y| (0..self.size).map(move |x| (x0 + x as f64, y0 + y as f64)))
                .collect();
            return sample_map(w, h, &pts);
        }
        let s = (self.size - 1) as f64;
        let unit = [(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)];
        let m = homography(unit, self.corners).expect("crop corners form a proper quad");
        let pts: Vec<(f64, f64)> = (0..self.size)
            .flat_map(|y| (0..self.size).map(move |x| (x as f64, y as f64)))
            .map(|(x, y)| apply_homography(&m, x, y))
            .collect();
        sample_map(w, h, &pts)
    }
}
