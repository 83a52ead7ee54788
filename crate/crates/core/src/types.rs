//! Geometric and scene data types shared across the crate.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Tolerance on the quaternion norm accepted by validation.
pub const QUAT_NORM_TOL: f64 = 1e-6;
/// Tolerance on camera rotation orthonormality.
pub const ROTATION_TOL: f64 = 1e-5;
pub const MAX_SH_DEGREE: usize = 3;

pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// One anisotropic 3D Gaussian.
///
/// Rotation is a unit quaternion `(w, x, y, z)` with Hamilton product;
/// scales are linear (not log) world units.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: [f64; 3],
    pub rot: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub sh_coeffs: Vec<[f64; 3]>,
}

impl GaussianPrimitive {
    /// An isotropic Gaussian with a flat degree-0 color.
    pub fn isotropic(mu: [f64; 3], scale: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        GaussianPrimitive {
            mu,
            rot: [1.0, 0.0, 0.0, 0.0],
            scale: [scale; 3],
            opacity,
            sh_coeffs: vec![crate::sh::rgb_to_dc(rgb)],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.rot)
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn quat_norm(q: [f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// World-space covariance `R diag(s)^2 R^T` of a Gaussian.
pub fn covariance_of(g: &GaussianPrimitive) -> Result<Matrix3<f64>> {
    let n = quat_norm(g.rot);
    ensure!(
        (n - 1.0).abs() <= QUAT_NORM_TOL,
        "quaternion norm {n} is not 1 within {QUAT_NORM_TOL}"
    );
    let r = g.rotation_matrix();
    let s2 = Matrix3::from_diagonal(&Vector3::new(g.scale[0].powi(2), g.scale[1].powi(2), g.scale[2].powi(2)));
    Ok(r * s2 * r.transpose())
}

/// A renderable set of Gaussians with per-Gaussian provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<GaussianPrimitive>,
    /// Index of the input view each Gaussian was predicted from.
    pub source_view: Vec<usize>,
    /// Non-negative merge weight for each Gaussian.
    pub confidence: Vec<f64>,
    pub sh_degree: usize,
}

/// One failed invariant found by [`validate_scene`].
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub index: Option<usize>,
    pub field: &'static str,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.index {
            Some(i) => write!(f, "gaussian {i}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

impl GaussianScene {
    pub fn new(sh_degree: usize) -> Self {
        GaussianScene {
            gaussians: Vec::new(),
            source_view: Vec::new(),
            confidence: Vec::new(),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: GaussianPrimitive, source_view: usize, confidence: f64) {
        self.gaussians.push(g);
        self.source_view.push(source_view);
        self.confidence.push(confidence);
    }

    /// Flattened per-field arrays, in the order used by the renderer.
    pub fn means(&self) -> Vec<f64> {
        self.gaussians.iter().flat_map(|g| g.mu).collect()
    }

    pub fn rotations(&self) -> Vec<f64> {
        self.gaussians.iter().flat_map(|g| g.rot).collect()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.gaussians.iter().flat_map(|g| g.scale).collect()
    }

    pub fn opacities(&self) -> Vec<f64> {
        self.gaussians.iter().map(|g| g.opacity).collect()
    }

    pub fn sh(&self) -> Vec<f64> {
        self.gaussians
            .iter()
            .flat_map(|g| g.sh_coeffs.iter().flat_map(|c| *c))
            .collect()
    }

    /// Rounds every stored value to `f32` precision.
    pub fn round_to_f32(&mut self) {
        let r = |v: &mut f64| *v = *v as f32 as f64;
        for g in &mut self.gaussians {
            g.mu.iter_mut().for_each(r);
            g.rot.iter_mut().for_each(r);
            g.scale.iter_mut().for_each(r);
            r(&mut g.opacity);
            g.sh_coeffs.iter_mut().flat_map(|c| c.iter_mut()).for_each(r);
        }
        self.confidence.iter_mut().for_each(r);
    }
}

/// Reports every violated invariant of `s`; empty iff the scene is valid.
pub fn validate_scene(s: &GaussianScene) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = s.gaussians.len();
    if s.sh_degree > MAX_SH_DEGREE {
        out.push(Violation {
            index: None,
            field: "sh_degree",
            message: format!("degree {} exceeds {MAX_SH_DEGREE}", s.sh_degree),
        });
    }
    if s.source_view.len() != n {
        out.push(Violation {
            index: None,
            field: "source_view",
            message: format!("length {} != {n} gaussians", s.source_view.len()),
        });
    }
    if s.confidence.len() != n {
        out.push(Violation {
            index: None,
            field: "confidence",
            message: format!("length {} != {n} gaussians", s.confidence.len()),
        });
    }
    for (i, c) in s.confidence.iter().enumerate() {
        if !c.is_finite() || *c < 0.0 {
            out.push(Violation {
                index: Some(i),
                field: "confidence",
                message: format!("{c} is not finite and non-negative"),
            });
        }
    }
    let k = sh_coeff_count(s.sh_degree);
    for (i, g) in s.gaussians.iter().enumerate() {
        let mut bad = |field: &'static str, message: String| {
            out.push(Violation { index: Some(i), field, message })
        };
        if !g.mu.iter().all(|v| v.is_finite()) {
            bad("mu", format!("{:?} is not finite", g.mu));
        }
        let qn = quat_norm(g.rot);
        if !qn.is_finite() || (qn - 1.0).abs() > QUAT_NORM_TOL {
            bad("rot", format!("quaternion norm {qn} is not 1"));
        }
        if !g.scale.iter().all(|v| v.is_finite() && *v > 0.0) {
            bad("scale", format!("{:?} is not strictly positive", g.scale));
        }
        if !(0.0..=1.0).contains(&g.opacity) {
            bad("opacity", format!("{} is outside [0, 1]", g.opacity));
        }
        if g.sh_coeffs.len() != k {
            bad("sh_coeffs", format!("length {} != {k} for degree {}", g.sh_coeffs.len(), s.sh_degree));
        } else if !g.sh_coeffs.iter().flatten().all(|v| v.is_finite()) {
            bad("sh_coeffs", "non-finite coefficient".to_string());
        }
    }
    out
}

/// Pinhole camera with a rigid world-to-camera transform.
///
/// Pixel `(col, row)` is addressed by its centre at integer coordinates
/// `(u, v) = (col, row)`; camera space looks down `+z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4 rigid transform.
    pub world_to_camera: [f64; 16],
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    /// Camera at `eye` looking at `target`, with image-up roughly along
    /// world `up` (image rows grow downward).
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_y_deg: f64, width: usize, height: usize) -> Self {
        let eye = Vector3::from(eye);
        let fwd = (Vector3::from(target) - eye).normalize();
        let right = fwd.cross(&Vector3::from(up)).normalize();
        let down = fwd.cross(&right);
        // rows of R are the camera axes expressed in world coordinates
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let t = -(r * eye);
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Self::from_rt(&r, &t, f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_rt(r: &Matrix3<f64>, t: &Vector3<f64>, fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        let mut m = [0.0; 16];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 4 + j] = r[(i, j)];
            }
            m[i * 4 + 3] = t[i];
        }
        m[15] = 1.0;
        CameraModel { fx, fy, cx, cy, world_to_camera: m, width, height }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.world_to_camera;
        Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10])
    }

    pub fn translation(&self) -> Vector3<f64> {
        let m = &self.world_to_camera;
        Vector3::new(m[3], m[7], m[11])
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.world_to_camera)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// `(u, v, z_cam)` of a world point.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let c = self.to_camera(p);
        (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z)
    }

    /// World-space ray through pixel `(u, v)` scaled to unit camera depth,
    /// so the point at depth `d` is `center + d * ray`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let dir_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.rotation().transpose() * dir_cam
    }

    /// World point at camera depth `depth` behind pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.center() + self.ray(u, v) * depth
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.fx > 0.0 && self.fy > 0.0, "focal lengths must be positive, got {} {}", self.fx, self.fy);
        ensure!(self.width > 0 && self.height > 0, "image size must be positive");
        ensure!(self.world_to_camera.iter().all(|v| v.is_finite()), "non-finite camera pose");
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        ensure!(err <= ROTATION_TOL, "rotation block not orthonormal (error {err})");
        let m = &self.world_to_camera;
        ensure!(
            m[12] == 0.0 && m[13] == 0.0 && m[14] == 0.0 && m[15] == 1.0,
            "bottom row of world_to_camera must be [0, 0, 0, 1]"
        );
        Ok(())
    }
}

/// An `H x W x 3` RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape([height, width, 3], pixels.len()));
        }
        ensure!(pixels.iter().all(|v| v.is_finite()), "image contains non-finite values");
        Ok(ImageTensor { width, height, pixels })
    }

    pub fn constant(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        ImageTensor { width, height, pixels }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(x, y));
            }
        }
        ImageTensor { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 3], self.pixels.clone())
    }

    /// Clamps into `[0, 1]` on the way in.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape("[H, W, 3]", s));
        }
        Self::new(s[1], s[0], t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.pixels.chunks(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        m.map(|v| v / n)
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bilinear resize, sampling at pixel centres.
    pub fn resize(&self, width: usize, height: usize) -> ImageTensor {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        ImageTensor::from_fn(width, height, |x, y| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let mut out = [0.0; 3];
            for (c, o) in out.iter_mut().enumerate() {
                let p = |xx: usize, yy: usize| self.pixels[(yy * self.width + xx) * 3 + c];
                let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                let bot = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                *o = top * (1.0 - ty) + bot * ty;
            }
            out
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gauss(rot: [f64; 4], scale: [f64; 3]) -> GaussianPrimitive {
        GaussianPrimitive { mu: [0.0; 3], rot, scale, opacity: 0.5, sh_coeffs: vec![[0.0; 3]] }
    }

    #[test]
    fn covariance_identity_and_axis_aligned() {
        let c = covariance_of(&gauss([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0])).unwrap();
        assert_eq!(c, Matrix3::identity());
        let c = covariance_of(&gauss([1.0, 0.0, 0.0, 0.0], [2.0, 1.0, 1.0])).unwrap();
        assert_eq!(c, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
    }

    #[test]
    fn covariance_quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = covariance_of(&gauss([h, 0.0, 0.0, h], [2.0, 1.0, 1.0])).unwrap();
        // independent route: compose the z-rotation by its angle
        let a = std::f64::consts::FRAC_PI_2;
        let rz = Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0);
        let expect = rz * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * rz.transpose();
        assert!((c - expect).abs().max() < 1e-12);
        assert!((c - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn covariance_rejects_non_unit_quaternion() {
        assert!(covariance_of(&gauss([1.0, 0.1, 0.0, 0.0], [1.0; 3])).is_err());
    }

    #[test]
    fn validate_reports_each_field() {
        assert!(validate_scene(&GaussianScene::new(0)).is_empty());
        let mut s = GaussianScene::new(0);
        let mut g = gauss([1.0, 0.0, 0.0, 0.0], [1.0; 3]);
        g.opacity = 1.2;
        s.push(g, 0, 1.0);
        let v = validate_scene(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "opacity");
        assert_eq!(v[0].index, Some(0));
    }

    #[test]
    fn look_at_is_valid_and_projects_target_to_centre() {
        let cam = CameraModel::look_at([3.0, 1.0, 2.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 60.0, 64, 48);
        cam.validate().unwrap();
        let (u, v, z) = cam.project(&Vector3::zeros());
        assert!((u - 32.0).abs() < 1e-12 && (v - 24.0).abs() < 1e-12 && z > 0.0);
        let p = cam.unproject(10.0, 7.0, 2.5);
        let (u2, v2, z2) = cam.project(&p);
        assert!((u2 - 10.0).abs() < 1e-9 && (v2 - 7.0).abs() < 1e-9 && (z2 - 2.5).abs() < 1e-9);
    }

    fn arb_quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter_map("nonzero", |q| {
            let n = quat_norm(q);
            (n > 1e-3).then(|| q.map(|v| v / n))
        })
    }

    proptest! {
        #[test]
        fn covariance_symmetric_with_squared_scale_spectrum(q in arb_quat(), s in prop::array::uniform3(0.05f64..3.0)) {
            let c = covariance_of(&gauss(q, s)).unwrap();
            prop_assert!((c - c.transpose()).abs().max() < 1e-9);
            let mut ev: Vec<f64> = c.symmetric_eigenvalues().iter().cloned().collect();
            ev.sort_by(f64::total_cmp);
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            want.sort_by(f64::total_cmp);
            for (a, b) in ev.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-6, "{ev:?} vs {want:?}");
            }
        }
    }
}
