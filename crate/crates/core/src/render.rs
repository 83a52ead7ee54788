//! Differentiable Gaussian splat rasterizer.
//!
//! Every Gaussian is projected with the local-affine (EWA) approximation,
//! sorted once by camera depth and alpha-composited front to back. The
//! backward pass is analytic: it walks the sorted list back to front,
//! recovering each transmittance by division, and chains through the conic,
//! the projection Jacobian, the covariance factorisation and the quaternion.

use std::rc::Rc;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::autograd::{gradcheck, GradCheck, Tape, Var};
use crate::error::{Error, Result};
use crate::sh;
use crate::tensor::Tensor;
use crate::types::{quat_to_matrix, sh_coeff_count, validate_scene, CameraModel, GaussianScene, ImageTensor};

pub const ALPHA_MAX: f64 = 0.99;
pub const DEFAULT_DILATION: f64 = 0.3;
/// Added to accumulated alpha before normalizing depth.
pub const DEPTH_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Per-splat alphas below this are skipped; `0` renders every splat
    /// over the full image (used for gradient checks).
    pub alpha_min: f64,
    /// Gaussians with camera depth below this are culled.
    pub near: f64,
    /// Added to the diagonal of every projected covariance, in pixels².
    pub dilation: f64,
}

impl RenderSettings {
    pub fn new(background: [f64; 3]) -> Self {
        RenderSettings { background, alpha_min: 1.0 / 255.0, near: 0.01, dilation: DEFAULT_DILATION }
    }

    /// No alpha cutoff: every splat touches every pixel.
    pub fn exact(background: [f64; 3]) -> Self {
        RenderSettings { alpha_min: 0.0, ..Self::new(background) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: ImageTensor,
    /// Row-major `H x W` expected camera depth; 0 where nothing was hit.
    pub depth: Vec<f64>,
    /// Row-major `H x W` accumulated opacity.
    pub alpha: Vec<f64>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    fn from_packed(packed: &[f64], w: usize, h: usize) -> Self {
        let mut rgb = Vec::with_capacity(w * h * 3);
        let mut depth = Vec::with_capacity(w * h);
        let mut alpha = Vec::with_capacity(w * h);
        for px in packed.chunks(5) {
            rgb.extend_from_slice(&px[..3]);
            depth.push(px[3] / (px[4] + DEPTH_EPS));
            alpha.push(px[4]);
        }
        RenderOutput { color: ImageTensor::new(w, h, rgb).expect("renderer output is finite"), depth, alpha }
    }
}

/// Per-field flat arrays in renderer order.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTensors {
    /// `[N, 3]`
    pub mu: Tensor,
    /// `[N, 4]`, `(w, x, y, z)`; normalized inside the renderer.
    pub rot: Tensor,
    /// `[N, 3]`, linear scales.
    pub scale: Tensor,
    /// `[N]`
    pub opacity: Tensor,
    /// `[N, K, 3]`
    pub sh: Tensor,
    pub sh_degree: usize,
}

impl SceneTensors {
    pub fn from_scene(s: &GaussianScene) -> Self {
        let n = s.len();
        SceneTensors {
            mu: Tensor::new(&[n, 3], s.means()),
            rot: Tensor::new(&[n, 4], s.rotations()),
            scale: Tensor::new(&[n, 3], s.scales()),
            opacity: Tensor::new(&[n], s.opacities()),
            sh: Tensor::new(&[n, sh_coeff_count(s.sh_degree), 3], s.sh()),
            sh_degree: s.sh_degree,
        }
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        vec![self.mu, self.rot, self.scale, self.opacity, self.sh]
    }

    pub fn vars<'t>(&self, tape: &'t Tape) -> SplatVars<'t> {
        SplatVars {
            mu: tape.constant(self.mu.clone()),
            rot: tape.constant(self.rot.clone()),
            scale: tape.constant(self.scale.clone()),
            opacity: tape.constant(self.opacity.clone()),
            sh: tape.constant(self.sh.clone()),
        }
    }
}

/// Tape variables for the five Gaussian fields.
#[derive(Clone, Copy, Debug)]
pub struct SplatVars<'t> {
    pub mu: Var<'t>,
    pub rot: Var<'t>,
    pub scale: Var<'t>,
    pub opacity: Var<'t>,
    pub sh: Var<'t>,
}

/// Views into a packed `[H*W, 5]` render (rgb, depth·alpha, alpha).
#[derive(Clone, Copy, Debug)]
pub struct RenderVars<'t> {
    /// `[H, W, 3]`
    pub color: Var<'t>,
    /// `[H*W, 1]`
    pub alpha: Var<'t>,
    /// `[H*W, 1]`, alpha-normalized.
    pub depth: Var<'t>,
}

pub fn unpack<'t>(packed: Var<'t>, width: usize, height: usize) -> RenderVars<'t> {
    let color = packed.slice(1, 0, 3).reshape(&[height, width, 3]);
    let alpha = packed.slice(1, 4, 1);
    let depth = packed.slice(1, 3, 1).div(alpha.add_scalar(DEPTH_EPS));
    RenderVars { color, alpha, depth }
}

#[derive(Clone, Copy)]
struct Fields<'a> {
    n: usize,
    degree: usize,
    mu: &'a [f64],
    rot: &'a [f64],
    scale: &'a [f64],
    opacity: &'a [f64],
    sh: &'a [f64],
}

impl Fields<'_> {
    fn coeffs(&self, i: usize) -> Vec<[f64; 3]> {
        let k = sh_coeff_count(self.degree);
        (0..k)
            .map(|j| {
                let b = (i * k + j) * 3;
                [self.sh[b], self.sh[b + 1], self.sh[b + 2]]
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Splat {
    idx: usize,
    t: Vector3<f64>,
    u: f64,
    v: f64,
    conic: Matrix2<f64>,
    color: [f64; 3],
    active: [bool; 3],
    opacity: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    qhat: [f64; 4],
    qnorm: f64,
    r: Matrix3<f64>,
    jw: Matrix2x3<f64>,
    sigma: Matrix3<f64>,
    dir: Vector3<f64>,
    dist: f64,
}

struct Hit {
    alpha: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

impl Splat {
    #[inline]
    fn hit(&self, x: usize, y: usize, alpha_min: f64) -> Option<Hit> {
        let dx = x as f64 - self.u;
        let dy = y as f64 - self.v;
        let c = &self.conic;
        let q = c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy;
        let gauss = (-0.5 * q).exp();
        let raw = self.opacity * gauss;
        let clamped = raw > ALPHA_MAX;
        let alpha = if clamped { ALPHA_MAX } else { raw };
        if alpha < alpha_min || alpha <= 0.0 {
            return None;
        }
        Some(Hit { alpha, gauss, dx, dy, clamped })
    }
}

fn preprocess(f: &Fields<'_>, cam: &CameraModel, s: &RenderSettings) -> Vec<Splat> {
    let w = cam.rotation();
    let tw = cam.translation();
    let centre = cam.center();
    let (wd, ht) = (cam.width, cam.height);
    let mut out = Vec::new();
    for i in 0..f.n {
        let op = f.opacity[i];
        if op <= 0.0 || (s.alpha_min > 0.0 && op < s.alpha_min) {
            continue;
        }
        let mu = Vector3::new(f.mu[3 * i], f.mu[3 * i + 1], f.mu[3 * i + 2]);
        let t = w * mu + tw;
        if t.z < s.near {
            continue;
        }
        let q = [f.rot[4 * i], f.rot[4 * i + 1], f.rot[4 * i + 2], f.rot[4 * i + 3]];
        let qnorm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let qhat = q.map(|v| v / qnorm);
        let r = quat_to_matrix(qhat);
        let sc = Vector3::new(f.scale[3 * i], f.scale[3 * i + 1], f.scale[3 * i + 2]);
        let m = r * Matrix3::from_diagonal(&sc);
        let sigma = m * m.transpose();
        let (tz, tz2) = (t.z, t.z * t.z);
        let j = Matrix2x3::new(cam.fx / tz, 0.0, -cam.fx * t.x / tz2, 0.0, cam.fy / tz, -cam.fy * t.y / tz2);
        let jw = j * w;
        let mut cov2 = jw * sigma * jw.transpose();
        cov2[(0, 0)] += s.dilation;
        cov2[(1, 1)] += s.dilation;
        let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
        if det <= 0.0 || !det.is_finite() {
            continue;
        }
        let conic = Matrix2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(1, 0)], cov2[(0, 0)]) / det;
        let u = cam.fx * t.x / tz + cam.cx;
        let v = cam.fy * t.y / tz + cam.cy;
        let (x0, x1, y0, y1) = if s.alpha_min > 0.0 {
            let qmax = 2.0 * (op / s.alpha_min).ln();
            let rx = (qmax * cov2[(0, 0)]).sqrt();
            let ry = (qmax * cov2[(1, 1)]).sqrt();
            let lo = |c: f64, r: f64| (c - r).ceil().max(0.0);
            let hi = |c: f64, r: f64, n: usize| (c + r).floor().min(n as f64 - 1.0);
            let (xa, xb, ya, yb) = (lo(u, rx), hi(u, rx, wd), lo(v, ry), hi(v, ry, ht));
            if !(xa <= xb && ya <= yb) {
                continue;
            }
            (xa as usize, xb as usize, ya as usize, yb as usize)
        } else {
            (0, wd - 1, 0, ht - 1)
        };
        let off = mu - centre;
        let dist = off.norm();
        let dir = if dist > 0.0 { off / dist } else { Vector3::z() };
        let raw = sh::eval(f.degree, &f.coeffs(i), [dir.x, dir.y, dir.z]);
        let active = raw.map(|c| c + 0.5 > 0.0);
        let color = raw.map(|c| (c + 0.5).max(0.0));
        out.push(Splat {
            idx: i,
            t,
            u,
            v,
            conic,
            color,
            active,
            opacity: op,
            x0,
            x1,
            y0,
            y1,
            qhat,
            qnorm,
            r,
            jw,
            sigma,
            dir,
            dist,
        });
    }
    // stable: equal depths keep input order
    out.sort_by(|a, b| a.t.z.total_cmp(&b.t.z).then(a.idx.cmp(&b.idx)));
    out
}

/// Returns the packed `[H*W, 5]` buffer and final transmittance.
fn raster(splats: &[Splat], w: usize, h: usize, s: &RenderSettings) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; w * h * 5];
    let mut trans = vec![1.0; w * h];
    for sp in splats {
        for y in sp.y0..=sp.y1 {
            for x in sp.x0..=sp.x1 {
                let Some(hit) = sp.hit(x, y, s.alpha_min) else { continue };
                let p = y * w + x;
                let wgt = hit.alpha * trans[p];
                let o = &mut out[p * 5..p * 5 + 5];
                for c in 0..3 {
                    o[c] += wgt * sp.color[c];
                }
                o[3] += wgt * sp.t.z;
                o[4] += wgt;
                trans[p] *= 1.0 - hit.alpha;
            }
        }
    }
    for (p, t) in trans.iter().enumerate() {
        for c in 0..3 {
            out[p * 5 + c] += t * s.background[c];
        }
    }
    (out, trans)
}

#[derive(Clone, Debug, Default)]
struct SplatGrad {
    u: f64,
    v: f64,
    /// Gradient w.r.t. the conic entries, off-diagonal counted once per slot.
    conic: [f64; 3],
    color: [f64; 3],
    z: f64,
    opacity: f64,
}

fn raster_backward(splats: &[Splat], w: usize, h: usize, trans_final: &[f64], grad: &[f64], s: &RenderSettings) -> Vec<SplatGrad> {
    let mut tcur = trans_final.to_vec();
    let mut suffix = vec![0.0; w * h * 5];
    for (p, t) in trans_final.iter().enumerate() {
        for c in 0..3 {
            suffix[p * 5 + c] = t * s.background[c];
        }
    }
    let mut grads = vec![SplatGrad::default(); splats.len()];
    for (k, sp) in splats.iter().enumerate().rev() {
        let sg = &mut grads[k];
        for y in sp.y0..=sp.y1 {
            for x in sp.x0..=sp.x1 {
                let Some(hit) = sp.hit(x, y, s.alpha_min) else { continue };
                let p = y * w + x;
                let a = hit.alpha;
                let inv = 1.0 / (1.0 - a);
                let ti = tcur[p] * inv;
                let wgt = a * ti;
                let g = &grad[p * 5..p * 5 + 5];
                let suf = &mut suffix[p * 5..p * 5 + 5];
                let mut dalpha = 0.0;
                for c in 0..3 {
                    sg.color[c] += g[c] * wgt;
                    dalpha += g[c] * (ti * sp.color[c] - suf[c] * inv);
                }
                sg.z += g[3] * wgt;
                dalpha += g[3] * (ti * sp.t.z - suf[3] * inv);
                dalpha += g[4] * (ti - suf[4] * inv);
                for c in 0..3 {
                    suf[c] += wgt * sp.color[c];
                }
                suf[3] += wgt * sp.t.z;
                suf[4] += wgt;
                tcur[p] = ti;
                if hit.clamped {
                    continue;
                }
                sg.opacity += dalpha * hit.gauss;
                let dq = -0.5 * a * dalpha;
                let c = &sp.conic;
                sg.u += dq * -2.0 * (c[(0, 0)] * hit.dx + c[(0, 1)] * hit.dy);
                sg.v += dq * -2.0 * (c[(0, 1)] * hit.dx + c[(1, 1)] * hit.dy);
                sg.conic[0] += dq * hit.dx * hit.dx;
                sg.conic[1] += dq * hit.dx * hit.dy;
                sg.conic[2] += dq * hit.dy * hit.dy;
            }
        }
    }
    grads
}

struct ParamGrads {
    mu: Vec<f64>,
    rot: Vec<f64>,
    scale: Vec<f64>,
    opacity: Vec<f64>,
    sh: Vec<f64>,
}

fn splat_backward(splats: &[Splat], sgrads: &[SplatGrad], f: &Fields<'_>, cam: &CameraModel) -> ParamGrads {
    let k = sh_coeff_count(f.degree);
    let mut out = ParamGrads {
        mu: vec![0.0; f.n * 3],
        rot: vec![0.0; f.n * 4],
        scale: vec![0.0; f.n * 3],
        opacity: vec![0.0; f.n],
        sh: vec![0.0; f.n * k * 3],
    };
    let w = cam.rotation();
    for (sp, sg) in splats.iter().zip(sgrads) {
        let i = sp.idx;
        out.opacity[i] = sg.opacity;

        // colour -> sh coefficients and view direction
        let dcol = [0, 1, 2].map(|c| if sp.active[c] { sg.color[c] } else { 0.0 });
        let d = [sp.dir.x, sp.dir.y, sp.dir.z];
        let basis = sh::basis(f.degree, d);
        for (j, b) in basis.iter().enumerate() {
            for c in 0..3 {
                out.sh[(i * k + j) * 3 + c] = dcol[c] * b;
            }
        }
        let mut dmu = Vector3::zeros();
        if f.degree > 0 {
            let coeffs = f.coeffs(i);
            let jac = sh::basis_jacobian(f.degree, d);
            let mut dn = Vector3::zeros();
            for (cf, jk) in coeffs.iter().zip(&jac) {
                let s: f64 = (0..3).map(|c| dcol[c] * cf[c]).sum();
                dn += Vector3::new(jk[0], jk[1], jk[2]) * s;
            }
            dmu += (dn - sp.dir * sp.dir.dot(&dn)) / sp.dist;
        }

        // conic -> 2D covariance -> (J W) and world covariance
        let gm = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
        let gcov2 = -(sp.conic * gm * sp.conic);
        let gsigma = sp.jw.transpose() * gcov2 * sp.jw;
        let gjw = 2.0 * gcov2 * sp.jw * sp.sigma;
        let gj = gjw * w.transpose();

        // projection Jacobian, pixel centre and depth -> camera-space t
        let t = sp.t;
        let (tz, tz2, tz3) = (t.z, t.z * t.z, t.z * t.z * t.z);
        let (fx, fy) = (cam.fx, cam.fy);
        let mut dt = Vector3::zeros();
        dt.z += gj[(0, 0)] * -fx / tz2;
        dt.x += gj[(0, 2)] * -fx / tz2;
        dt.z += gj[(0, 2)] * 2.0 * fx * t.x / tz3;
        dt.z += gj[(1, 1)] * -fy / tz2;
        dt.y += gj[(1, 2)] * -fy / tz2;
        dt.z += gj[(1, 2)] * 2.0 * fy * t.y / tz3;
        dt.x += sg.u * fx / tz;
        dt.z += sg.u * -fx * t.x / tz2;
        dt.y += sg.v * fy / tz;
        dt.z += sg.v * -fy * t.y / tz2;
        dt.z += sg.z;
        dmu += w.transpose() * dt;
        for a in 0..3 {
            out.mu[3 * i + a] = dmu[a];
        }

        // Sigma = (R S)(R S)^T
        let sc = Vector3::new(f.scale[3 * i], f.scale[3 * i + 1], f.scale[3 * i + 2]);
        let m = sp.r * Matrix3::from_diagonal(&sc);
        let gmat = 2.0 * gsigma * m;
        let mut gr = Matrix3::zeros();
        for a in 0..3 {
            for b in 0..3 {
                out.scale[3 * i + b] += gmat[(a, b)] * sp.r[(a, b)];
                gr[(a, b)] = gmat[(a, b)] * sc[b];
            }
        }

        // rotation matrix -> normalized quaternion -> raw quaternion
        let [qw, qx, qy, qz] = sp.qhat;
        let g = |a: usize, b: usize| gr[(a, b)];
        let dqhat = [
            2.0 * (-qz * g(0, 1) + qy * g(0, 2) + qz * g(1, 0) - qx * g(1, 2) - qy * g(2, 0) + qx * g(2, 1)),
            2.0 * (qy * g(0, 1) + qz * g(0, 2) + qy * g(1, 0) - 2.0 * qx * g(1, 1) - qw * g(1, 2) + qz * g(2, 0)
                + qw * g(2, 1)
                - 2.0 * qx * g(2, 2)),
            2.0 * (-2.0 * qy * g(0, 0) + qx * g(0, 1) + qw * g(0, 2) + qx * g(1, 0) + qz * g(1, 2) - qw * g(2, 0)
                + qz * g(2, 1)
                - 2.0 * qy * g(2, 2)),
            2.0 * (-2.0 * qz * g(0, 0) - qw * g(0, 1) + qx * g(0, 2) + qw * g(1, 0) - 2.0 * qz * g(1, 1)
                + qy * g(1, 2)
                + qx * g(2, 0)
                + qy * g(2, 1)),
        ];
        let proj: f64 = (0..4).map(|a| dqhat[a] * sp.qhat[a]).sum();
        for a in 0..4 {
            out.rot[4 * i + a] = (dqhat[a] - sp.qhat[a] * proj) / sp.qnorm;
        }
    }
    out
}

fn check_fields(shapes: [&[usize]; 5], degree: usize) -> Result<usize> {
    let n = shapes[0].first().copied().unwrap_or(0);
    let k = sh_coeff_count(degree);
    let want: [Vec<usize>; 5] = [vec![n, 3], vec![n, 4], vec![n, 3], vec![n], vec![n, k, 3]];
    for (s, w) in shapes.iter().zip(&want) {
        if *s != w.as_slice() {
            return Err(Error::shape(w, s));
        }
    }
    Ok(n)
}

/// Differentiable render; returns the packed `[H*W, 5]` buffer
/// (see [`unpack`]).
pub fn render_vars<'t>(tape: &'t Tape, v: &SplatVars<'t>, sh_degree: usize, cam: &CameraModel, s: &RenderSettings) -> Result<Var<'t>> {
    cam.validate()?;
    let vals = [v.mu.value(), v.rot.value(), v.scale.value(), v.opacity.value(), v.sh.value()];
    let n = check_fields([vals[0].shape(), vals[1].shape(), vals[2].shape(), vals[3].shape(), vals[4].shape()], sh_degree)?;
    let f = Fields {
        n,
        degree: sh_degree,
        mu: vals[0].data(),
        rot: vals[1].data(),
        scale: vals[2].data(),
        opacity: vals[3].data(),
        sh: vals[4].data(),
    };
    let splats = preprocess(&f, cam, s);
    let (w, h) = (cam.width, cam.height);
    let (packed, trans) = raster(&splats, w, h, s);
    if !tape.grad_enabled() {
        return Ok(tape.constant(Tensor::new(&[w * h, 5], packed)));
    }
    let state = Rc::new((splats, trans, vals, cam.clone(), s.clone()));
    let value = Tensor::new(&[w * h, 5], packed);
    Ok(tape.custom(&[v.mu, v.rot, v.scale, v.opacity, v.sh], value, move |g| {
        let (splats, trans, vals, cam, s) = &*state;
        let f = Fields {
            n,
            degree: sh_degree,
            mu: vals[0].data(),
            rot: vals[1].data(),
            scale: vals[2].data(),
            opacity: vals[3].data(),
            sh: vals[4].data(),
        };
        let sg = raster_backward(splats, cam.width, cam.height, trans, g.data(), s);
        let pg = splat_backward(splats, &sg, &f, cam);
        vec![
            Some(Tensor::new(vals[0].shape(), pg.mu)),
            Some(Tensor::new(vals[1].shape(), pg.rot)),
            Some(Tensor::new(vals[2].shape(), pg.scale)),
            Some(Tensor::new(vals[3].shape(), pg.opacity)),
            Some(Tensor::new(vals[4].shape(), pg.sh)),
        ]
    }))
}

/// Renders with the default settings over `background`.
pub fn render(scene: &GaussianScene, cam: &CameraModel, background: [f64; 3]) -> Result<RenderOutput> {
    render_with(scene, cam, &RenderSettings::new(background))
}

pub fn render_with(scene: &GaussianScene, cam: &CameraModel, s: &RenderSettings) -> Result<RenderOutput> {
    if let Some(v) = validate_scene(scene).first() {
        return Err(Error::Validation(format!("invalid scene: {v}")));
    }
    render_tensors(&SceneTensors::from_scene(scene), cam, s)
}

/// Non-differentiable render of raw field tensors.
pub fn render_tensors(t: &SceneTensors, cam: &CameraModel, s: &RenderSettings) -> Result<RenderOutput> {
    let tape = Tape::no_grad();
    let packed = render_vars(&tape, &t.vars(&tape), t.sh_degree, cam, s)?;
    Ok(RenderOutput::from_packed(packed.value().data(), cam.width, cam.height))
}

/// Compares analytic renderer gradients of `loss(render)` against central
/// differences (step `1e-4`) over all five Gaussian fields.
///
/// `loss` receives the packed `[H*W, 5]` render and must return a scalar.
pub fn render_gradcheck(
    scene: &GaussianScene,
    cam: &CameraModel,
    s: &RenderSettings,
    loss: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
) -> Result<GradCheck> {
    if let Some(v) = validate_scene(scene).first() {
        return Err(Error::Validation(format!("invalid scene: {v}")));
    }
    cam.validate()?;
    let deg = scene.sh_degree;
    let inputs = SceneTensors::from_scene(scene).into_vec();
    Ok(gradcheck(&inputs, 1e-4, |tape, v| {
        let sv = SplatVars { mu: v[0], rot: v[1], scale: v[2], opacity: v[3], sh: v[4] };
        let packed = render_vars(tape, &sv, deg, cam, s).expect("validated above");
        loss(tape, packed).output()
    }))
}

/// Mean squared error of the colour channels against `target`.
pub fn l2_to<'t>(tape: &'t Tape, packed: Var<'t>, target: &ImageTensor) -> Var<'t> {
    let n = target.width() * target.height();
    let t = tape.constant(Tensor::new(&[n, 3], target.pixels().to_vec()));
    packed.slice(1, 0, 3).sub(t).square().mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{covariance_of, GaussianPrimitive};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent per-pixel compositor: numeric projection Jacobian,
    /// nalgebra inverse, per-pixel sort.
    fn oracle(scene: &GaussianScene, cam: &CameraModel, s: &RenderSettings) -> Vec<[f64; 5]> {
        struct P {
            z: f64,
            idx: usize,
            mean: nalgebra::Vector2<f64>,
            inv: Matrix2<f64>,
            col: [f64; 3],
            op: f64,
        }
        let mut ps = Vec::new();
        for (idx, g) in scene.gaussians.iter().enumerate() {
            let mu = Vector3::from(g.mu);
            let tc = cam.to_camera(&mu);
            if tc.z < s.near || g.opacity <= 0.0 {
                continue;
            }
            let proj = |p: Vector3<f64>| nalgebra::Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
            let mut j = Matrix2x3::zeros();
            let h = 1e-6;
            for a in 0..3 {
                let mut e = Vector3::zeros();
                e[a] = h;
                let d = (proj(tc + e) - proj(tc - e)) / (2.0 * h);
                j.set_column(a, &d);
            }
            let t = j * cam.rotation();
            let cov = t * covariance_of(g).unwrap() * t.transpose() + Matrix2::identity() * s.dilation;
            let dir = (mu - cam.center()).normalize();
            ps.push(P {
                z: tc.z,
                idx,
                mean: proj(tc),
                inv: cov.try_inverse().unwrap(),
                col: sh::color(scene.sh_degree, &g.sh_coeffs, [dir.x, dir.y, dir.z]),
                op: g.opacity,
            });
        }
        let mut out = Vec::new();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let mut hits: Vec<(&P, f64)> = ps
                    .iter()
                    .filter_map(|p| {
                        let d = nalgebra::Vector2::new(x as f64, y as f64) - p.mean;
                        let a = (p.op * (-0.5 * (d.transpose() * p.inv * d)[(0, 0)]).exp()).min(ALPHA_MAX);
                        (a >= s.alpha_min && a > 0.0).then_some((p, a))
                    })
                    .collect();
                hits.sort_by(|a, b| a.0.z.partial_cmp(&b.0.z).unwrap().then(a.0.idx.cmp(&b.0.idx)));
                let mut acc = [0.0; 5];
                let mut tr = 1.0;
                for (p, a) in hits {
                    for c in 0..3 {
                        acc[c] += tr * a * p.col[c];
                    }
                    acc[3] += tr * a * p.z;
                    acc[4] += tr * a;
                    tr *= 1.0 - a;
                }
                for c in 0..3 {
                    acc[c] += tr * s.background[c];
                }
                out.push(acc);
            }
        }
        out
    }

    fn cam(w: usize, h: usize) -> CameraModel {
        CameraModel::look_at([0.0, -3.0, 0.5], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 50.0, w, h)
    }

    fn random_scene(seed: u64, n: usize, degree: usize) -> GaussianScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = GaussianScene::new(degree);
        for _ in 0..n {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let qn = crate::types::quat_norm(q);
            let g = GaussianPrimitive {
                mu: std::array::from_fn(|_| rng.random_range(-0.6..0.6)),
                rot: q.map(|v| v / qn),
                scale: std::array::from_fn(|_| rng.random_range(0.05..0.3)),
                opacity: rng.random_range(0.1..0.9),
                sh_coeffs: (0..sh_coeff_count(degree))
                    .map(|j| {
                        let amp = if j == 0 { 1.2 } else { 0.3 };
                        std::array::from_fn(|_| rng.random_range(-amp..amp))
                    })
                    .collect(),
            };
            s.push(g, 0, 1.0);
        }
        s
    }

    fn packed(scene: &GaussianScene, cam: &CameraModel, s: &RenderSettings) -> Vec<f64> {
        let tape = Tape::no_grad();
        let t = SceneTensors::from_scene(scene);
        render_vars(&tape, &t.vars(&tape), scene.sh_degree, cam, s).unwrap().value().data().to_vec()
    }

    fn max_diff_to_oracle(scene: &GaussianScene, cam: &CameraModel, s: &RenderSettings) -> f64 {
        let a = packed(scene, cam, s);
        let b = oracle(scene, cam, s);
        a.chunks(5).zip(&b).flat_map(|(x, y)| (0..5).map(move |c| (x[c] - y[c]).abs())).fold(0.0, f64::max)
    }

    #[test]
    fn empty_scene_is_background() {
        let out = render(&GaussianScene::new(0), &cam(8, 6), [0.0; 3]).unwrap();
        assert!(out.color.pixels().iter().all(|&v| v == 0.0));
        assert!(out.alpha.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn behind_camera_is_background() {
        let mut s = GaussianScene::new(0);
        s.push(GaussianPrimitive::isotropic([0.0, -5.0, 0.5], 0.3, 0.9, [1.0, 0.0, 0.0]), 0, 1.0);
        let out = render(&s, &cam(8, 6), [0.2, 0.3, 0.4]).unwrap();
        assert_eq!(out.color, ImageTensor::constant(8, 6, [0.2, 0.3, 0.4]));
    }

    #[test]
    fn single_gaussian_matches_closed_form_footprint() {
        let (w, h) = (32, 32);
        let c = CameraModel::from_rt(&Matrix3::identity(), &Vector3::zeros(), 40.0, 40.0, 16.0, 16.0, w, h);
        let (z, sc) = (4.0, 0.2);
        let mut s = GaussianScene::new(0);
        s.push(GaussianPrimitive::isotropic([0.0, 0.0, z], sc, 0.99, [1.0, 0.0, 0.0]), 0, 1.0);
        let out = render_with(&s, &c, &RenderSettings::exact([0.0; 3])).unwrap();
        let sig2 = (40.0 * sc / z).powi(2) + DEFAULT_DILATION;
        for (x, y) in [(16, 16), (17, 16), (16, 19), (20, 13), (25, 16)] {
            let r2 = ((x as f64 - 16.0).powi(2) + (y as f64 - 16.0).powi(2)) as f64;
            let want = (0.99 * (-0.5 * r2 / sig2).exp()).min(ALPHA_MAX);
            let got = out.color.get(x, y);
            assert!((got[0] - want).abs() < 1e-3, "({x},{y}): {} vs {want}", got[0]);
            assert!(got[1].abs() < 1e-12 && got[2].abs() < 1e-12);
        }
        assert!((out.color.get(16, 16)[0] - 0.99).abs() < 1e-12);
        assert!((out.depth[16 * w + 16] - z).abs() < 1e-9);
    }

    #[test]
    fn two_overlapping_gaussians_match_oracle() {
        let mut s = GaussianScene::new(0);
        s.push(GaussianPrimitive::isotropic([0.1, 0.0, 0.0], 0.3, 0.7, [1.0, 0.2, 0.0]), 0, 1.0);
        s.push(GaussianPrimitive::isotropic([-0.1, 0.8, 0.1], 0.4, 0.8, [0.0, 0.3, 1.0]), 1, 1.0);
        let c = cam(24, 20);
        for st in [RenderSettings::new([0.1, 0.1, 0.1]), RenderSettings::exact([0.5, 0.2, 0.0])] {
            assert!(max_diff_to_oracle(&s, &c, &st) < 1e-5);
        }
    }

    #[test]
    fn higher_degree_scene_matches_oracle() {
        let s = random_scene(11, 12, 3);
        assert!(max_diff_to_oracle(&s, &cam(20, 16), &RenderSettings::new([0.3, 0.3, 0.3])) < 1e-5);
    }

    #[test]
    fn gradcheck_single_gaussian_l2() {
        let s = random_scene(1, 1, 0);
        let c = cam(16, 16);
        let target = ImageTensor::from_fn(16, 16, |x, y| [x as f64 / 16.0, 0.5, y as f64 / 16.0]);
        let r = render_gradcheck(&s, &c, &RenderSettings::exact([0.2, 0.1, 0.3]), |t, p| l2_to(t, p, &target)).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn gradcheck_five_gaussians_all_outputs() {
        for deg in [0, 1, 3] {
            let s = random_scene(5 + deg as u64, 5, deg);
            let c = cam(12, 12);
            let target = ImageTensor::from_fn(12, 12, |x, y| [0.3, x as f64 / 12.0, y as f64 / 12.0]);
            let r = render_gradcheck(&s, &c, &RenderSettings::exact([0.2, 0.1, 0.3]), |t, p| {
                let rv = unpack(p, 12, 12);
                l2_to(t, p, &target).add(rv.depth.mean().scale(0.1)).add(rv.alpha.square().mean())
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-3, "degree {deg}: {} at {:?}", r.max_rel_error, r.worst);
        }
    }

    #[test]
    fn zero_opacity_has_exactly_zero_colour_gradient() {
        let mut s = random_scene(2, 3, 0);
        s.gaussians[1].opacity = 0.0;
        let c = cam(10, 10);
        let t = SceneTensors::from_scene(&s);
        let tape = Tape::new();
        let sh = tape.leaf(t.sh.clone());
        let v = SplatVars { sh, ..t.vars(&tape) };
        let p = render_vars(&tape, &v, 0, &c, &RenderSettings::exact([0.0; 3])).unwrap();
        let g = tape.backward(p.slice(1, 0, 3).sum());
        let gs = g.wrt(sh).unwrap();
        assert!(gs.data()[3..6].iter().all(|&v| v == 0.0));
        assert!(gs.data()[0..3].iter().any(|&v| v != 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn matches_oracle_on_random_scenes(seed in 0u64..1000, n in 0usize..50, deg in 0usize..=1) {
            let s = random_scene(seed, n, deg);
            prop_assert!(max_diff_to_oracle(&s, &cam(32, 32), &RenderSettings::new([0.1, 0.2, 0.3])) < 1e-5);
        }

        #[test]
        fn permutation_leaves_output_unchanged(seed in 0u64..1000, n in 2usize..20) {
            let s = random_scene(seed, n, 0);
            let mut perm = s.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.gaussians.swap(i, j);
            }
            let c = cam(16, 16);
            let st = RenderSettings::new([0.1, 0.2, 0.3]);
            let a = packed(&s, &c, &st);
            let b = packed(&perm, &c, &st);
            let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(d < 1e-12, "{d}");
        }

        #[test]
        fn alpha_is_monotone_in_opacity(seed in 0u64..1000, lo in 0.01f64..0.5, step in 0.0f64..0.5) {
            let mut s = random_scene(seed, 1, 0);
            let c = cam(16, 16);
            s.gaussians[0].opacity = lo;
            let a = render(&s, &c, [0.0; 3]).unwrap().alpha;
            s.gaussians[0].opacity = lo + step;
            let b = render(&s, &c, [0.0; 3]).unwrap().alpha;
            prop_assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
        }
    }
}
