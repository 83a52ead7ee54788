use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use super::{AggregatorOutput, BackboneConfig, PixelLayout};
use crate::autograd::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{visit_child, visit_child_mut, Linear, Module};
use crate::tensor::Tensor;
use crate::types::{sh_coeff_count, CameraModel};

/// Inverse of `softplus`.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn shrink(l: &mut Linear, s: f64) {
    let w = l.w.value().scale(s);
    *l.w.value_mut() = w;
}

fn fused<'t>(tokens: &[Var<'t>], n_layers: usize, d_f: usize) -> Result<Var<'t>> {
    if tokens.len() != n_layers {
        return Err(Error::Validation(format!("head expects {n_layers} token sets, got {}", tokens.len())));
    }
    let shape = tokens[0].shape();
    for t in tokens {
        let s = t.shape();
        if s.len() != 2 || s[1] != d_f || s != shape {
            return Err(Error::shape([shape[0], d_f], s));
        }
    }
    Ok(if n_layers == 1 { tokens[0] } else { Var::concat(tokens, 1) })
}

/// Per-pixel Gaussian attributes (everything except the centre).
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars<'t> {
    /// `[N, 4]`, unit norm.
    pub rot: Var<'t>,
    /// `[N, 3]`, positive.
    pub scale: Var<'t>,
    /// `[N]`, in `(0, 1)`.
    pub opacity: Var<'t>,
    /// `[N, K, 3]`
    pub sh: Var<'t>,
}

/// Fuses the retained token sets by concatenation, upsamples to pixels
/// (nearest within each patch) and decodes Gaussian attributes.
///
/// Each pixel also sees its own colour and its position inside the patch,
/// so neighbouring Gaussians of one patch can differ.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub fuse: Linear,
    pub pixel: Linear,
    pub sub: Param,
    pub out: Linear,
    pub n_layers: usize,
    pub d_f: usize,
    pub sh_degree: usize,
}

impl GaussianHead {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let n_layers = cfg.retained.len() + 1;
        let k = sh_coeff_count(cfg.sh_degree);
        let hid = cfg.head_hidden;
        let mut out = Linear::new(hid, 8 + 3 * k, rng);
        shrink(&mut out, 0.1);
        let mut b = vec![0.0; 8 + 3 * k];
        b[0] = 1.0;
        b[4..7].fill(cfg.init_scale.ln());
        b[7] = (cfg.init_opacity / (1.0 - cfg.init_opacity)).ln();
        *out.b.value_mut() = Tensor::new(&[8 + 3 * k], b);
        GaussianHead {
            fuse: Linear::new(n_layers * cfg.d_f, hid, rng),
            pixel: Linear::new(3, hid, rng),
            sub: Param::new(Tensor::zeros(&[cfg.patch * cfg.patch, hid])),
            out,
            n_layers,
            d_f: cfg.d_f,
            sh_degree: cfg.sh_degree,
        }
    }

    /// `tokens`: retained token sets `[views * patches, d_f]` in layer
    /// order; `rgb`: `[N, 3]` pixel colours.
    pub fn forward<'t>(&self, tape: &'t Tape, tokens: &[Var<'t>], rgb: Var<'t>, layout: &PixelLayout) -> Result<GaussianVars<'t>> {
        let x = fused(tokens, self.n_layers, self.d_f)?;
        let n = layout.pixels();
        if rgb.shape() != [n, 3] {
            return Err(Error::shape([n, 3], rgb.shape()));
        }
        let h = self
            .fuse
            .forward(tape, x)
            .gather_rows(layout.pixel_to_patch.clone())
            .add(self.pixel.forward(tape, rgb))
            .add(tape.param(&self.sub).gather_rows(layout.pixel_to_sub.clone()))
            .gelu();
        let y = self.out.forward(tape, h);
        let k = sh_coeff_count(self.sh_degree);
        Ok(GaussianVars {
            rot: y.slice(1, 0, 4).normalize_last(1e-12),
            scale: y.slice(1, 4, 3).exp(),
            opacity: y.slice(1, 7, 1).sigmoid().reshape(&[n]),
            sh: y.slice(1, 8, 3 * k).reshape(&[n, k, 3]),
        })
    }
}

impl Module for GaussianHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("fuse", &self.fuse, f);
        visit_child("pixel", &self.pixel, f);
        f("sub", &self.sub);
        visit_child("out", &self.out, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("fuse", &mut self.fuse, f);
        visit_child_mut("pixel", &mut self.pixel, f);
        f("sub", &mut self.sub);
        visit_child_mut("out", &mut self.out, f);
    }
}

/// Predicts `patch²` (depth, confidence) pairs per token, both softplus.
#[derive(Clone, Debug)]
pub struct DepthHead {
    pub lin: Linear,
    pub n_layers: usize,
    pub d_f: usize,
}

impl DepthHead {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let n_layers = cfg.retained.len() + 1;
        let pp = cfg.patch * cfg.patch;
        let mut lin = Linear::new(n_layers * cfg.d_f, pp * 2, rng);
        shrink(&mut lin, 0.1);
        let b: Vec<f64> = (0..pp).flat_map(|_| [softplus_inv(cfg.init_depth), softplus_inv(1.0)]).collect();
        *lin.b.value_mut() = Tensor::new(&[pp * 2], b);
        DepthHead { lin, n_layers, d_f: cfg.d_f }
    }

    /// Returns per-pixel `(depth, confidence)`, each `[N, 1]`.
    pub fn forward<'t>(&self, tape: &'t Tape, tokens: &[Var<'t>], layout: &PixelLayout) -> (Var<'t>, Var<'t>) {
        let x = fused(tokens, self.n_layers, self.d_f).expect("aggregator output matches head layout");
        let rows = x.shape()[0] * layout.patch * layout.patch;
        let y = self
            .lin
            .forward(tape, x)
            .reshape(&[rows, 2])
            .gather_rows(layout.pixel_to_depth_row.clone());
        (y.slice(1, 0, 1).softplus(), y.slice(1, 1, 1).softplus())
    }
}

impl Module for DepthHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("lin", &self.lin, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("lin", &mut self.lin, f);
    }
}

/// Per-view pose from mean-pooled final tokens: a 6D rotation made
/// orthonormal by Gram-Schmidt, plus a translation.
#[derive(Clone, Debug)]
pub struct CameraHead {
    pub lin: Linear,
}

/// Rotation whose first two columns follow `a` and `b`.
pub fn rotation_from_6d(a: [f64; 3], b: [f64; 3]) -> Matrix3<f64> {
    let a = Vector3::from(a);
    let b = Vector3::from(b);
    let c1 = if a.norm() > 1e-12 { a.normalize() } else { Vector3::x() };
    let b_perp = b - c1 * c1.dot(&b);
    let c2 = if b_perp.norm() > 1e-12 {
        b_perp.normalize()
    } else {
        let helper = if c1.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        (helper - c1 * c1.dot(&helper)).normalize()
    };
    let c3 = c1.cross(&c2);
    Matrix3::from_columns(&[c1, c2, c3])
}

impl CameraHead {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut lin = Linear::new(cfg.d_f, 9, rng);
        shrink(&mut lin, 0.1);
        *lin.b.value_mut() = Tensor::new(&[9], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, cfg.init_depth]);
        CameraHead { lin }
    }

    pub fn predict(&self, cfg: &BackboneConfig, agg: &AggregatorOutput) -> Vec<CameraModel> {
        let tokens = agg.tokens.last().expect("aggregator output has a final layer");
        let d = tokens.shape()[1];
        let f = 0.5 * cfg.image_height as f64 / (0.5 * cfg.fov_y_deg.to_radians()).tan();
        (0..agg.views)
            .map(|v| {
                let mut mean = vec![0.0; d];
                for p in 0..agg.patches {
                    for (m, x) in mean.iter_mut().zip(tokens.row(v * agg.patches + p)) {
                        *m += x / agg.patches as f64;
                    }
                }
                let y = self.lin.apply(&mean);
                let r = rotation_from_6d([y[0], y[1], y[2]], [y[3], y[4], y[5]]);
                let t = Vector3::new(y[6], y[7], y[8]);
                let (w, h) = (cfg.image_width, cfg.image_height);
                CameraModel::from_rt(&r, &t, f, f, w as f64 / 2.0, h as f64 / 2.0, w, h)
            })
            .collect()
    }
}

impl Module for CameraHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("lin", &self.lin, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("lin", &mut self.lin, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_inverse() {
        for y in [0.1, 1.0, 3.0, 20.0] {
            assert!((crate::autograd::softplus(softplus_inv(y)) - y).abs() < 1e-12);
        }
    }
}
