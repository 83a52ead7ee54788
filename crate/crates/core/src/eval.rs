//! Multi-view consistency: warp one rendered frame into another camera using
//! rendered depth and known poses, then measure masked RMSE.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::DualBranchModel;
use crate::style::StyleEmbedding;
use crate::render::RenderOutput;
use crate::types::{CameraModel, ImageTensor};

/// Pixels with accumulated opacity above this carry usable depth.
pub const VALID_ALPHA: f64 = 0.5;
/// Depths closer than this to the current winner count as the same surface.
pub const ZBUFFER_TOL: f64 = 1e-4;
pub const SHORT_GAP: usize = 1;
pub const LONG_GAP: usize = 7;

/// A source frame resampled into a destination camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Warp {
    pub image: ImageTensor,
    /// Destination-camera depth of the winning source point; 0 if none.
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Warp {
    pub fn valid_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len().max(1) as f64
    }

    /// Treats the warp as a render: alpha 1 on the mask, 0 elsewhere.
    pub fn as_render(&self) -> RenderOutput {
        RenderOutput {
            color: self.image.clone(),
            depth: self.depth.clone(),
            alpha: self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Forward-splats every valid source pixel into `dst_cam` with a z-buffer.
/// Uncovered destination pixels are invalid.
pub fn warp_by_depth(src: &RenderOutput, src_cam: &CameraModel, dst_cam: &CameraModel) -> Result<Warp> {
    let (w, h) = (src.width(), src.height());
    ensure!(
        src_cam.width == w && src_cam.height == h,
        "source camera is {}x{} but the render is {w}x{h}",
        src_cam.width,
        src_cam.height
    );
    let (dw, dh) = (dst_cam.width, dst_cam.height);
    let mut zbuf = vec![f64::INFINITY; dw * dh];
    let mut from = vec![usize::MAX; dw * dh];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if src.alpha[i] <= VALID_ALPHA {
                continue;
            }
            let p: Vector3<f64> = src_cam.unproject(x as f64, y as f64, src.depth[i]);
            let (u, v, z) = dst_cam.project(&p);
            if z <= 0.0 || !u.is_finite() || !v.is_finite() {
                continue;
            }
            let (ui, vi) = (u.round(), v.round());
            if ui < 0.0 || vi < 0.0 || ui >= dw as f64 || vi >= dh as f64 {
                continue;
            }
            let j = vi as usize * dw + ui as usize;
            if z < zbuf[j] - ZBUFFER_TOL {
                zbuf[j] = z;
                from[j] = i;
            }
        }
    }
    let mask: Vec<bool> = from.iter().map(|&f| f != usize::MAX).collect();
    let image = ImageTensor::from_fn(dw, dh, |x, y| match from[y * dw + x] {
        usize::MAX => [0.0; 3],
        f => src.color.get(f % w, f / w),
    });
    let depth = zbuf.iter().map(|&z| if z.is_finite() { z } else { 0.0 }).collect();
    Ok(Warp { image, depth, mask })
}

/// RMSE over masked pixels and channels; `None` when the mask is empty.
pub fn masked_rmse(a: &ImageTensor, b: &ImageTensor, mask: &[bool]) -> Result<Option<f64>> {
    ensure!(a.width() == b.width() && a.height() == b.height(), "image sizes differ");
    ensure!(mask.len() == a.width() * a.height(), "mask size does not match the images");
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for c in 0..3 {
                sum += (a.pixels()[3 * i + c] - b.pixels()[3 * i + c]).powi(2);
            }
            n += 3;
        }
    }
    Ok((n > 0).then(|| (sum / n as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    /// Frame warped into `dst`'s camera.
    pub src: usize,
    pub dst: usize,
    /// `None` when the pair shares no valid pixels.
    pub rmse: Option<f64>,
    pub valid_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeReport {
    pub gap: usize,
    pub pairs: Vec<PairResult>,
    /// Mean over pairs with a defined RMSE.
    pub mean_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub frames: usize,
    pub short_range: RangeReport,
    /// Absent when the clip has no more than `long_gap` frames.
    pub long_range: Option<RangeReport>,
}

/// Frame `t - gap` warped into frame `t`, compared on the warp mask
/// intersected with `t`'s own valid pixels.
pub fn pair_rmse(renders: &[RenderOutput], cams: &[CameraModel], src: usize, dst: usize) -> Result<PairResult> {
    let warp = warp_by_depth(&renders[src], &cams[src], &cams[dst])?;
    let target = &renders[dst];
    let mask: Vec<bool> = warp.mask.iter().zip(&target.alpha).map(|(&m, &a)| m && a > VALID_ALPHA).collect();
    let valid_fraction = mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64;
    Ok(PairResult { src, dst, rmse: masked_rmse(&warp.image, &target.color, &mask)?, valid_fraction })
}

fn range(renders: &[RenderOutput], cams: &[CameraModel], gap: usize) -> Result<RangeReport> {
    let pairs = (gap..renders.len()).map(|t| pair_rmse(renders, cams, t - gap, t)).collect::<Result<Vec<_>>>()?;
    let vals: Vec<f64> = pairs.iter().filter_map(|p| p.rmse).collect();
    let mean_rmse = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    Ok(RangeReport { gap, pairs, mean_rmse })
}

pub fn consistency_metric(
    renders: &[RenderOutput],
    cams: &[CameraModel],
    short_gap: usize,
    long_gap: usize,
) -> Result<ConsistencyReport> {
    ensure!(renders.len() == cams.len(), "{} renders for {} cameras", renders.len(), cams.len());
    ensure!(short_gap >= 1 && long_gap >= 1, "gaps must be positive");
    ensure!(renders.len() > short_gap, "need more than {short_gap} frames, got {}", renders.len());
    let short_range = range(renders, cams, short_gap)?;
    let long_range = if renders.len() > long_gap { Some(range(renders, cams, long_gap)?) } else { None };
    Ok(ConsistencyReport { frames: renders.len(), short_range, long_range })
}

/// Cameras on a horizontal arc around the origin, all looking at it.
///
/// `arc_deg` is the total angle swept; frames are evenly spaced and the
/// last frame sits at the end of the arc (a full turn repeats no frame).
pub fn orbit_path(n: usize, radius: f64, height: f64, arc_deg: f64, fov_y_deg: f64, w: usize, h: usize) -> Vec<CameraModel> {
    let full = (arc_deg - 360.0).abs() < 1e-9;
    let steps = if full { n } else { n.saturating_sub(1).max(1) };
    (0..n)
        .map(|i| {
            let a = (arc_deg * i as f64 / steps as f64).to_radians();
            CameraModel::look_at([radius * a.cos(), radius * a.sin(), height], [0.0; 3], [0.0, 0.0, 1.0], fov_y_deg, w, h)
        })
        .collect()
}

pub type MetricFn = Box<dyn Fn(&[ImageTensor], &[ImageTensor]) -> Result<f64> + Send + Sync>;

/// Named image-set metrics.
#[derive(Default)]
pub struct MetricRegistry {
    metrics: BTreeMap<String, MetricFn>,
}

/// Mean per-image RMSE over all pixels.
pub fn rmse_metric(renders: &[ImageTensor], refs: &[ImageTensor]) -> Result<f64> {
    ensure!(!renders.is_empty() && renders.len() == refs.len(), "need equal, non-empty image lists");
    let mut total = 0.0;
    for (a, b) in renders.iter().zip(refs) {
        let mask = vec![true; a.width() * a.height()];
        total += masked_rmse(a, b, &mask)?.unwrap_or(0.0);
    }
    Ok(total / renders.len() as f64)
}

impl MetricRegistry {
    /// RMSE natively; the art-style scores are placeholders that report
    /// the missing classifier.
    pub fn with_defaults() -> Self {
        let mut r = Self::default();
        r.register("rmse", Box::new(rmse_metric)).expect("fresh registry");
        for name in ["artfid", "artscore"] {
            r.register(
                name,
                Box::new(move |_: &[ImageTensor], _: &[ImageTensor]| {
                    Err(Error::Validation(format!("metric {name} needs a pretrained art classifier, which is not bundled")))
                }),
            )
            .expect("fresh registry");
        }
        r
    }

    pub fn register(&mut self, name: &str, f: MetricFn) -> Result<()> {
        if self.metrics.contains_key(name) {
            return Err(Error::Validation(format!("metric {name:?} is already registered")));
        }
        self.metrics.insert(name.to_string(), f);
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.metrics.keys().map(|s| s.as_str()).collect()
    }

    pub fn evaluate(&self, name: &str, renders: &[ImageTensor], refs: &[ImageTensor]) -> Result<f64> {
        match self.metrics.get(name) {
            Some(f) => f(renders, refs),
            None => Err(Error::NotFound(format!("metric {name:?}; available: {}", self.names().join(", ")))),
        }
    }
}

/// Wall times in seconds for one model on one set of views.
#[derive(Clone, Debug, Serialize)]
pub struct Timings {
    /// First `reconstruct` plus `stylize`, with nothing cached.
    pub cold: f64,
    /// Median `stylize` on the cached reconstruction.
    pub warm_stylize: f64,
    pub repeats: usize,
}

/// Times a cold reconstruct+stylize and `repeats` warm stylizations.
pub fn time_stylization(
    model: &DualBranchModel,
    images: &[ImageTensor],
    cams: Option<&[CameraModel]>,
    z: &StyleEmbedding,
    repeats: usize,
) -> Result<Timings> {
    ensure!(repeats > 0, "repeats must be positive");
    let t = Instant::now();
    let rec = model.reconstruct(images, cams, None)?;
    model.stylize(&rec, z)?;
    let cold = t.elapsed().as_secs_f64();
    let mut warm = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        model.stylize(&rec, z)?;
        warm.push(t.elapsed().as_secs_f64());
    }
    warm.sort_by(f64::total_cmp);
    Ok(Timings { cold, warm_stylize: warm[repeats / 2], repeats })
}
