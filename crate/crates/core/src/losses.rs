//! Training objective: content, style statistics, directional and patch
//! embedding losses, optional depth consistency, and their weighted sum.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Padding, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::Conv2d;
use crate::style::StyleProvider;
use crate::tensor::Tensor;
use crate::types::ImageTensor;
use crate::warp::Crop;

pub const TAP_NAMES: [&str; 4] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1"];
pub const CONTENT_TAPS: [usize; 2] = [2, 3];
pub const STYLE_TAPS: [usize; 4] = [0, 1, 2, 3];

/// Variance guard inside the standard deviation.
pub const STD_EPS: f64 = 1e-8;
/// Added to both norms in the directional cosine.
pub const COS_EPS: f64 = 1e-8;

/// Frozen four-stage conv net. Stage `k > 0` halves the resolution first.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub stages: Vec<Conv2d>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::toy(7)
    }
}

impl FeatureExtractor {
    pub fn toy(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chans = [3, 8, 16, 32, 32];
        let stages = (0..4)
            .map(|k| Conv2d::new(chans[k], chans[k + 1], 3, 1, 1, Padding::Replicate, &mut rng))
            .collect();
        FeatureExtractor { stages }
    }

    /// Activations at every tap for an `[H, W, 3]` image; `H` and `W` must
    /// be divisible by 8.
    pub fn taps<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Vec<Var<'t>>> {
        let s = image.shape();
        ensure!(
            s.len() == 3 && s[2] == 3 && s[0] % 8 == 0 && s[1] % 8 == 0 && s[0] > 0 && s[1] > 0,
            "feature extractor needs [H, W, 3] with H, W divisible by 8, got {s:?}"
        );
        let mut x = image.add_scalar(-0.5);
        let mut out = Vec::with_capacity(4);
        for (k, conv) in self.stages.iter().enumerate() {
            if k > 0 {
                x = x.avg_pool2();
            }
            x = conv.forward(tape, x).relu();
            out.push(x);
        }
        Ok(out)
    }
}

/// Channel-wise mean and (biased) standard deviation of `[h, w, c]`.
pub fn channel_stats<'t>(x: Var<'t>) -> (Var<'t>, Var<'t>) {
    let s = x.shape();
    let c = s[s.len() - 1];
    let flat = x.reshape(&[s.iter().product::<usize>() / c, c]);
    let mu = flat.mean_first();
    let var = flat.sub(mu).square().mean_first();
    (mu, var.add_scalar(STD_EPS).sqrt())
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Validation(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Sum over content taps of the mean squared activation difference.
pub fn content_loss<'t>(tape: &'t Tape, phi: &FeatureExtractor, rendered: Var<'t>, original: Var<'t>) -> Result<Var<'t>> {
    same_shape(&rendered, &original, "content loss")?;
    let a = phi.taps(tape, rendered)?;
    let b = phi.taps(tape, original)?;
    let terms: Vec<Var<'t>> = CONTENT_TAPS.iter().map(|&k| a[k].sub(b[k]).square().mean().reshape(&[1])).collect();
    Ok(Var::concat(&terms, 0).sum())
}

/// Per-tap channel statistics of a style image, kept as constants.
#[derive(Clone, Debug)]
pub struct StyleTarget {
    pub mean: Vec<Tensor>,
    pub std: Vec<Tensor>,
}

impl StyleTarget {
    /// Resizes `style` to `width x height` before extracting statistics.
    pub fn new(phi: &FeatureExtractor, style: &ImageTensor, width: usize, height: usize) -> Result<Self> {
        let tape = Tape::no_grad();
        let taps = phi.taps(&tape, tape.constant(style.resize(width, height).to_tensor()))?;
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for &k in &STYLE_TAPS {
            let (m, s) = channel_stats(taps[k]);
            mean.push((*m.value()).clone());
            std.push((*s.value()).clone());
        }
        Ok(StyleTarget { mean, std })
    }
}

fn stats_distance<'t>(r: &[Var<'t>], mean: &[Var<'t>], std: &[Var<'t>]) -> Var<'t> {
    let mut terms = Vec::with_capacity(STYLE_TAPS.len());
    for (i, &k) in STYLE_TAPS.iter().enumerate() {
        let (m, s) = channel_stats(r[k]);
        terms.push(m.sub(mean[i]).square().mean().add(s.sub(std[i]).square().mean()).reshape(&[1]));
    }
    Var::concat(&terms, 0).sum()
}

/// Style loss against precomputed statistics.
pub fn style_loss_to<'t>(tape: &'t Tape, phi: &FeatureExtractor, rendered: Var<'t>, target: &StyleTarget) -> Result<Var<'t>> {
    let r = phi.taps(tape, rendered)?;
    let mean: Vec<Var<'t>> = target.mean.iter().map(|t| tape.constant(t.clone())).collect();
    let std: Vec<Var<'t>> = target.std.iter().map(|t| tape.constant(t.clone())).collect();
    for (i, &k) in STYLE_TAPS.iter().enumerate() {
        let c = *r[k].shape().last().expect("rank 3");
        ensure!(mean[i].shape() == [c], "style target does not match the feature extractor");
    }
    Ok(stats_distance(&r, &mean, &std))
}

/// Style loss between two images of the same size, differentiable in both.
pub fn style_loss<'t>(tape: &'t Tape, phi: &FeatureExtractor, rendered: Var<'t>, style: Var<'t>) -> Result<Var<'t>> {
    let r = phi.taps(tape, rendered)?;
    let s = phi.taps(tape, style)?;
    let (mean, std): (Vec<_>, Vec<_>) = STYLE_TAPS.iter().map(|&k| channel_stats(s[k])).unzip();
    Ok(stats_distance(&r, &mean, &std))
}

/// `1 - cos(e_styl - e_orig, z_s - z_photo)` on precomputed embeddings.
///
/// A zero image direction (stylized identical to original) gives exactly
/// 1 with no gradient.
pub fn directional<'t>(tape: &'t Tape, e_orig: Var<'t>, e_styl: Var<'t>, text_dir: &[f64]) -> Var<'t> {
    let di = e_styl.sub(e_orig);
    if di.value().data().iter().all(|&v| v == 0.0) {
        return tape.constant(Tensor::scalar(1.0));
    }
    let nt = text_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dt = tape.constant(Tensor::new(&[text_dir.len()], text_dir.to_vec()));
    let ni = di.square().sum().sqrt();
    let cos = di.mul(dt).sum().div(ni.add_scalar(COS_EPS)).scale(1.0 / (nt + COS_EPS));
    cos.neg().add_scalar(1.0)
}

fn text_direction(z_s: &[f64], z_photo: &[f64]) -> Result<Vec<f64>> {
    ensure!(z_s.len() == z_photo.len(), "embedding sizes {} and {} differ", z_s.len(), z_photo.len());
    Ok(z_s.iter().zip(z_photo).map(|(a, b)| a - b).collect())
}

pub fn clip_directional_loss<'t>(
    tape: &'t Tape,
    provider: &dyn StyleProvider,
    original: Var<'t>,
    stylized: Var<'t>,
    z_s: &[f64],
    z_photo: &[f64],
) -> Result<Var<'t>> {
    same_shape(&original, &stylized, "directional loss")?;
    let dt = text_direction(z_s, z_photo)?;
    ensure!(dt.len() == provider.dim(), "style embedding size {} != provider size {}", dt.len(), provider.dim());
    let eo = provider.embed_image_var(tape, original)?;
    let es = provider.embed_image_var(tape, stylized)?;
    Ok(directional(tape, eo, es, &dt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub n_patch: usize,
    pub crop_size: usize,
    /// Corner jitter as a fraction of the crop size.
    pub jitter: f64,
}

impl Default for PatchConfig {
    /// Scaled to 64x64 renders; the large-scale setting is 16 crops of 64.
    fn default() -> Self {
        PatchConfig { n_patch: 4, crop_size: 32, jitter: 0.15 }
    }
}

impl PatchConfig {
    pub fn full_scale() -> Self {
        PatchConfig { n_patch: 16, crop_size: 64, jitter: 0.15 }
    }
}

/// Random perspective crops for one image.
pub fn sample_crops(w: usize, h: usize, cfg: &PatchConfig, rng: &mut impl Rng) -> Result<Vec<Crop>> {
    ensure!(cfg.n_patch > 0, "n_patch must be positive");
    ensure!(
        cfg.crop_size <= w && cfg.crop_size <= h,
        "crop size {} is larger than the {w}x{h} image",
        cfg.crop_size
    );
    ensure!((0.0..=0.5).contains(&cfg.jitter), "jitter must lie in [0, 0.5]");
    (0..cfg.n_patch).map(|_| Crop::random(w, h, cfg.crop_size, cfg.jitter, rng)).collect()
}

/// Mean directional loss of perspective-warped crops of `stylized` against
/// the whole `original`.
pub fn clip_patch_loss<'t>(
    tape: &'t Tape,
    provider: &dyn StyleProvider,
    original: Var<'t>,
    stylized: Var<'t>,
    z_s: &[f64],
    z_photo: &[f64],
    crops: &[Crop],
) -> Result<Var<'t>> {
    same_shape(&original, &stylized, "patch loss")?;
    ensure!(!crops.is_empty(), "no crops");
    let dt = text_direction(z_s, z_photo)?;
    let s = stylized.shape();
    let (h, w) = (s[0], s[1]);
    let eo = provider.embed_image_var(tape, original)?;
    let flat = stylized.reshape(&[h * w, 3]);
    let mut terms = Vec::with_capacity(crops.len());
    for c in crops {
        ensure!(c.size <= w && c.size <= h, "crop size {} is larger than the {w}x{h} image", c.size);
        let patch = flat.resample(Rc::new(c.map(w, h))).reshape(&[c.size, c.size, 3]);
        let ep = provider.embed_image_var(tape, patch)?;
        terms.push(directional(tape, eo, ep, &dt).reshape(&[1]));
    }
    Ok(Var::concat(&terms, 0).mean())
}

/// Mean `|a - b|` over pixels where `alpha > 0.5`; 0 when none are valid.
pub fn depth_consistency_loss<'t>(tape: &'t Tape, stylized: Var<'t>, frozen: &Tensor, alpha: &Tensor) -> Result<Var<'t>> {
    let n = stylized.value().numel();
    ensure!(frozen.numel() == n && alpha.numel() == n, "depth maps and mask must have {n} entries");
    let mask: Vec<f64> = alpha.data().iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect();
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let shape = stylized.shape();
    let diff = stylized.sub(tape.constant(Tensor::new(&shape, frozen.data().to_vec()))).abs();
    Ok(diff.mul(tape.constant(Tensor::new(&shape, mask))).sum().scale(1.0 / count))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub clip: f64,
    pub clip_patch: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { content: 0.05, style: 1.0, clip: 2.0, clip_patch: 4.0, depth: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, w) in self.named() {
            ensure!(w >= 0.0 && w.is_finite(), "loss weight {n} must be non-negative, got {w}");
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("content", self.content),
            ("style", self.style),
            ("clip", self.clip),
            ("clip_patch", self.clip_patch),
            ("depth", self.depth),
        ]
    }
}

/// Evaluated terms; `None` marks a term that was not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub content: Option<f64>,
    pub style: Option<f64>,
    pub clip_global: Option<f64>,
    pub clip_patch: Option<f64>,
    pub depth_consistency: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub terms: LossTerms,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossTerms {
    fn weighted(&self, w: &LossWeights) -> [(Option<f64>, f64); 5] {
        [
            (self.content, w.content),
            (self.style, w.style),
            (self.clip_global, w.clip),
            (self.clip_patch, w.clip_patch),
            (self.depth_consistency, w.depth),
        ]
    }
}

pub fn total_loss(terms: LossTerms, weights: LossWeights) -> Result<LossBundle> {
    weights.validate()?;
    let total = terms.weighted(&weights).iter().map(|(t, w)| t.map_or(0.0, |t| t * w)).sum();
    Ok(LossBundle { terms, weights, total })
}

/// Terms still on the tape, for training.
#[derive(Clone, Copy, Default)]
pub struct LossVars<'t> {
    pub content: Option<Var<'t>>,
    pub style: Option<Var<'t>>,
    pub clip_global: Option<Var<'t>>,
    pub clip_patch: Option<Var<'t>>,
    pub depth_consistency: Option<Var<'t>>,
}

impl<'t> LossVars<'t> {
    pub fn values(&self) -> LossTerms {
        let v = |x: Option<Var<'t>>| x.map(|x| x.item());
        LossTerms {
            content: v(self.content),
            style: v(self.style),
            clip_global: v(self.clip_global),
            clip_patch: v(self.clip_patch),
            depth_consistency: v(self.depth_consistency),
        }
    }

    /// Weighted sum on the tape, or `None` if no term is present.
    pub fn total(&self, w: &LossWeights) -> Option<Var<'t>> {
        [
            (self.content, w.content),
            (self.style, w.style),
            (self.clip_global, w.clip),
            (self.clip_patch, w.clip_patch),
            (self.depth_consistency, w.depth),
        ]
        .into_iter()
        .filter_map(|(t, w)| t.map(|t| t.scale(w)))
        .reduce(|a, b| a.add(b))
    }
}

#[cfg(test)]
mod tests;
