//! Toy-scale feed-forward reconstructor.
//!
//! Images are cut into patches by a frozen convolutional embedder, mixed by
//! a transformer [`Aggregator`] that alternates per-view and all-view
//! attention, and decoded by three heads: per-pixel depth (unprojected to
//! Gaussian centres), per-pixel Gaussian attributes and per-view cameras.
//! Layer indices are 0-based; layer `layers - 1` is the final layer.

mod aggregator;
mod heads;
mod merge;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use aggregator::{Aggregator, AttentionBlock, Hook};
pub use heads::{CameraHead, DepthHead, GaussianHead, GaussianVars};
pub use merge::voxel_merge;

use crate::autograd::{Padding, Param, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{visit_child, visit_child_mut, Conv2d, Module};
use crate::tensor::Tensor;
use crate::types::{sh_coeff_count, CameraModel, GaussianPrimitive, GaussianScene, ImageTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Tokens attend within their own view.
    Local,
    /// Tokens attend across all views.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_f: usize,
    pub patch: usize,
    pub heads: usize,
    /// Intermediate layers whose outputs feed the heads, besides the final one.
    pub retained: Vec<usize>,
    pub schedule: Vec<AttentionKind>,
    pub image_width: usize,
    pub image_height: usize,
    pub sh_degree: usize,
    pub head_hidden: usize,
    pub mlp_ratio: usize,
    pub fov_y_deg: f64,
    /// Depth the depth head predicts before any training.
    pub init_depth: f64,
    /// Gaussian scale the head predicts before any training.
    pub init_scale: f64,
    pub init_opacity: f64,
    pub use_gt_cameras: bool,
    pub use_gt_depth: bool,
    pub seed: u64,
}

fn alternating(layers: usize) -> Vec<AttentionKind> {
    (0..layers)
        .map(|l| if l % 2 == 0 { AttentionKind::Local } else { AttentionKind::Global })
        .collect()
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 6,
            d_f: 128,
            patch: 16,
            heads: 4,
            retained: vec![2, 4],
            schedule: alternating(6),
            image_width: 64,
            image_height: 64,
            sh_degree: 0,
            head_hidden: 64,
            mlp_ratio: 2,
            fov_y_deg: 50.0,
            init_depth: 3.0,
            init_scale: 0.03,
            init_opacity: 0.7,
            use_gt_cameras: true,
            use_gt_depth: false,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// Large-scale layout: 24 layers, 1024-d tokens,
    /// 14-pixel patches, retained layers 4, 11, 17 plus the final 23.
    pub fn full_scale() -> Self {
        BackboneConfig {
            layers: 24,
            d_f: 1024,
            patch: 14,
            heads: 16,
            retained: vec![4, 11, 17],
            schedule: alternating(24),
            image_width: 518,
            image_height: 294,
            ..Default::default()
        }
    }

    /// A smaller layout for fast tests.
    pub fn tiny() -> Self {
        BackboneConfig {
            layers: 4,
            d_f: 32,
            patch: 8,
            heads: 2,
            retained: vec![1, 2],
            schedule: alternating(4),
            image_width: 16,
            image_height: 16,
            head_hidden: 16,
            ..Default::default()
        }
    }

    pub fn final_layer(&self) -> usize {
        self.layers - 1
    }

    /// Retained layers plus the final one, ascending.
    pub fn head_layers(&self) -> Vec<usize> {
        let mut v = self.retained.clone();
        v.push(self.final_layer());
        v
    }

    pub fn head_dim(&self) -> usize {
        self.d_f / self.heads
    }

    pub fn patches_per_view(&self) -> usize {
        (self.image_width / self.patch) * (self.image_height / self.patch)
    }

    pub fn pixels_per_view(&self) -> usize {
        self.image_width * self.image_height
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.layers >= 2, "need at least 2 layers, got {}", self.layers);
        ensure!(!self.retained.is_empty(), "retained layer set must be non-empty");
        ensure!(
            self.retained.windows(2).all(|w| w[0] < w[1]),
            "retained layers must be strictly increasing: {:?}",
            self.retained
        );
        ensure!(
            self.retained.iter().all(|&l| l < self.final_layer()),
            "retained layers {:?} must precede the final layer {}",
            self.retained,
            self.final_layer()
        );
        ensure!(
            self.schedule.len() == self.layers,
            "schedule has {} entries for {} layers",
            self.schedule.len(),
            self.layers
        );
        ensure!(self.heads > 0 && self.d_f % self.heads == 0, "d_f {} not divisible by {} heads", self.d_f, self.heads);
        ensure!(self.patch > 0, "patch size must be positive");
        ensure!(
            self.image_width % self.patch == 0 && self.image_height % self.patch == 0 && self.image_width > 0 && self.image_height > 0,
            "image {}x{} not divisible by patch {}",
            self.image_width,
            self.image_height,
            self.patch
        );
        ensure!(self.sh_degree <= crate::types::MAX_SH_DEGREE, "sh_degree {} > 3", self.sh_degree);
        ensure!(self.head_hidden > 0 && self.mlp_ratio > 0, "hidden widths must be positive");
        ensure!(self.init_depth > 0.0 && self.init_scale > 0.0, "init depth and scale must be positive");
        ensure!(self.init_opacity > 0.0 && self.init_opacity < 1.0, "init_opacity must be in (0, 1)");
        ensure!(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0, "fov_y_deg must be in (0, 180)");
        Ok(())
    }
}

/// Per-view patch tokens `F_i`, stored as `[views * patches, d_f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    pub tokens: Tensor,
    pub views: usize,
    pub patches: usize,
    pub patch: usize,
}

/// Token sets retained from the aggregator, each `[views * patches, d_f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorOutput {
    pub layers: Vec<usize>,
    pub final_layer: usize,
    pub tokens: Vec<Tensor>,
    pub views: usize,
    pub patches: usize,
}

impl AggregatorOutput {
    pub fn layer(&self, l: usize) -> Option<&Tensor> {
        self.layers.iter().position(|&x| x == l).map(|i| &self.tokens[i])
    }

    pub fn vars<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tokens.iter().map(|t| tape.constant(t.clone())).collect()
    }
}

/// Tape-side version of [`AggregatorOutput`].
#[derive(Clone, Debug)]
pub struct AggVars<'t> {
    pub layers: Vec<usize>,
    pub tokens: Vec<Var<'t>>,
    pub views: usize,
    pub patches: usize,
}

impl AggVars<'_> {
    pub fn to_output(&self, final_layer: usize) -> AggregatorOutput {
        AggregatorOutput {
            layers: self.layers.clone(),
            final_layer,
            tokens: self.tokens.iter().map(|v| (*v.value()).clone()).collect(),
            views: self.views,
            patches: self.patches,
        }
    }
}

/// Index maps between patch tokens and pixels for a fixed image size.
#[derive(Clone, Debug)]
pub struct PixelLayout {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    /// Pixel row to patch-token row.
    pub pixel_to_patch: Rc<Vec<usize>>,
    /// Pixel row to position within its patch.
    pub pixel_to_sub: Rc<Vec<usize>>,
    /// Pixel row to row of the `[tokens * patch², _]` depth-head output.
    pub pixel_to_depth_row: Rc<Vec<usize>>,
}

impl PixelLayout {
    pub fn new(views: usize, width: usize, height: usize, patch: usize) -> Self {
        let (pw, ph) = (width / patch, height / patch);
        let n = views * width * height;
        let mut to_patch = Vec::with_capacity(n);
        let mut to_sub = Vec::with_capacity(n);
        let mut to_depth = Vec::with_capacity(n);
        for v in 0..views {
            for y in 0..height {
                for x in 0..width {
                    let tok = v * pw * ph + (y / patch) * pw + x / patch;
                    let sub = (y % patch) * patch + x % patch;
                    to_patch.push(tok);
                    to_sub.push(sub);
                    to_depth.push(tok * patch * patch + sub);
                }
            }
        }
        PixelLayout {
            views,
            width,
            height,
            patch,
            pixel_to_patch: Rc::new(to_patch),
            pixel_to_sub: Rc::new(to_sub),
            pixel_to_depth_row: Rc::new(to_depth),
        }
    }

    pub fn pixels(&self) -> usize {
        self.views * self.width * self.height
    }
}

/// Frozen, fixed-seed patch embedder standing in for a pretrained encoder.
#[derive(Clone, Debug)]
pub struct PatchEmbedder {
    pub conv: Conv2d,
}

impl Module for PatchEmbedder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("conv", &self.conv, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("conv", &mut self.conv, f);
    }
}

/// The full reconstructor.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub embedder: PatchEmbedder,
    pub aggregator: Aggregator,
    pub gaussian_head: GaussianHead,
    pub depth_head: DepthHead,
    pub camera_head: CameraHead,
}

impl Module for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("embedder", &self.embedder, f);
        visit_child("aggregator", &self.aggregator, f);
        visit_child("gaussian_head", &self.gaussian_head, f);
        visit_child("depth_head", &self.depth_head, f);
        visit_child("camera_head", &self.camera_head, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("embedder", &mut self.embedder, f);
        visit_child_mut("aggregator", &mut self.aggregator, f);
        visit_child_mut("gaussian_head", &mut self.gaussian_head, f);
        visit_child_mut("depth_head", &mut self.depth_head, f);
        visit_child_mut("camera_head", &mut self.camera_head, f);
    }
}

/// Every intermediate of one backbone pass.
pub struct ForwardVars<'t> {
    pub agg: AggVars<'t>,
    pub cameras: Vec<CameraModel>,
    pub layout: PixelLayout,
    pub rgb: Var<'t>,
    /// `[N, 1]` per-pixel depth, predicted or injected.
    pub depth: Var<'t>,
    /// `[N, 1]`
    pub confidence: Var<'t>,
    pub mu: Var<'t>,
    pub gaussians: GaussianVars<'t>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let p = cfg.patch;
        let embedder = PatchEmbedder { conv: Conv2d::new(3, cfg.d_f, p, p, 0, Padding::Zero, &mut rng) };
        let aggregator = Aggregator::new(&cfg, &mut rng);
        let gaussian_head = GaussianHead::new(&cfg, &mut rng);
        let depth_head = DepthHead::new(&cfg, &mut rng);
        let camera_head = CameraHead::new(&cfg, &mut rng);
        Ok(Backbone { cfg, embedder, aggregator, gaussian_head, depth_head, camera_head })
    }

    /// Rounds every weight to `f32` so checkpoints reproduce them exactly.
    pub fn round_to_f32(&mut self) {
        self.visit_mut(&mut |_, p| {
            let t = p.value().map(|v| v as f32 as f64);
            *p.value_mut() = t;
        });
    }

    fn check_images(&self, images: &[ImageTensor]) -> Result<()> {
        ensure!(!images.is_empty(), "at least one view is required");
        for (i, im) in images.iter().enumerate() {
            ensure!(
                im.width() % self.cfg.patch == 0 && im.height() % self.cfg.patch == 0,
                "view {i}: {}x{} is not divisible by patch size {}",
                im.width(),
                im.height(),
                self.cfg.patch
            );
            ensure!(
                im.width() == self.cfg.image_width && im.height() == self.cfg.image_height,
                "view {i}: {}x{} does not match the configured {}x{}",
                im.width(),
                im.height(),
                self.cfg.image_width,
                self.cfg.image_height
            );
        }
        Ok(())
    }

    /// Frozen patch features for each view.
    pub fn extract_features(&self, images: &[ImageTensor]) -> Result<PatchFeatures> {
        self.check_images(images)?;
        let tape = Tape::no_grad();
        let mut rows = Vec::with_capacity(images.len() * self.cfg.patches_per_view() * self.cfg.d_f);
        for im in images {
            let x = tape.constant(im.to_tensor());
            let y = self.embedder.conv.forward(&tape, x);
            rows.extend_from_slice(y.value().data());
        }
        let patches = self.cfg.patches_per_view();
        Ok(PatchFeatures {
            tokens: Tensor::new(&[images.len() * patches, self.cfg.d_f], rows),
            views: images.len(),
            patches,
            patch: self.cfg.patch,
        })
    }

    /// Runs the aggregator; `hook` sees `(layer, tokens entering layer)`.
    pub fn aggregate<'t>(&self, tape: &'t Tape, feats: &PatchFeatures, hook: Option<Hook<'_, 't>>) -> Result<AggVars<'t>> {
        if feats.tokens.shape() != [feats.views * feats.patches, self.cfg.d_f] {
            return Err(Error::shape([feats.views * feats.patches, self.cfg.d_f], feats.tokens.shape()));
        }
        self.aggregator.forward(tape, &self.cfg, tape.constant(feats.tokens.clone()), feats.views, hook)
    }

    pub fn layout(&self, views: usize) -> PixelLayout {
        PixelLayout::new(views, self.cfg.image_width, self.cfg.image_height, self.cfg.patch)
    }

    /// Per-pixel colours of all views as `[N, 3]`.
    pub fn pixel_rgb<'t>(tape: &'t Tape, images: &[ImageTensor]) -> Var<'t> {
        let n: usize = images.iter().map(|i| i.width() * i.height()).sum();
        let data = images.iter().flat_map(|i| i.pixels().iter().copied()).collect();
        tape.constant(Tensor::new(&[n, 3], data))
    }

    /// Full frozen-style pass. `cams` are required when `use_gt_cameras`
    /// is set; `gt_depth` (one `H*W` map per view) when `use_gt_depth` is.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        images: &[ImageTensor],
        cams: Option<&[CameraModel]>,
        gt_depth: Option<&[Vec<f64>]>,
    ) -> Result<ForwardVars<'t>> {
        let feats = self.extract_features(images)?;
        let agg = self.aggregate(tape, &feats, None)?;
        self.decode(tape, agg, images, cams, gt_depth, None)
    }

    /// Heads applied to an aggregator result. `head_tokens` overrides the
    /// tokens fed to the Gaussian head (used for head-site injection).
    pub fn decode<'t>(
        &self,
        tape: &'t Tape,
        agg: AggVars<'t>,
        images: &[ImageTensor],
        cams: Option<&[CameraModel]>,
        gt_depth: Option<&[Vec<f64>]>,
        head_tokens: Option<&[Var<'t>]>,
    ) -> Result<ForwardVars<'t>> {
        let views = agg.views;
        ensure!(images.len() == views, "{} images for {views} views", images.len());
        let layout = self.layout(views);
        let cameras = self.cameras(&agg, cams)?;
        let (depth, confidence) = self.depth_head.forward(tape, &agg.tokens, &layout);
        let depth = match (self.cfg.use_gt_depth, gt_depth) {
            (true, Some(d)) => {
                ensure!(d.len() == views, "{} depth maps for {views} views", d.len());
                let hw = self.cfg.pixels_per_view();
                ensure!(d.iter().all(|m| m.len() == hw), "depth map size must be {hw}");
                ensure!(d.iter().flatten().all(|v| v.is_finite() && *v > 0.0), "ground-truth depth must be positive");
                tape.constant(Tensor::new(&[views * hw, 1], d.concat()))
            }
            (true, None) => return Err(Error::Validation("use_gt_depth is set but no depth was provided".into())),
            _ => depth,
        };
        let mu = unproject(tape, depth, &cameras, &layout);
        let rgb = Self::pixel_rgb(tape, images);
        let tokens = head_tokens.unwrap_or(&agg.tokens);
        let gaussians = self.gaussian_head.forward(tape, tokens, rgb, &layout)?;
        Ok(ForwardVars { agg, cameras, layout, rgb, depth, confidence, mu, gaussians })
    }

    /// Predicted cameras, or the provided ones under `use_gt_cameras`.
    pub fn cameras(&self, agg: &AggVars<'_>, cams: Option<&[CameraModel]>) -> Result<Vec<CameraModel>> {
        if self.cfg.use_gt_cameras {
            let cams = cams.ok_or_else(|| Error::Validation("use_gt_cameras is set but no cameras were provided".into()))?;
            ensure!(cams.len() == agg.views, "{} cameras for {} views", cams.len(), agg.views);
            for c in cams {
                c.validate()?;
                ensure!(
                    c.width == self.cfg.image_width && c.height == self.cfg.image_height,
                    "camera size {}x{} differs from the configured image size",
                    c.width,
                    c.height
                );
            }
            return Ok(cams.to_vec());
        }
        Ok(self.camera_head.predict(&self.cfg, &agg.to_output(self.cfg.final_layer())))
    }
}

/// World points `centre + depth * ray` for every pixel, as `[N, 3]`.
pub fn unproject<'t>(tape: &'t Tape, depth: Var<'t>, cams: &[CameraModel], layout: &PixelLayout) -> Var<'t> {
    let n = layout.pixels();
    let mut rays = Vec::with_capacity(n * 3);
    let mut centres = Vec::with_capacity(n * 3);
    for cam in cams {
        let c = cam.center();
        for y in 0..layout.height {
            for x in 0..layout.width {
                let r = cam.ray(x as f64, y as f64);
                rays.extend([r.x, r.y, r.z]);
                centres.extend([c.x, c.y, c.z]);
            }
        }
    }
    let rays = tape.constant(Tensor::new(&[n, 3], rays));
    let centres = tape.constant(Tensor::new(&[n, 3], centres));
    depth.mul(rays).add(centres)
}

/// Collects evaluated per-pixel fields into a scene.
pub fn assemble_scene(
    mu: &Tensor,
    rot: &Tensor,
    scale: &Tensor,
    opacity: &Tensor,
    sh: &Tensor,
    confidence: &Tensor,
    sh_degree: usize,
    pixels_per_view: usize,
) -> GaussianScene {
    let n = mu.shape()[0];
    let k = sh_coeff_count(sh_degree);
    let (m, r, s, o, c, cf) = (mu.data(), rot.data(), scale.data(), opacity.data(), sh.data(), confidence.data());
    let mut scene = GaussianScene::new(sh_degree);
    scene.gaussians.reserve(n);
    for i in 0..n {
        scene.push(
            GaussianPrimitive {
                mu: [m[3 * i], m[3 * i + 1], m[3 * i + 2]],
                rot: [r[4 * i], r[4 * i + 1], r[4 * i + 2], r[4 * i + 3]],
                scale: [s[3 * i], s[3 * i + 1], s[3 * i + 2]],
                opacity: o[i],
                sh_coeffs: (0..k).map(|j| [c[(i * k + j) * 3], c[(i * k + j) * 3 + 1], c[(i * k + j) * 3 + 2]]).collect(),
            },
            i / pixels_per_view,
            cf[i],
        );
    }
    scene
}

impl ForwardVars<'_> {
    pub fn scene(&self, sh_degree: usize) -> GaussianScene {
        let g = &self.gaussians;
        assemble_scene(
            &self.mu.value(),
            &g.rot.value(),
            &g.scale.value(),
            &g.opacity.value(),
            &g.sh.value(),
            &self.confidence.value(),
            sh_degree,
            self.layout.width * self.layout.height,
        )
    }
}

#[cfg(test)]
mod tests;
