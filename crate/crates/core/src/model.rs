//! Dual-branch model: a frozen backbone for geometry plus a copied,
//! style-conditioned aggregator and Gaussian head for appearance.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::{Param, ParamId, Tape, Var};
use crate::backbone::{
    assemble_scene, voxel_merge, Aggregator, AggregatorOutput, Backbone, BackboneConfig, GaussianHead, GaussianVars,
    Hook, PatchFeatures,
};
use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Error, Result};
use crate::nn::{visit_child, visit_child_mut, Module};
use crate::render::{SceneTensors, SplatVars};
use crate::style::{interpolate, make_plan, InjectionPlan, PlanLayers, StyleEmbedding};
use crate::tensor::Tensor;
use crate::types::{CameraModel, GaussianScene, ImageTensor};

pub const BACKBONE_KIND: &str = "zerostyle-backbone";
pub const MODEL_KIND: &str = "zerostyle-model";
pub const RECONSTRUCTION_KIND: &str = "zerostyle-reconstruction";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Copied aggregator with its own injection sites, then head injection.
    Full,
    /// Reuses the frozen tokens and injects only at head sites.
    HeadOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Full variant: also inject at head sites on tokens that already went
    /// through the injected aggregator.
    pub double_conditioning: bool,
    /// Ablation: take scale and opacity from the style branch too.
    pub all_geom_features: bool,
    pub d_s: usize,
    /// `None` uses [`PlanLayers::default_for`] on the backbone config.
    pub layers: Option<PlanLayers>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            double_conditioning: true,
            all_geom_features: false,
            d_s: 64,
            layers: None,
            seed: 1,
        }
    }
}

/// Work counters, shared across threads.
#[derive(Debug, Default)]
pub struct Counters {
    pub feature_extractions: AtomicU64,
    pub aggregator_runs: AtomicU64,
    pub head_runs: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CounterSnapshot {
    pub feature_extractions: u64,
    pub aggregator_runs: u64,
    pub head_runs: u64,
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            feature_extractions: self.feature_extractions.load(Ordering::Relaxed),
            aggregator_runs: self.aggregator_runs.load(Ordering::Relaxed),
            head_runs: self.head_runs.load(Ordering::Relaxed),
        }
    }

    fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }
}

/// Everything the frozen branch produced for one set of views.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Identifies the frozen weights that produced this.
    pub frozen_digest: String,
    pub images: Vec<ImageTensor>,
    pub features: PatchFeatures,
    pub agg: AggregatorOutput,
    pub cameras: Vec<CameraModel>,
    /// `[N, 1]`
    pub depth: Tensor,
    pub scene: GaussianScene,
}

/// Style-branch outputs on a tape.
pub struct StyledVars<'t> {
    pub gaussians: GaussianVars<'t>,
}

pub struct DualBranchModel {
    pub frozen: Backbone,
    /// `None` in the head-only variant, where the frozen aggregator's cached
    /// tokens are reused.
    pub styled_aggregator: Option<Aggregator>,
    pub styled_head: GaussianHead,
    pub plan: InjectionPlan,
    pub cfg: ModelConfig,
    frozen_digest: String,
    pub counters: Counters,
}

impl std::fmt::Debug for DualBranchModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualBranchModel").field("cfg", &self.cfg).field("frozen_digest", &self.frozen_digest).finish()
    }
}

pub fn backbone_checkpoint(b: &Backbone) -> Result<Checkpoint> {
    let mut c = b.to_checkpoint(BACKBONE_KIND);
    c.meta.insert("config".into(), serde_json::to_value(&b.cfg)?);
    Ok(c)
}

pub fn backbone_from_checkpoint(c: &Checkpoint) -> Result<Backbone> {
    ensure!(c.kind == BACKBONE_KIND, "checkpoint kind {:?} is not a backbone", c.kind);
    let cfg: BackboneConfig = serde_json::from_value(
        c.meta.get("config").cloned().ok_or_else(|| Error::Validation("backbone checkpoint has no config".into()))?,
    )?;
    let mut b = Backbone::new(cfg)?;
    b.load_checkpoint(c)?;
    Ok(b)
}

pub fn load_backbone(dir: impl AsRef<Path>) -> Result<Backbone> {
    backbone_from_checkpoint(&Checkpoint::load(dir.as_ref())?)
}

fn meta_usize(c: &Checkpoint, key: &str) -> Result<usize> {
    c.meta
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| Error::Validation(format!("checkpoint meta lacks {key:?}")))
}

impl Reconstruction {
    /// Rounds every cached value to `f32`, the on-disk precision, so a
    /// saved and reloaded cache stylizes exactly like the in-memory one.
    pub fn round_to_f32(&mut self) {
        let r = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        r(&mut self.features.tokens);
        self.agg.tokens.iter_mut().for_each(r);
        r(&mut self.depth);
        self.scene.round_to_f32();
        for im in &mut self.images {
            let t = im.to_tensor().map(|v| v as f32 as f64);
            *im = ImageTensor::from_tensor(&t).expect("same shape");
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(RECONSTRUCTION_KIND);
        for (i, im) in self.images.iter().enumerate() {
            c.insert(format!("images/{i:03}"), im.to_tensor());
        }
        c.insert("features", self.features.tokens.clone());
        for (l, t) in self.agg.layers.iter().zip(&self.agg.tokens) {
            c.insert(format!("tokens/{l:03}"), t.clone());
        }
        c.insert("depth", self.depth.clone());
        c.merge_prefixed("scene", &crate::checkpoint::scene_to_checkpoint(&self.scene));
        let m = &mut c.meta;
        m.insert("frozen_digest".into(), self.frozen_digest.clone().into());
        m.insert("views".into(), self.images.len().into());
        m.insert("patches".into(), self.features.patches.into());
        m.insert("patch".into(), self.features.patch.into());
        m.insert("layers".into(), serde_json::to_value(&self.agg.layers)?);
        m.insert("final_layer".into(), self.agg.final_layer.into());
        m.insert("cameras".into(), serde_json::to_value(&self.cameras)?);
        m.insert("sh_degree".into(), self.scene.sh_degree.into());
        m.insert("count".into(), self.scene.len().into());
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        ensure!(c.kind == RECONSTRUCTION_KIND, "checkpoint holds {:?}, not a reconstruction", c.kind);
        let views = meta_usize(c, "views")?;
        let patches = meta_usize(c, "patches")?;
        let images = (0..views)
            .map(|i| ImageTensor::from_tensor(c.get(&format!("images/{i:03}"))?))
            .collect::<Result<Vec<_>>>()?;
        let layers: Vec<usize> = serde_json::from_value(c.meta.get("layers").cloned().unwrap_or_default())?;
        let tokens = layers.iter().map(|l| c.get(&format!("tokens/{l:03}")).cloned()).collect::<Result<Vec<_>>>()?;
        let mut scene_ck = c.sub("scene", "scene");
        scene_ck.meta.insert("sh_degree".into(), meta_usize(c, "sh_degree")?.into());
        scene_ck.meta.insert("count".into(), meta_usize(c, "count")?.into());
        Ok(Reconstruction {
            frozen_digest: c
                .meta
                .get("frozen_digest")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::Validation("reconstruction lacks frozen_digest".into()))?
                .to_string(),
            images,
            features: PatchFeatures { tokens: c.get("features")?.clone(), views, patches, patch: meta_usize(c, "patch")? },
            agg: AggregatorOutput { layers, final_layer: meta_usize(c, "final_layer")?, tokens, views, patches },
            cameras: serde_json::from_value(c.meta.get("cameras").cloned().unwrap_or_default())?,
            depth: c.get("depth")?.clone(),
            scene: crate::checkpoint::scene_from_checkpoint(&scene_ck)?,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(dir.as_ref())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir.as_ref())?)
    }
}

impl DualBranchModel {
    /// Copies the trainable branch from `frozen`; every injector starts at
    /// zero.
    pub fn new(frozen: Backbone, cfg: ModelConfig) -> Result<Self> {
        let layers = cfg.layers.clone().unwrap_or_else(|| PlanLayers::default_for(&frozen.cfg));
        let layers = match cfg.variant {
            Variant::Full => layers,
            Variant::HeadOnly => layers.head_only(),
        };
        let plan = make_plan(&frozen.cfg, cfg.d_s, &layers, cfg.seed)?;
        let styled_aggregator = match cfg.variant {
            Variant::Full => Some(frozen.aggregator.clone()),
            Variant::HeadOnly => None,
        };
        let styled_head = frozen.gaussian_head.clone();
        let frozen_digest = backbone_checkpoint(&frozen)?.digest();
        Ok(DualBranchModel {
            frozen,
            styled_aggregator,
            styled_head,
            plan,
            cfg,
            frozen_digest,
            counters: Counters::default(),
        })
    }

    pub fn frozen_digest(&self) -> &str {
        &self.frozen_digest
    }

    /// Recomputes the frozen digest; differs from [`Self::frozen_digest`]
    /// only if frozen weights were modified.
    pub fn current_frozen_digest(&self) -> Result<String> {
        Ok(backbone_checkpoint(&self.frozen)?.digest())
    }

    pub fn styled_branch(&self) -> StyledBranch<'_> {
        StyledBranch { model: self }
    }

    /// Param ids the style optimizer may update, with the aggregator's ids
    /// listed separately for its own learning rate.
    pub fn trainable_ids(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        let mut main = self.styled_head.param_ids();
        main.extend(self.plan.param_ids());
        let agg = self.styled_aggregator.as_ref().map(|a| a.param_ids()).unwrap_or_default();
        (main, agg)
    }

    /// Runs the frozen branch once and caches what stylization needs.
    pub fn reconstruct(
        &self,
        images: &[ImageTensor],
        cams: Option<&[CameraModel]>,
        gt_depth: Option<&[Vec<f64>]>,
    ) -> Result<Reconstruction> {
        let features = self.frozen.extract_features(images)?;
        Counters::bump(&self.counters.feature_extractions);
        let tape = Tape::no_grad();
        let agg = self.frozen.aggregate(&tape, &features, None)?;
        Counters::bump(&self.counters.aggregator_runs);
        let fwd = self.frozen.decode(&tape, agg, images, cams, gt_depth, None)?;
        Counters::bump(&self.counters.head_runs);
        Ok(Reconstruction {
            frozen_digest: self.frozen_digest.clone(),
            images: images.to_vec(),
            features,
            agg: fwd.agg.to_output(self.frozen.cfg.final_layer()),
            cameras: fwd.cameras.clone(),
            depth: (*fwd.depth.value()).clone(),
            scene: fwd.scene(self.frozen.cfg.sh_degree),
        })
    }

    fn check_cache(&self, rec: &Reconstruction) -> Result<()> {
        if rec.frozen_digest != self.frozen_digest {
            return Err(Error::Contract("reconstruction was produced by different frozen weights".into()));
        }
        let n = rec.images.len() * self.frozen.cfg.pixels_per_view();
        if rec.scene.len() != n || rec.features.views != rec.images.len() {
            return Err(Error::Contract("reconstruction cache is inconsistent".into()));
        }
        Ok(())
    }

    /// Style-branch Gaussian attributes for embedding `z: [d_s]`.
    pub fn stylize_vars<'t>(&self, tape: &'t Tape, rec: &Reconstruction, z: Var<'t>) -> Result<StyledVars<'t>> {
        self.check_cache(rec)?;
        let d_s = self.plan.d_s().unwrap_or(self.cfg.d_s);
        ensure!(z.shape() == [d_s], "style embedding has shape {:?}, expected [{d_s}]", z.shape());
        let cfg = &self.frozen.cfg;
        let mut err = None;
        let tokens: Vec<Var<'t>> = match &self.styled_aggregator {
            Some(agg) => {
                let mut hook = |l: usize, x: Var<'t>| match self.plan.aggregator_site(l) {
                    Some(inj) => inj.inject(tape, x, z).unwrap_or_else(|e| {
                        err.get_or_insert(e);
                        x
                    }),
                    None => x,
                };
                let h: Hook<'_, 't> = &mut hook;
                let feats = tape.constant(rec.features.tokens.clone());
                let out = agg.forward(tape, cfg, feats, rec.features.views, Some(h))?;
                Counters::bump(&self.counters.aggregator_runs);
                out.tokens
            }
            None => rec.agg.vars(tape),
        };
        if let Some(e) = err {
            return Err(e);
        }
        let inject_head = self.styled_aggregator.is_none() || self.cfg.double_conditioning;
        let tokens = if inject_head {
            let layers = cfg.head_layers();
            tokens
                .into_iter()
                .zip(&layers)
                .map(|(t, &l)| match self.plan.head_site(l) {
                    Some(inj) => inj.inject(tape, t, z),
                    None => Ok(t),
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            tokens
        };
        let layout = self.frozen.layout(rec.images.len());
        let rgb = Backbone::pixel_rgb(tape, &rec.images);
        let gaussians = self.styled_head.forward(tape, &tokens, rgb, &layout)?;
        Counters::bump(&self.counters.head_runs);
        Ok(StyledVars { gaussians })
    }

    /// Combines frozen geometry with styled appearance. Centres always come
    /// from the frozen branch; scale and opacity do too unless
    /// `all_geom_features` is set.
    pub fn adapt(&self, rec: &Reconstruction, styled: &StyledVars<'_>) -> GaussianScene {
        let g = &styled.gaussians;
        let deg = self.frozen.cfg.sh_degree;
        let mut out = assemble_scene(
            &scene_field(&rec.scene, |g| g.mu.to_vec(), 3),
            &g.rot.value(),
            &g.scale.value(),
            &g.opacity.value(),
            &g.sh.value(),
            &Tensor::new(&[rec.scene.len()], rec.scene.confidence.clone()),
            deg,
            self.frozen.cfg.pixels_per_view(),
        );
        out.source_view = rec.scene.source_view.clone();
        if !self.cfg.all_geom_features {
            for (o, f) in out.gaussians.iter_mut().zip(&rec.scene.gaussians) {
                o.mu = f.mu;
                o.scale = f.scale;
                o.opacity = f.opacity;
            }
        }
        out
    }

    /// Differentiable counterpart of [`Self::adapt`]: frozen fields enter
    /// as constants.
    pub fn adapt_vars<'t>(&self, tape: &'t Tape, rec: &Reconstruction, styled: &StyledVars<'t>) -> SplatVars<'t> {
        let g = &styled.gaussians;
        let frozen = SceneTensors::from_scene(&rec.scene);
        let (scale, opacity) = if self.cfg.all_geom_features {
            (g.scale, g.opacity)
        } else {
            (tape.constant(frozen.scale), tape.constant(frozen.opacity))
        };
        SplatVars { mu: tape.constant(frozen.mu), rot: g.rot, scale, opacity, sh: g.sh }
    }

    pub fn stylize(&self, rec: &Reconstruction, z: &StyleEmbedding) -> Result<GaussianScene> {
        z.validate()?;
        let tape = Tape::no_grad();
        let styled = self.stylize_vars(&tape, rec, tape.constant(Tensor::new(&[z.dim()], z.vec.clone())))?;
        Ok(self.adapt(rec, &styled))
    }

    pub fn stylize_interpolated(
        &self,
        rec: &Reconstruction,
        a: &StyleEmbedding,
        b: &StyleEmbedding,
        alpha: f64,
    ) -> Result<GaussianScene> {
        self.stylize(rec, &interpolate(a, b, alpha)?)
    }

    /// Stylizes, then merges nearby Gaussians using frozen confidences.
    pub fn stylize_merged(&self, rec: &Reconstruction, z: &StyleEmbedding, voxel_size: f64) -> Result<GaussianScene> {
        voxel_merge(&self.stylize(rec, z)?, voxel_size)
    }

    /// Checkpoint of the styled branch; the frozen backbone is referenced
    /// by path and digest rather than copied.
    pub fn to_checkpoint(&self, frozen_ref: &str) -> Result<Checkpoint> {
        let mut c = self.styled_branch().to_checkpoint(MODEL_KIND);
        c.meta.insert("frozen_ref".into(), frozen_ref.into());
        c.meta.insert("frozen_digest".into(), self.frozen_digest.clone().into());
        c.meta.insert("config".into(), serde_json::to_value(&self.cfg)?);
        c.meta.insert("plan".into(), serde_json::to_value(&self.plan.layers)?);
        Ok(c)
    }

    /// Writes the model to `dir`, referencing an already-saved backbone.
    pub fn save(&self, dir: impl AsRef<Path>, frozen_ref: &str) -> Result<()> {
        self.to_checkpoint(frozen_ref)?.save(dir.as_ref())
    }

    /// Loads a model; a relative `frozen_ref` is resolved against `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let c = Checkpoint::load(dir)?;
        ensure!(c.kind == MODEL_KIND, "checkpoint kind {:?} is not a model", c.kind);
        let meta = |k: &str| c.meta.get(k).cloned().ok_or_else(|| Error::Validation(format!("model checkpoint has no {k}")));
        let frozen_ref: String = serde_json::from_value(meta("frozen_ref")?)?;
        let digest: String = serde_json::from_value(meta("frozen_digest")?)?;
        let mut cfg: ModelConfig = serde_json::from_value(meta("config")?)?;
        cfg.layers = Some(serde_json::from_value(meta("plan")?)?);
        let path = PathBuf::from(&frozen_ref);
        let path = if path.is_absolute() { path } else { dir.join(path) };
        let frozen = load_backbone(&path)?;
        let mut m = DualBranchModel::new(frozen, cfg)?;
        if m.frozen_digest != digest {
            return Err(Error::Contract(format!("frozen backbone at {} does not match the recorded digest", path.display())));
        }
        m.styled_branch_mut().load_checkpoint(&c)?;
        Ok(m)
    }

    pub fn styled_branch_mut(&mut self) -> StyledBranchMut<'_> {
        StyledBranchMut { model: self }
    }
}

fn scene_field(s: &GaussianScene, f: impl Fn(&crate::types::GaussianPrimitive) -> Vec<f64>, width: usize) -> Tensor {
    Tensor::new(&[s.len(), width], s.gaussians.iter().flat_map(f).collect())
}

/// Module view over the trainable parameters.
pub struct StyledBranch<'a> {
    model: &'a DualBranchModel,
}

pub struct StyledBranchMut<'a> {
    model: &'a mut DualBranchModel,
}

impl Module for StyledBranch<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(a) = &self.model.styled_aggregator {
            visit_child("styled_aggregator", a, f);
        }
        visit_child("styled_head", &self.model.styled_head, f);
        self.model.plan.visit(f);
    }
    fn visit_mut(&mut self, _: &mut dyn FnMut(&str, &mut Param)) {
        unreachable!("read-only view")
    }
}

impl Module for StyledBranchMut<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        StyledBranch { model: self.model }.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        let m = &mut *self.model;
        if let Some(a) = &mut m.styled_aggregator {
            visit_child_mut("styled_aggregator", a, f);
        }
        visit_child_mut("styled_head", &mut m.styled_head, f);
        m.plan.visit_mut(f);
    }
}
