//! Style fine-tuning of the dual-branch model.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_factor, Adam, OptimConfig, SceneData, BACKGROUND};
use crate::autograd::{ParamId, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Error, Result};
use crate::losses::{
    clip_directional_loss, clip_patch_loss, content_loss, depth_consistency_loss, sample_crops, style_loss_to,
    FeatureExtractor, LossTerms, LossVars, LossWeights, PatchConfig, StyleTarget,
};
use crate::model::{DualBranchModel, Reconstruction, MODEL_KIND};
use crate::nn::Module;
use crate::render::{render, render_vars, unpack, RenderOutput, RenderSettings};
use crate::style::{embed_image, Modality, StyleEmbedding, StyleLibrary, StyleProvider};
use crate::tensor::Tensor;
use crate::types::ImageTensor;
use crate::warp::Crop;

/// Loss-composition switches for ablation runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_style_loss: bool,
    pub no_clip_losses: bool,
    /// Scale and opacity also come from the style branch. Must match the
    /// model's own setting.
    pub all_geom_features: bool,
    /// Every batch is image-conditioned.
    pub no_text: bool,
    /// Text batches skip the style-statistics term.
    pub text_drops_style_loss: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleTrainConfig {
    /// Desk-scale default; large-scale runs use on the order of 90k.
    pub steps: usize,
    pub seed: u64,
    pub scenes_per_batch: usize,
    /// Views rendered per scene and step; the style branch still sees all
    /// views of the scene.
    pub views_per_scene: usize,
    /// Batches per modality before switching; 1 alternates every batch.
    pub modality_period: usize,
    /// Frozen-weight digest check interval; 0 checks only at the end.
    pub check_frozen_every: usize,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub patch: PatchConfig,
    pub ablation: Ablation,
}

impl Default for StyleTrainConfig {
    fn default() -> Self {
        StyleTrainConfig {
            steps: 300,
            seed: 0,
            scenes_per_batch: 1,
            views_per_scene: 2,
            modality_period: 1,
            check_frozen_every: 50,
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            patch: PatchConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl StyleTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.weights.validate()?;
        ensure!(self.scenes_per_batch >= 1, "scenes_per_batch must be at least 1");
        ensure!(self.views_per_scene >= 1, "views_per_scene must be at least 1");
        ensure!(self.modality_period >= 1, "modality_period must be at least 1");
        let a = &self.ablation;
        ensure!(!(a.no_style_loss && a.no_clip_losses && self.weights.content == 0.0), "every loss term is disabled");
        Ok(())
    }

    /// Conditioning modality of 0-based batch `step`.
    pub fn modality(&self, step: usize) -> Modality {
        if self.ablation.no_text || (step / self.modality_period) % 2 == 0 {
            Modality::Image
        } else {
            Modality::Text
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub content: Option<f64>,
    pub style: Option<f64>,
    pub clip_global: Option<f64>,
    pub clip_patch: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub depth_consistency: Option<f64>,
    pub modality: Modality,
    pub scenes: Vec<String>,
    pub styles: Vec<String>,
    pub grad_norm: f64,
}

struct PreparedScene {
    name: String,
    rec: Reconstruction,
    frozen: Vec<RenderOutput>,
}

struct PreparedStyle {
    id: String,
    image: ImageTensor,
    z_image: Vec<f64>,
    z_text: Vec<f64>,
    target: StyleTarget,
}

/// Drives style training one step at a time.
pub struct StyleTrainer<'p> {
    model: DualBranchModel,
    provider: &'p dyn StyleProvider,
    phi: FeatureExtractor,
    scenes: Vec<PreparedScene>,
    styles: Vec<PreparedStyle>,
    cfg: StyleTrainConfig,
    settings: RenderSettings,
    rng: ChaCha8Rng,
    adam: Adam,
    step: usize,
    ids: Vec<ParamId>,
    agg_ids: Vec<ParamId>,
    last_good: Option<Checkpoint>,
}

/// Style loss and mean colour of a model's renders under one embedding.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StyleProbe {
    pub style_loss: f64,
    pub channel_means: [f64; 3],
}

/// Renders every view of `rec` stylized with `z` and averages the style
/// loss against `style` and the per-channel colour means.
pub fn style_probe(
    model: &DualBranchModel,
    rec: &Reconstruction,
    phi: &FeatureExtractor,
    z: &StyleEmbedding,
    style: &ImageTensor,
) -> Result<StyleProbe> {
    let scene = model.stylize(rec, z)?;
    let (w, h) = (rec.images[0].width(), rec.images[0].height());
    let target = StyleTarget::new(phi, style, w, h)?;
    let mut loss = 0.0;
    let mut means = [0.0; 3];
    for cam in &rec.cameras {
        let r = render(&scene, cam, BACKGROUND)?;
        let tape = Tape::no_grad();
        loss += style_loss_to(&tape, phi, tape.constant(r.color.to_tensor()), &target)?.item();
        let m = r.color.channel_means();
        for c in 0..3 {
            means[c] += m[c];
        }
    }
    let n = rec.cameras.len() as f64;
    Ok(StyleProbe { style_loss: loss / n, channel_means: means.map(|m| m / n) })
}

impl<'p> StyleTrainer<'p> {
    /// Reconstructs every scene once with the frozen branch and caches
    /// frozen renders and style statistics.
    pub fn new(
        model: DualBranchModel,
        scenes: &[SceneData],
        library: &StyleLibrary,
        provider: &'p dyn StyleProvider,
        cfg: StyleTrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        ensure!(!scenes.is_empty(), "no scenes to train on");
        ensure!(!library.is_empty(), "the style library is empty");
        ensure!(
            model.cfg.all_geom_features == cfg.ablation.all_geom_features,
            "ablation.all_geom_features ({}) differs from the model setting ({})",
            cfg.ablation.all_geom_features,
            model.cfg.all_geom_features
        );
        ensure!(provider.dim() == model.cfg.d_s, "provider dimension {} != model d_s {}", provider.dim(), model.cfg.d_s);
        let phi = FeatureExtractor::default();
        let settings = RenderSettings::new(BACKGROUND);
        let mut prepared = Vec::with_capacity(scenes.len());
        for s in scenes {
            s.validate()?;
            let rec = model.reconstruct(&s.images, s.cameras.as_deref(), s.depth.as_deref())?;
            let frozen = rec.cameras.iter().map(|c| render(&rec.scene, c, BACKGROUND)).collect::<Result<Vec<_>>>()?;
            prepared.push(PreparedScene { name: s.name.clone(), rec, frozen });
        }
        let (w, h) = (scenes[0].images[0].width(), scenes[0].images[0].height());
        let mut styles = Vec::with_capacity(library.len());
        for e in &library.entries {
            let image = library.load_image(&e.id)?;
            styles.push(PreparedStyle {
                id: e.id.clone(),
                z_image: embed_image(provider, &image)?,
                z_text: provider.embed_text(&e.caption)?,
                target: StyleTarget::new(&phi, &image, w, h)?,
                image,
            });
        }
        let (main, agg) = model.trainable_ids();
        let ids = [main, agg.clone()].concat();
        Ok(StyleTrainer {
            model,
            provider,
            phi,
            scenes: prepared,
            styles,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            settings,
            adam: Adam::default(),
            step: 0,
            ids,
            agg_ids: agg,
            last_good: None,
        })
    }

    pub fn model(&self) -> &DualBranchModel {
        &self.model
    }

    pub fn into_model(self) -> DualBranchModel {
        self.model
    }

    /// Steps taken so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Cached frozen reconstruction of training scene `i`.
    pub fn reconstruction(&self, i: usize) -> &Reconstruction {
        &self.scenes[i].rec
    }

    pub fn style_ids(&self) -> Vec<&str> {
        self.styles.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn style_image(&self, i: usize) -> &ImageTensor {
        &self.styles[i].image
    }

    pub fn feature_extractor(&self) -> &FeatureExtractor {
        &self.phi
    }

    fn check_frozen(&self) -> Result<()> {
        let now = self.model.current_frozen_digest()?;
        if now != self.model.frozen_digest() {
            return Err(Error::Contract(format!(
                "frozen weights changed during training at step {}: {} -> {now}",
                self.step,
                self.model.frozen_digest()
            )));
        }
        Ok(())
    }

    fn losses<'t>(
        &self,
        tape: &'t Tape,
        scene: &PreparedScene,
        style: &PreparedStyle,
        modality: Modality,
        views: &[usize],
        crops: &[Vec<Crop>],
    ) -> Result<LossVars<'t>> {
        let a = &self.cfg.ablation;
        let z_s = match modality {
            Modality::Text => &style.z_text,
            _ => &style.z_image,
        };
        let z_photo = &self.provider.neutral().vec;
        let z = tape.constant(Tensor::new(&[z_s.len()], z_s.clone()));
        let styled = self.model.stylize_vars(tape, &scene.rec, z)?;
        let sv = self.model.adapt_vars(tape, &scene.rec, &styled);
        let deg = self.model.frozen.cfg.sh_degree;
        let use_style = !a.no_style_loss && !(modality == Modality::Text && a.text_drops_style_loss);
        let mut acc: Vec<[Option<Var<'t>>; 5]> = Vec::with_capacity(views.len());
        for (k, &v) in views.iter().enumerate() {
            let cam = &scene.rec.cameras[v];
            let (w, h) = (cam.width, cam.height);
            let out = unpack(render_vars(tape, &sv, deg, cam, &self.settings)?, w, h);
            let frozen = &scene.frozen[v];
            let original = tape.constant(frozen.color.to_tensor());
            let content = content_loss(tape, &self.phi, out.color, original)?;
            let style_t = if use_style { Some(style_loss_to(tape, &self.phi, out.color, &style.target)?) } else { None };
            let (clip, patch) = if a.no_clip_losses {
                (None, None)
            } else {
                (
                    Some(clip_directional_loss(tape, self.provider, original, out.color, z_s, z_photo)?),
                    Some(clip_patch_loss(tape, self.provider, original, out.color, z_s, z_photo, &crops[k])?),
                )
            };
            let depth = depth_consistency_loss(
                tape,
                out.depth,
                &Tensor::new(&[w * h, 1], frozen.depth.clone()),
                &Tensor::new(&[w * h, 1], frozen.alpha.clone()),
            )?;
            acc.push([Some(content), style_t, clip, patch, Some(depth)]);
        }
        let mean = |i: usize| -> Option<Var<'t>> {
            let parts: Vec<Var<'t>> = acc.iter().filter_map(|t| t[i]).map(|v| v.reshape(&[1])).collect();
            (!parts.is_empty()).then(|| Var::concat(&parts, 0).mean())
        };
        Ok(LossVars {
            content: mean(0),
            style: mean(1),
            clip_global: mean(2),
            clip_patch: mean(3),
            depth_consistency: mean(4),
        })
    }

    /// One optimizer step. On a non-finite loss or gradient the styled
    /// branch is restored to the last parameters that gave a finite loss
    /// and an error is returned.
    pub fn step(&mut self) -> Result<StepLog> {
        if self.cfg.check_frozen_every > 0 && self.step % self.cfg.check_frozen_every == 0 {
            self.check_frozen()?;
        }
        let step = self.step;
        let modality = self.cfg.modality(step);
        let mut picks = Vec::with_capacity(self.cfg.scenes_per_batch);
        for _ in 0..self.cfg.scenes_per_batch {
            let si = self.rng.random_range(0..self.scenes.len());
            let ti = self.rng.random_range(0..self.styles.len());
            let n = self.scenes[si].rec.images.len();
            let k = self.cfg.views_per_scene.min(n);
            let mut views = sample(&mut self.rng, n, k).into_vec();
            views.sort_unstable();
            let cam = &self.scenes[si].rec.cameras[0];
            let crops = views
                .iter()
                .map(|_| sample_crops(cam.width, cam.height, &self.cfg.patch, &mut self.rng))
                .collect::<Result<Vec<_>>>()?;
            picks.push((si, ti, views, crops));
        }
        let tape = Tape::with_trainable(self.ids.iter().copied());
        let mut totals = Vec::with_capacity(picks.len());
        let mut terms: Vec<LossTerms> = Vec::with_capacity(picks.len());
        for (si, ti, views, crops) in &picks {
            let lv = self.losses(&tape, &self.scenes[*si], &self.styles[*ti], modality, views, crops)?;
            terms.push(lv.values());
            totals.push(lv.total(&self.cfg.weights).ok_or_else(|| Error::Validation("no loss term is active".into()))?);
        }
        let total = Var::concat(&totals.iter().map(|t| t.reshape(&[1])).collect::<Vec<_>>(), 0).mean();
        let total_v = total.item();
        let avg = |f: fn(&LossTerms) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = terms.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let lr = self.cfg.optim.lr_at(step, self.cfg.steps);
        let mut log = StepLog {
            step,
            content: avg(|t| t.content),
            style: avg(|t| t.style),
            clip_global: avg(|t| t.clip_global),
            clip_patch: avg(|t| t.clip_patch),
            total: total_v,
            lr,
            depth_consistency: avg(|t| t.depth_consistency),
            modality,
            scenes: picks.iter().map(|p| self.scenes[p.0].name.clone()).collect(),
            styles: picks.iter().map(|p| self.styles[p.1].id.clone()).collect(),
            grad_norm: 0.0,
        };
        if !total_v.is_finite() {
            return Err(self.halt(&log, "loss"));
        }
        let grads = tape.backward(total);
        let (norm, factor) = match clip_factor(&grads, &self.ids, self.cfg.optim.grad_clip) {
            Ok(x) => x,
            Err(_) => return Err(self.halt(&log, "gradient")),
        };
        log.grad_norm = norm;
        // Current parameters gave a finite loss: they are the fallback if
        // the update below leads somewhere non-finite.
        self.last_good = Some(self.model.styled_branch().to_checkpoint(MODEL_KIND));
        self.adam.tick();
        let agg_lr = lr * self.cfg.optim.aggregator_lr_mult;
        let optim = self.cfg.optim.clone();
        let agg_ids = &self.agg_ids;
        let adam = &mut self.adam;
        self.model.styled_branch_mut().visit_mut(&mut |_, p| {
            if let Some(g) = grads.param_id(p.id()) {
                let lr = if agg_ids.contains(&p.id()) { agg_lr } else { lr };
                adam.update(&optim, p, g, lr, factor);
            }
        });
        self.step += 1;
        if self.cfg.check_frozen_every > 0 && self.step % self.cfg.check_frozen_every == 0 || self.step == self.cfg.steps {
            self.check_frozen()?;
        }
        Ok(log)
    }

    fn halt(&mut self, log: &StepLog, what: &str) -> Error {
        let restored = match &self.last_good {
            Some(c) => self.model.styled_branch_mut().load_checkpoint(c).is_ok(),
            None => false,
        };
        Error::Numerical(format!(
            "non-finite {what} at step {} (content {:?}, style {:?}, clip_global {:?}, clip_patch {:?}, total {}); {}",
            log.step,
            log.content,
            log.style,
            log.clip_global,
            log.clip_patch,
            log.total,
            if restored { "styled branch restored to the last finite step" } else { "no earlier finite step" }
        ))
    }
}
