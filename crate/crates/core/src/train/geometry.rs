//! Photometric pretraining of the reconstructor on posed scenes.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_factor, Adam, OptimConfig, SceneData, BACKGROUND};
use crate::autograd::{ParamId, Tape};
use crate::backbone::Backbone;
use crate::error::{ensure, Error, Result};
use crate::nn::Module;
use crate::render::{l2_to, render_vars, RenderSettings, SplatVars};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub steps: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Weight of the L1 depth term where ground-truth depth exists.
    pub depth_weight: f64,
    /// Views rendered per step; 0 renders every view.
    pub views_per_step: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            steps: 500,
            seed: 0,
            optim: OptimConfig { lr: 1e-3, ..OptimConfig::default() },
            depth_weight: 0.1,
            views_per_step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryStep {
    pub step: usize,
    pub scene: String,
    pub photometric: f64,
    pub depth: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Parameters updated by pretraining. The patch embedder stays at its
/// random initialization, like a frozen feature encoder, and the camera
/// head is unused while ground-truth cameras are injected.
fn trained(b: &mut Backbone) -> [&mut dyn Module; 3] {
    [&mut b.aggregator, &mut b.gaussian_head, &mut b.depth_head]
}

/// Minimizes render-vs-input L2 (plus masked L1 on ground-truth depth)
/// over the given scenes. `on_step` sees every logged step.
pub fn pretrain_geometry(
    backbone: &mut Backbone,
    scenes: &[SceneData],
    cfg: &GeometryConfig,
    mut on_step: impl FnMut(&GeometryStep),
) -> Result<Vec<GeometryStep>> {
    cfg.optim.validate()?;
    ensure!(!scenes.is_empty(), "no scenes to train on");
    ensure!(cfg.depth_weight >= 0.0, "depth_weight must be non-negative");
    for s in scenes {
        s.validate()?;
        ensure!(s.cameras.is_some(), "scene {} has no cameras; pretraining needs posed views", s.name);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::default();
    let settings = RenderSettings::new(BACKGROUND);
    let deg = backbone.cfg.sh_degree;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let cams = scene.cameras.as_deref().expect("checked above");
        let n = scene.views();
        let views: Vec<usize> = if cfg.views_per_step == 0 || cfg.views_per_step >= n {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.views_per_step).into_vec();
            v.sort_unstable();
            v
        };
        let ids: Vec<ParamId> = {
            let b = &*backbone;
            [b.aggregator.param_ids(), b.gaussian_head.param_ids(), b.depth_head.param_ids()].concat()
        };
        let tape = Tape::with_trainable(ids.iter().copied());
        let gt_depth = if backbone.cfg.use_gt_depth { scene.depth.as_deref() } else { None };
        let fwd = backbone.forward(&tape, &scene.images, Some(cams), gt_depth)?;
        let g = &fwd.gaussians;
        let sv = SplatVars { mu: fwd.mu, rot: g.rot, scale: g.scale, opacity: g.opacity, sh: g.sh };
        let mut photo = Vec::with_capacity(views.len());
        for &v in &views {
            let packed = render_vars(&tape, &sv, deg, &cams[v], &settings)?;
            photo.push(l2_to(&tape, packed, &scene.images[v]).reshape(&[1]));
        }
        let photometric = crate::autograd::Var::concat(&photo, 0).mean();
        let depth = match (&scene.depth, backbone.cfg.use_gt_depth) {
            (Some(d), false) if cfg.depth_weight > 0.0 => {
                let target: Vec<f64> = d.concat();
                let mask: Vec<f64> = target.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                let count: f64 = mask.iter().sum();
                (count > 0.0).then(|| {
                    let shape = [target.len(), 1];
                    fwd.depth
                        .sub(tape.constant(Tensor::new(&shape, target)))
                        .abs()
                        .mul(tape.constant(Tensor::new(&shape, mask)))
                        .sum()
                        .scale(1.0 / count)
                })
            }
            _ => None,
        };
        let total = match depth {
            Some(d) => photometric.add(d.scale(cfg.depth_weight)),
            None => photometric,
        };
        let total_v = total.item();
        if !total_v.is_finite() {
            return Err(Error::Numerical(format!(
                "geometry loss is {total_v} at step {step} (photometric {}, depth {:?})",
                photometric.item(),
                depth.map(|d| d.item())
            )));
        }
        let grads = tape.backward(total);
        let (grad_norm, factor) = clip_factor(&grads, &ids, cfg.optim.grad_clip)?;
        let lr = cfg.optim.lr_at(step, cfg.steps);
        adam.tick();
        let entry = GeometryStep {
            step,
            scene: scene.name.clone(),
            photometric: photometric.item(),
            depth: depth.map(|d| d.item()),
            total: total_v,
            grad_norm,
            lr,
        };
        drop(fwd);
        for (i, m) in trained(backbone).into_iter().enumerate() {
            let lr = if i == 0 { lr * cfg.optim.aggregator_lr_mult } else { lr };
            m.visit_mut(&mut |_, p| {
                if let Some(g) = grads.param_id(p.id()) {
                    adam.update(&cfg.optim, p, g, lr, factor);
                }
            });
        }
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}
