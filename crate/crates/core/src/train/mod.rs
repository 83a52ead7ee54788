//! Training: synthetic data, geometry pretraining of the backbone and the
//! style fine-tuning loop.

mod data;
mod geometry;
mod style;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use data::{
    make_style_library, make_synthetic_scene, ring_cameras, style_catalog, synthetic_gaussians, synthetic_views,
    SceneData, SceneDataset, SyntheticSpec, BACKGROUND, DEPTH_KIND,
};
pub use geometry::{pretrain_geometry, GeometryConfig, GeometryStep};
pub use style::{style_probe, Ablation, StepLog, StyleProbe, StyleTrainConfig, StyleTrainer};

use crate::autograd::{Gradients, Param, ParamId};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{ensure, Error, Result};
use crate::model::{backbone_checkpoint, load_backbone, DualBranchModel, ModelConfig};
use crate::style::{StyleLibrary, ToyProvider};
use crate::tensor::Tensor;

/// Adam with per-call learning rates, gradient clipping done by the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Head and injector learning rate.
    pub lr: f64,
    /// Aggregator learning rate as a multiple of `lr`.
    pub aggregator_lr_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Cosine schedule floor as a fraction of the base rate.
    pub min_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-4, aggregator_lr_mult: 0.3, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: 1.0, min_lr_ratio: 0.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive, got {}", self.lr);
        ensure!(self.aggregator_lr_mult >= 0.0, "aggregator_lr_mult must be non-negative");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must lie in [0, 1)");
        ensure!(self.eps > 0.0, "eps must be positive");
        ensure!(self.grad_clip >= 0.0, "grad_clip must be non-negative");
        ensure!((0.0..=1.0).contains(&self.min_lr_ratio), "min_lr_ratio must lie in [0, 1]");
        Ok(())
    }

    /// Cosine-annealed rate for 0-based `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let t = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        let c = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * c)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Adam {
    t: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    /// Advances the shared step counter; call once per optimizer step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, cfg: &OptimConfig, p: &mut Param, g: &Tensor, lr: f64, scale: f64) {
        let t = self.t.max(1) as i32;
        let (m, v) = self.moments.entry(p.id()).or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let w = p.value_mut().data_mut();
        for (((w, m), v), &g) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            let g = g * scale;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
}

/// Global L2 norm of the gradients of `ids`, and the factor that clips it
/// to `limit` (1 when within the limit or when `limit` is 0).
pub fn clip_factor(grads: &Gradients, ids: &[ParamId], limit: f64) -> Result<(f64, f64)> {
    let mut sq = 0.0;
    for &id in ids {
        if let Some(g) = grads.param_id(id) {
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numerical(format!("gradient norm is {norm}")));
    }
    let f = if limit > 0.0 && norm > limit { limit / norm } else { 1.0 };
    Ok((norm, f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenes: Vec<PathBuf>,
    pub styles: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { scenes: vec![PathBuf::from("data/scenes/scene_000")], styles: PathBuf::from("data/styles") }
    }
}

/// Contents of a `train --config` file. Relative paths resolve against the
/// file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    /// Start from a saved backbone instead of a fresh one.
    pub backbone_checkpoint: Option<PathBuf>,
    pub backbone: BackboneConfig,
    /// Geometry pretraining, run before style training when present.
    pub geometry: Option<GeometryConfig>,
    pub model: ModelConfig,
    pub style: StyleTrainConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        self.data.scenes.iter_mut().for_each(fix);
        fix(&mut self.data.styles);
        if let Some(p) = &mut self.backbone_checkpoint {
            fix(p);
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub geometry_steps: usize,
    pub style_steps: usize,
    pub first: Option<StepLog>,
    pub last: Option<StepLog>,
    pub frozen_digest: String,
}

/// Seed of the toy embedding provider paired with trained models. Anything
/// that embeds styles for a model must use the same provider.
pub const PROVIDER_SEED: u64 = 0;

pub fn provider_for(cfg: &ModelConfig) -> ToyProvider {
    ToyProvider::new(cfg.d_s, PROVIDER_SEED)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Runs a full training configuration, writing into `out_dir`:
/// `backbone/`, `geometry.jsonl` (if pretraining ran), `model/` and
/// `metrics.jsonl`. On a numerical failure the last good model is saved
/// to `model/` before the error is returned.
pub fn run(cfg: &TrainConfig) -> Result<RunSummary> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = SceneDataset::load(&cfg.data.scenes)?;
    let mut backbone = match &cfg.backbone_checkpoint {
        Some(p) => load_backbone(p)?,
        None => {
            let mut b = Backbone::new(cfg.backbone.clone())?;
            b.round_to_f32();
            b
        }
    };
    let mut geometry_steps = 0;
    if let Some(g) = &cfg.geometry {
        let log = pretrain_geometry(&mut backbone, &dataset.scenes, g, |_| {})?;
        geometry_steps = log.len();
        backbone.round_to_f32();
        write_jsonl(&out.join("geometry.jsonl"), &log)?;
    }
    backbone_checkpoint(&backbone)?.save(&out.join("backbone"))?;

    let library = StyleLibrary::load(&cfg.data.styles)?;
    let mut mcfg = cfg.model.clone();
    mcfg.all_geom_features = cfg.style.ablation.all_geom_features;
    let provider = provider_for(&mcfg);
    let model = DualBranchModel::new(backbone, mcfg)?;
    let mut trainer = StyleTrainer::new(model, &dataset.scenes, &library, &provider, cfg.style.clone())?;
    let metrics = out.join("metrics.jsonl");
    let mut f = fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut logs: Vec<StepLog> = Vec::new();
    let mut failure = None;
    for _ in 0..cfg.style.steps {
        match trainer.step() {
            Ok(l) => {
                writeln!(f, "{}", serde_json::to_string(&l)?).map_err(|e| Error::io(&metrics, e))?;
                logs.push(l);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let model = trainer.into_model();
    model.save(out.join("model"), "../backbone")?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunSummary {
        out_dir: out.clone(),
        geometry_steps,
        style_steps: logs.len(),
        first: logs.first().cloned(),
        last: logs.last().cloned(),
        frozen_digest: model.frozen_digest().to_string(),
    })
}

#[cfg(test)]
mod tests;
