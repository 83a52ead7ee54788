//! Operations shared by the command line and the HTTP service.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use zerostyle::eval::{consistency_metric, orbit_path, ConsistencyReport};
use zerostyle::imageio;
use zerostyle::model::{DualBranchModel, Reconstruction};
use zerostyle::render::render;
use zerostyle::style::{embed, interpolate, StyleEmbedding, StyleProvider, StyleSignal};
use zerostyle::train::{
    make_style_library, make_synthetic_scene, GeometryConfig, OptimConfig, SceneData, StyleTrainConfig,
    SyntheticSpec, TrainConfig, BACKGROUND,
};
use zerostyle::backbone::BackboneConfig;
use zerostyle::types::{CameraModel, GaussianScene, ImageTensor};
use zerostyle::{Error, Result};

/// A validated style selection: one style, or two blended by `alpha`
/// (0 is the first style, 1 the second).
#[derive(Clone, Debug)]
pub struct StyleRequest {
    pub first: StyleSignal,
    pub second: Option<(StyleSignal, f64)>,
}

/// One style slot as given by the user: text, image, or (ambiguously) both.
#[derive(Clone, Debug, Default)]
pub struct StyleSlot {
    pub text: Option<String>,
    pub image: Option<ImageTensor>,
}

impl StyleSlot {
    fn is_empty(&self) -> bool {
        self.text.is_none() && self.image.is_none()
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl StyleRequest {
    /// Applies the selection rules. A first slot holding both text and an
    /// image is only accepted with `alpha` and no second slot, and is then
    /// read as a blend from the text to the image.
    pub fn resolve(first: StyleSlot, second: StyleSlot, alpha: Option<f64>) -> Result<Self> {
        if let Some(a) = alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(invalid(format!("alpha must lie in [0, 1], got {a}")));
            }
        }
        let single = |s: StyleSlot, which: &str| -> Result<StyleSignal> {
            match (s.text, s.image) {
                (Some(t), None) => Ok(StyleSignal::Text(t)),
                (None, Some(i)) => Ok(StyleSignal::Image(i)),
                (None, None) => Err(invalid(format!("no {which} style given"))),
                (Some(_), Some(_)) => Err(invalid(format!("{which} style has both text and image"))),
            }
        };
        if first.is_empty() {
            return Err(invalid("no style given: pass a style text or a style image"));
        }
        if first.text.is_some() && first.image.is_some() {
            if !second.is_empty() {
                return Err(invalid("ambiguous style: text, image and a second style were all given"));
            }
            let Some(a) = alpha else {
                return Err(invalid("ambiguous style: both text and image given without alpha"));
            };
            let StyleSlot { text, image } = first;
            return Ok(StyleRequest {
                first: StyleSignal::Text(text.expect("checked")),
                second: Some((StyleSignal::Image(image.expect("checked")), a)),
            });
        }
        let a = single(first, "first")?;
        match (second.is_empty(), alpha) {
            (true, None) => Ok(StyleRequest { first: a, second: None }),
            (true, Some(_)) => Err(invalid("alpha needs a second style")),
            (false, None) => Err(invalid("a second style needs alpha")),
            (false, Some(al)) => Ok(StyleRequest { first: a, second: Some((single(second, "second")?, al)) }),
        }
    }

    pub fn embedding(&self, provider: &dyn StyleProvider) -> Result<StyleEmbedding> {
        let a = embed(&self.first, provider)?;
        match &self.second {
            None => Ok(a),
            Some((b, alpha)) => interpolate(&a, &embed(b, provider)?, *alpha),
        }
    }
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraModel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let cams: Vec<CameraModel> = serde_json::from_str(&text)?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

pub fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.into(), source: e })
}

/// Images (and cameras, when present) from a scene directory with an
/// `images/` folder, or from a flat folder of PNGs. `cameras` overrides.
pub fn load_inputs(dir: &Path, cameras: Option<&Path>) -> Result<(Vec<ImageTensor>, Option<Vec<CameraModel>>)> {
    let (images, cams) = if dir.join("images").is_dir() {
        let s = SceneData::load(dir)?;
        (s.images, s.cameras)
    } else {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::Io { path: dir.into(), source: e })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        (paths.iter().map(|p| imageio::read_png(p)).collect::<Result<Vec<_>>>()?, None)
    };
    let cams = match cameras {
        Some(p) => Some(read_cameras(p)?),
        None => cams,
    };
    if images.is_empty() {
        return Err(invalid(format!("no PNG images in {}", dir.display())));
    }
    if let Some(c) = &cams {
        if c.len() != images.len() {
            return Err(invalid(format!("{} cameras for {} images", c.len(), images.len())));
        }
    }
    Ok((images, cams))
}

/// Reconstructs and rounds the cache to storage precision, so in-memory
/// and on-disk caches stylize identically.
pub fn reconstruct(model: &DualBranchModel, images: &[ImageTensor], cams: Option<&[CameraModel]>) -> Result<Reconstruction> {
    let mut rec = model.reconstruct(images, cams, None)?;
    rec.round_to_f32();
    Ok(rec)
}

pub fn render_views(scene: &GaussianScene, cams: &[CameraModel]) -> Result<Vec<ImageTensor>> {
    cams.iter().map(|c| render(scene, c, BACKGROUND).map(|r| r.color)).collect()
}

/// Cameras for `indices` (all when `None`) out of `cams`.
pub fn select_views(cams: &[CameraModel], indices: Option<&[usize]>) -> Result<Vec<CameraModel>> {
    match indices {
        None => Ok(cams.to_vec()),
        Some(ix) => {
            if ix.is_empty() {
                return Err(invalid("view_indices is empty"));
            }
            ix.iter()
                .map(|&i| {
                    cams.get(i)
                        .cloned()
                        .ok_or_else(|| invalid(format!("view index {i} out of range for {} views", cams.len())))
                })
                .collect()
        }
    }
}

pub fn eval_consistency(scene_dir: &Path, path_file: &Path, short_gap: usize, long_gap: usize) -> Result<ConsistencyReport> {
    let scene = zerostyle::checkpoint::load_scene(scene_dir)?;
    let cams = read_cameras(path_file)?;
    let renders = cams.iter().map(|c| render(&scene, c, BACKGROUND)).collect::<Result<Vec<_>>>()?;
    consistency_metric(&renders, &cams, short_gap, long_gap)
}

#[derive(Clone, Debug)]
pub struct DataOptions {
    pub scenes: usize,
    pub views: usize,
    pub size: usize,
    pub styles: usize,
    pub seed: u64,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions { scenes: 1, views: 4, size: 64, styles: 8, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DataSummary {
    pub scenes: Vec<PathBuf>,
    pub styles: PathBuf,
    pub path: PathBuf,
    pub config: PathBuf,
}

/// Writes synthetic scenes, a style library, a 16-frame orbit camera path
/// and a training config that uses them.
pub fn make_data(out: &Path, opt: &DataOptions) -> Result<DataSummary> {
    if opt.scenes == 0 {
        return Err(invalid("need at least one scene"));
    }
    let mut scenes = Vec::new();
    for i in 0..opt.scenes {
        let spec = SyntheticSpec {
            seed: opt.seed + i as u64,
            n_views: opt.views,
            width: opt.size,
            height: opt.size,
            ..Default::default()
        };
        let dir = out.join(format!("scenes/scene_{i:03}"));
        make_synthetic_scene(&dir, &spec)?;
        scenes.push(dir);
    }
    let styles = out.join("styles");
    make_style_library(&styles, opt.styles, opt.size)?;

    let spec = SyntheticSpec::default();
    let path = out.join("path.json");
    write_json(&path, &orbit_path(16, spec.radius, spec.elevation, 180.0, spec.fov_y_deg, opt.size, opt.size))?;

    let cfg = TrainConfig {
        out_dir: "run".into(),
        data: zerostyle::train::DataConfig {
            scenes: (0..opt.scenes).map(|i| PathBuf::from(format!("scenes/scene_{i:03}"))).collect(),
            styles: "styles".into(),
        },
        backbone: BackboneConfig { image_width: opt.size, image_height: opt.size, ..Default::default() },
        geometry: Some(GeometryConfig { steps: 200, ..Default::default() }),
        style: StyleTrainConfig { steps: 300, optim: OptimConfig { lr: 1e-3, ..Default::default() }, ..Default::default() },
        ..Default::default()
    };
    let config = out.join("train.toml");
    let text = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&config, text).map_err(|e| Error::Io { path: config.clone(), source: e })?;
    Ok(DataSummary { scenes, styles, path, config })
}
