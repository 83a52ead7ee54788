//! Synthetic scenes, scene directories and generated style libraries.
//!
//! A scene directory holds
//!
//! ```text
//! scene.json         generation parameters and split tag
//! cameras.json       one CameraModel per view (optional for real data)
//! images/view_NNN.png
//! depth/             checkpoint of per-view depth maps (optional)
//! gt_scene/          ground-truth Gaussians (synthetic scenes only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_scene, Checkpoint};
use crate::error::{ensure, Error, Result};
use crate::imageio;
use crate::render::{render, RenderOutput};
use crate::style::StyleLibrary;
use crate::tensor::Tensor;
use crate::types::{sh_coeff_count, CameraModel, GaussianPrimitive, GaussianScene, ImageTensor};

pub const DEPTH_KIND: &str = "depth";
pub const BACKGROUND: [f64; 3] = [0.0; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_objects: usize,
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    pub fov_y_deg: f64,
    /// Camera ring radius and height above the origin.
    pub radius: f64,
    pub elevation: f64,
    /// Total angle covered by the ring; 360 spreads views evenly.
    pub arc_deg: f64,
    pub split: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            n_objects: 3,
            n_views: 4,
            width: 64,
            height: 64,
            fov_y_deg: 50.0,
            radius: 3.0,
            elevation: 1.0,
            arc_deg: 90.0,
            split: "train".into(),
        }
    }
}

/// Cameras on a horizontal ring looking at the origin.
pub fn ring_cameras(spec: &SyntheticSpec) -> Vec<CameraModel> {
    let full = (spec.arc_deg - 360.0).abs() < 1e-9;
    let steps = if full { spec.n_views } else { spec.n_views.saturating_sub(1).max(1) };
    (0..spec.n_views)
        .map(|i| {
            let a = (spec.arc_deg * i as f64 / steps as f64).to_radians();
            CameraModel::look_at(
                [spec.radius * a.cos(), spec.radius * a.sin(), spec.elevation],
                [0.0; 3],
                [0.0, 0.0, 1.0],
                spec.fov_y_deg,
                spec.width,
                spec.height,
            )
        })
        .collect()
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Ground-truth Gaussians: a checkered floor disc plus `n_objects` striped
/// ellipsoid shells with mild view-dependent colour (SH degree 1).
pub fn synthetic_gaussians(seed: u64, n_objects: usize) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = GaussianScene::new(1);
    let k = sh_coeff_count(1);
    let push = |s: &mut GaussianScene, mu: [f64; 3], scale: f64, rgb: [f64; 3], tilt: [f64; 3]| {
        let mut g = GaussianPrimitive::isotropic(mu, scale, 0.95, rgb);
        g.sh_coeffs.resize(k, [0.0; 3]);
        for (c, t) in g.sh_coeffs[1..].iter_mut().zip(tilt) {
            *c = [t; 3];
        }
        s.push(g, 0, 1.0);
    };
    let floor_z = -0.45;
    let step = 0.09;
    let n = (1.4 / step) as i64;
    for i in -n..=n {
        for j in -n..=n {
            let (x, y) = (i as f64 * step, j as f64 * step);
            if x * x + y * y > 1.4 * 1.4 {
                continue;
            }
            let light = if ((i.div_euclid(3) + j.div_euclid(3)) & 1) == 0 { 0.65 } else { 0.35 };
            push(&mut s, [x, y, floor_z], 0.06, [light, light * 0.95, light * 0.85], [0.0; 3]);
        }
    }
    for _ in 0..n_objects {
        let centre = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.2..0.1)];
        let radii = [rng.random_range(0.18..0.35), rng.random_range(0.18..0.35), rng.random_range(0.2..0.4)];
        let hue: f64 = rng.random();
        let (base, stripe) = (hsv(hue, 0.75, 0.85), hsv(hue + 0.5, 0.5, 0.9));
        let freq = rng.random_range(3.0..7.0);
        let tilt = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
        // Fibonacci sphere gives an even shell.
        let count = 160;
        for m in 0..count {
            let z = 1.0 - 2.0 * (m as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = m as f64 * std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let d = [r * phi.cos(), r * phi.sin(), z];
            let mu = [centre[0] + radii[0] * d[0], centre[1] + radii[1] * d[1], centre[2] + radii[2] * d[2]];
            let rgb = if (freq * z).sin() > 0.0 { base } else { stripe };
            push(&mut s, mu, 0.055, rgb, tilt);
        }
    }
    s.round_to_f32();
    s
}

/// One scene loaded from disk.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub name: String,
    pub dir: PathBuf,
    pub images: Vec<ImageTensor>,
    pub cameras: Option<Vec<CameraModel>>,
    /// Per-view row-major depth; 0 marks pixels without a surface.
    pub depth: Option<Vec<Vec<f64>>>,
    pub split: String,
}

impl SceneData {
    pub fn views(&self) -> usize {
        self.images.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.images.len() >= 2, "scene {} has {} views; at least 2 are required", self.name, self.images.len());
        let (w, h) = (self.images[0].width(), self.images[0].height());
        for (i, im) in self.images.iter().enumerate() {
            ensure!(
                im.width() == w && im.height() == h,
                "scene {}: view {i} is {}x{}, view 0 is {w}x{h}",
                self.name,
                im.width(),
                im.height()
            );
        }
        if let Some(c) = &self.cameras {
            ensure!(c.len() == self.images.len(), "scene {}: {} cameras for {} views", self.name, c.len(), self.images.len());
        }
        if let Some(d) = &self.depth {
            ensure!(
                d.len() == self.images.len() && d.iter().all(|m| m.len() == w * h),
                "scene {}: depth maps do not match the views",
                self.name
            );
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let img_dir = dir.join("images");
        let mut paths: Vec<PathBuf> = fs::read_dir(&img_dir)
            .map_err(|e| Error::io(&img_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let images = paths.iter().map(|p| imageio::read_png(p)).collect::<Result<Vec<_>>>()?;
        let cam_path = dir.join("cameras.json");
        let cameras = if cam_path.exists() { Some(read_json(&cam_path)?) } else { None };
        let depth_dir = dir.join("depth");
        let depth = if depth_dir.exists() {
            let c = Checkpoint::load(&depth_dir)?;
            ensure!(c.kind == DEPTH_KIND, "{} is not a depth checkpoint", depth_dir.display());
            Some((0..images.len()).map(|i| c.get(&view_name(i)).map(|t| t.data().to_vec())).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let meta_path = dir.join("scene.json");
        let split = if meta_path.exists() {
            let v: serde_json::Value = read_json(&meta_path)?;
            v.get("split").and_then(|s| s.as_str()).unwrap_or("train").to_string()
        } else {
            "train".into()
        };
        let s = SceneData { name, dir, images, cameras, depth, split };
        s.validate()?;
        Ok(s)
    }

    /// Keeps only the listed views.
    pub fn select(&self, views: &[usize]) -> Result<SceneData> {
        for &v in views {
            ensure!(v < self.views(), "view {v} out of range for {} views", self.views());
        }
        fn pick<T: Clone>(x: &[T], views: &[usize]) -> Vec<T> {
            views.iter().map(|&v| x[v].clone()).collect()
        }
        Ok(SceneData {
            images: pick(&self.images, views),
            cameras: self.cameras.as_ref().map(|c| pick(c, views)),
            depth: self.depth.as_ref().map(|d| pick(d, views)),
            ..self.clone()
        })
    }
}

fn view_name(i: usize) -> String {
    format!("view_{i:03}")
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json(p: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Ground truth for a spec, without touching disk.
pub fn synthetic_views(spec: &SyntheticSpec) -> Result<(GaussianScene, Vec<CameraModel>, Vec<RenderOutput>)> {
    ensure!(spec.n_views >= 2, "n_views must be at least 2");
    let scene = synthetic_gaussians(spec.seed, spec.n_objects);
    let cams = ring_cameras(spec);
    let renders = cams.iter().map(|c| render(&scene, c, BACKGROUND)).collect::<Result<Vec<_>>>()?;
    Ok((scene, cams, renders))
}

/// Writes a synthetic scene directory; identical output for identical
/// specs.
pub fn make_synthetic_scene(dir: impl AsRef<Path>, spec: &SyntheticSpec) -> Result<SceneData> {
    let dir = dir.as_ref();
    let (scene, cams, renders) = synthetic_views(spec)?;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut depth = Checkpoint::new(DEPTH_KIND);
    for (i, r) in renders.iter().enumerate() {
        imageio::write_png(&img_dir.join(format!("{}.png", view_name(i))), &r.color)?;
        let d = r.depth.iter().zip(&r.alpha).map(|(&d, &a)| if a > 0.5 { d } else { 0.0 }).collect();
        depth.insert(view_name(i), Tensor::new(&[spec.height, spec.width], d));
    }
    depth.save(&dir.join("depth"))?;
    write_json(&dir.join("cameras.json"), &cams)?;
    write_json(&dir.join("scene.json"), spec)?;
    save_scene(&scene, &dir.join("gt_scene"))?;
    SceneData::load(dir)
}

/// All scenes under `root` (every subdirectory with an `images/` folder),
/// in name order.
#[derive(Clone, Debug, Default)]
pub struct SceneDataset {
    pub scenes: Vec<SceneData>,
}

impl SceneDataset {
    pub fn load(dirs: &[PathBuf]) -> Result<Self> {
        ensure!(!dirs.is_empty(), "no scene directories given");
        Ok(SceneDataset { scenes: dirs.iter().map(SceneData::load).collect::<Result<Vec<_>>>()? })
    }

    /// Scene directories directly under `root`; style libraries are skipped.
    pub fn discover(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("images").is_dir() && !p.join("captions.jsonl").exists())
            .collect();
        dirs.sort();
        Self::load(&dirs)
    }

    pub fn split(&self, tag: &str) -> Vec<&SceneData> {
        self.scenes.iter().filter(|s| s.split == tag).collect()
    }
}

/// Procedural style images with short captions that name their colours.
pub fn style_catalog(size: usize) -> Vec<(String, ImageTensor, String)> {
    let f = size as f64;
    let pattern = |name: &str, caption: &str, p: &dyn Fn(f64, f64) -> [f64; 3]| {
        (name.to_string(), ImageTensor::from_fn(size, size, |x, y| p(x as f64 / f, y as f64 / f)), caption.to_string())
    };
    let tau = std::f64::consts::TAU;
    vec![
        pattern("blue_stripes", "blue and white diagonal stripes", &|x, y| {
            if ((x + y) * 6.0).fract() < 0.5 { [0.08, 0.15, 0.8] } else { [0.9, 0.92, 0.97] }
        }),
        pattern("orange_dots", "orange dots on a brown ground", &|x, y| {
            let (dx, dy) = ((x * 5.0).fract() - 0.5, (y * 5.0).fract() - 0.5);
            if dx * dx + dy * dy < 0.09 { [0.95, 0.5, 0.08] } else { [0.4, 0.22, 0.1] }
        }),
        pattern("green_waves", "green and yellow waves", &|x, y| {
            let t = 0.5 + 0.5 * (tau * (3.0 * x + 0.6 * (tau * 2.0 * y).sin())).sin();
            [0.15 + 0.8 * t, 0.65 + 0.25 * t, 0.15]
        }),
        pattern("purple_checker", "purple and pink checker", &|x, y| {
            if (((x * 4.0) as i64 + (y * 4.0) as i64) & 1) == 0 { [0.45, 0.1, 0.6] } else { [0.95, 0.55, 0.7] }
        }),
        pattern("red_gradient", "red fading into black", &|x, _| [0.9 * (1.0 - x) + 0.03, 0.05, 0.05]),
        pattern("teal_grid", "teal grid on white", &|x, y| {
            if (x * 8.0).fract() < 0.2 || (y * 8.0).fract() < 0.2 { [0.1, 0.55, 0.55] } else { [0.96, 0.96, 0.96] }
        }),
        pattern("gold_noise", "gold and black speckles", &|x, y| {
            let h = ((x * 977.0 + y * 131.0).sin() * 43758.545).fract().abs();
            if h > 0.5 { [0.85, 0.68, 0.2] } else { [0.03, 0.03, 0.03] }
        }),
        pattern("gray_rings", "gray and white rings", &|x, y| {
            let r = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
            if (r * 10.0).fract() < 0.5 { [0.5, 0.5, 0.5] } else { [0.97, 0.97, 0.97] }
        }),
    ]
}

/// Writes the first `count` catalogue styles as a library.
pub fn make_style_library(dir: impl AsRef<Path>, count: usize, size: usize) -> Result<StyleLibrary> {
    let cat = style_catalog(size);
    ensure!(count >= 1 && count <= cat.len(), "style count must lie in 1..={}", cat.len());
    StyleLibrary::write(dir, &cat[..count])
}
