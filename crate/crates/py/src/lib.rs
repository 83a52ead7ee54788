//! Python bindings: images, cameras, scenes, style embeddings and the
//! dual-branch model, plus data generation, training and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use zs::checkpoint::{load_scene, save_scene};
use zs::eval::{consistency_metric, orbit_path};
use zs::imageio;
use zs::model::{DualBranchModel, Reconstruction as CoreReconstruction};
use zs::render::render;
use zs::style::{embed, interpolate as core_interpolate, StyleEmbedding as CoreEmbedding, StyleSignal};
use zs::train::{make_style_library, make_synthetic_scene, provider_for, run, SyntheticSpec, TrainConfig, BACKGROUND};
use zs::types::validate_scene;
use zs::{CameraModel, Error, GaussianScene, ImageTensor};

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::NotFound(_) => PyFileNotFoundError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Numerical(_) | Error::Contract(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// RGB image with values in [0, 1], stored row-major.
#[pyclass(module = "zerostyle", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Image(ImageTensor);

#[pymethods]
impl Image {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<f64>) -> PyResult<Self> {
        ImageTensor::new(width, height, pixels).map(Image).map_err(err)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        imageio::read_png(&path).map(Image).map_err(err)
    }

    #[staticmethod]
    fn from_png(data: &[u8]) -> PyResult<Self> {
        imageio::decode_png(data).map(Image).map_err(err)
    }

    fn to_png<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = imageio::encode_png(&self.0).map_err(err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        imageio::write_png(&path, &self.0).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    /// Flat `height * width * 3` list.
    #[getter]
    fn pixels(&self) -> Vec<f64> {
        self.0.pixels().to_vec()
    }

    fn __eq__(&self, other: &Image) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.0.width(), self.0.height())
    }
}

/// Pinhole camera with a row-major world-to-camera transform.
#[pyclass(module = "zerostyle", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Camera(CameraModel);

#[pymethods]
impl Camera {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Camera).map_err(json_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(json_err)
    }

    /// Cameras on a circle around the origin, all looking at it.
    #[staticmethod]
    #[pyo3(signature = (n, width, height, radius=3.0, elevation=1.0, arc_deg=180.0, fov_y_deg=50.0))]
    fn orbit(n: usize, width: usize, height: usize, radius: f64, elevation: f64, arc_deg: f64, fov_y_deg: f64) -> Vec<Camera> {
        orbit_path(n, radius, elevation, arc_deg, fov_y_deg, width, height).into_iter().map(Camera).collect()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn world_to_camera(&self) -> Vec<f64> {
        self.0.world_to_camera.to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Camera({}x{}, fx={:.3})", self.0.width, self.0.height, self.0.fx)
    }
}

/// Reads a JSON list of cameras.
#[pyfunction]
fn read_cameras(path: PathBuf) -> PyResult<Vec<Camera>> {
    let text = std::fs::read_to_string(&path).map_err(|e| PyOSError::new_err(format!("{}: {e}", path.display())))?;
    let cams: Vec<CameraModel> = serde_json::from_str(&text).map_err(json_err)?;
    Ok(cams.into_iter().map(Camera).collect())
}

/// A set of 3D Gaussians.
#[pyclass(module = "zerostyle", frozen)]
struct Scene(GaussianScene);

#[pymethods]
impl Scene {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_scene(&path).map(Scene).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_scene(&self.0, &path).map_err(err)
    }

    fn render(&self, py: Python<'_>, camera: &Camera) -> PyResult<Image> {
        py.detach(|| render(&self.0, &camera.0, BACKGROUND)).map(|r| Image(r.color)).map_err(err)
    }

    /// Invariant violations, one message each; empty for a valid scene.
    fn validate(&self) -> Vec<String> {
        validate_scene(&self.0)
            .into_iter()
            .map(|v| match v.index {
                Some(i) => format!("gaussian {i} {}: {}", v.field, v.message),
                None => format!("{}: {}", v.field, v.message),
            })
            .collect()
    }

    #[getter]
    fn sh_degree(&self) -> usize {
        self.0.sh_degree
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Scene({} gaussians, sh_degree={})", self.0.len(), self.0.sh_degree)
    }
}

#[pyclass(module = "zerostyle", frozen, skip_from_py_object)]
#[derive(Clone)]
struct StyleEmbedding(CoreEmbedding);

#[pymethods]
impl StyleEmbedding {
    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.vec.clone()
    }

    #[getter]
    fn modality(&self) -> String {
        format!("{:?}", self.0.modality).to_lowercase()
    }

    #[getter]
    fn provider(&self) -> String {
        self.0.provider.clone()
    }

    fn __len__(&self) -> usize {
        self.0.dim()
    }

    fn __repr__(&self) -> String {
        format!("StyleEmbedding({}, dim={})", self.modality(), self.0.dim())
    }
}

/// `(1 - alpha) * a + alpha * b`, renormalized.
#[pyfunction]
fn interpolate(a: &StyleEmbedding, b: &StyleEmbedding, alpha: f64) -> PyResult<StyleEmbedding> {
    core_interpolate(&a.0, &b.0, alpha).map(StyleEmbedding).map_err(err)
}

/// Frozen-branch outputs for a set of input views, reusable across styles.
#[pyclass(module = "zerostyle", frozen)]
struct Reconstruction(CoreReconstruction);

#[pymethods]
impl Reconstruction {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreReconstruction::load(&path).map(Reconstruction).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn views(&self) -> usize {
        self.0.images.len()
    }

    #[getter]
    fn cameras(&self) -> Vec<Camera> {
        self.0.cameras.iter().cloned().map(Camera).collect()
    }

    /// The unstylized scene.
    #[getter]
    fn scene(&self) -> Scene {
        Scene(self.0.scene.clone())
    }
}

/// A trained model: frozen geometry branch plus the style-conditioned branch.
#[pyclass(module = "zerostyle", frozen)]
struct Model(DualBranchModel);

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        DualBranchModel::load(&path).map(Model).map_err(err)
    }

    #[getter]
    fn frozen_digest(&self) -> String {
        self.0.frozen_digest().to_string()
    }

    fn embed_text(&self, text: &str) -> PyResult<StyleEmbedding> {
        embed(&StyleSignal::Text(text.to_string()), &provider_for(&self.0.cfg)).map(StyleEmbedding).map_err(err)
    }

    fn embed_image(&self, image: &Image) -> PyResult<StyleEmbedding> {
        embed(&StyleSignal::Image(image.0.clone()), &provider_for(&self.0.cfg)).map(StyleEmbedding).map_err(err)
    }

    /// Runs the frozen branch once; the result is rounded to f32 like an
    /// on-disk cache so that results do not depend on where it came from.
    #[pyo3(signature = (images, cameras=None))]
    fn reconstruct(
        &self,
        py: Python<'_>,
        images: Vec<PyRef<'_, Image>>,
        cameras: Option<Vec<PyRef<'_, Camera>>>,
    ) -> PyResult<Reconstruction> {
        let images: Vec<ImageTensor> = images.iter().map(|i| i.0.clone()).collect();
        let cams: Option<Vec<CameraModel>> = cameras.map(|c| c.iter().map(|c| c.0.clone()).collect());
        let mut rec = py.detach(|| self.0.reconstruct(&images, cams.as_deref(), None)).map_err(err)?;
        rec.round_to_f32();
        Ok(Reconstruction(rec))
    }

    fn stylize(&self, py: Python<'_>, rec: &Reconstruction, style: &StyleEmbedding) -> PyResult<Scene> {
        py.detach(|| self.0.stylize(&rec.0, &style.0)).map(Scene).map_err(err)
    }

    fn stylize_interpolated(
        &self,
        py: Python<'_>,
        rec: &Reconstruction,
        a: &StyleEmbedding,
        b: &StyleEmbedding,
        alpha: f64,
    ) -> PyResult<Scene> {
        py.detach(|| self.0.stylize_interpolated(&rec.0, &a.0, &b.0, alpha)).map(Scene).map_err(err)
    }

    /// Feature extraction, aggregator and head run counts so far.
    fn counters(&self) -> (u64, u64, u64) {
        let c = self.0.counters.snapshot();
        (c.feature_extractions, c.aggregator_runs, c.head_runs)
    }
}

/// Writes a synthetic scene (images/, cameras.json, depth) to `path`.
#[pyfunction]
#[pyo3(signature = (path, seed=0, views=4, size=64))]
fn make_scene(path: PathBuf, seed: u64, views: usize, size: usize) -> PyResult<(Vec<Image>, Vec<Camera>)> {
    let spec = SyntheticSpec { seed, n_views: views, width: size, height: size, ..Default::default() };
    let data = make_synthetic_scene(&path, &spec).map_err(err)?;
    let cams = data.cameras.unwrap_or_default().into_iter().map(Camera).collect();
    Ok((data.images.into_iter().map(Image).collect(), cams))
}

/// Writes `count` procedural styles with captions; returns their ids.
#[pyfunction]
#[pyo3(signature = (path, count=8, size=64))]
fn make_styles(path: PathBuf, count: usize, size: usize) -> PyResult<Vec<String>> {
    let lib = make_style_library(&path, count, size).map_err(err)?;
    Ok(lib.entries.into_iter().map(|e| e.id).collect())
}

/// Runs a TOML training config; returns the run summary as JSON.
#[pyfunction]
fn train(py: Python<'_>, config: PathBuf) -> PyResult<String> {
    let cfg = TrainConfig::load(&config).map_err(err)?;
    let summary = py.detach(|| run(&cfg)).map_err(err)?;
    serde_json::to_string(&summary).map_err(json_err)
}

/// Depth-warp consistency of `scene` along `cameras`; returns the report
/// as JSON.
#[pyfunction]
#[pyo3(signature = (scene, cameras, short_gap=1, long_gap=7))]
fn consistency(py: Python<'_>, scene: &Scene, cameras: Vec<PyRef<'_, Camera>>, short_gap: usize, long_gap: usize) -> PyResult<String> {
    let cams: Vec<CameraModel> = cameras.iter().map(|c| c.0.clone()).collect();
    let report = py
        .detach(|| {
            let renders = cams.iter().map(|c| render(&scene.0, c, BACKGROUND)).collect::<zs::Result<Vec<_>>>()?;
            consistency_metric(&renders, &cams, short_gap, long_gap)
        })
        .map_err(err)?;
    serde_json::to_string(&report).map_err(json_err)
}

#[pymodule]
fn zerostyle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<Camera>()?;
    m.add_class::<Scene>()?;
    m.add_class::<StyleEmbedding>()?;
    m.add_class::<Reconstruction>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(read_cameras, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(make_scene, m)?)?;
    m.add_function(wrap_pyfunction!(make_styles, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(consistency, m)?)?;
    Ok(())
}
