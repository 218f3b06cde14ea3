//! Python bindings over `lgs_core`. Every function is a thin shell over a library call;
//! images and feature maps cross the boundary as flat row-major lists.

use std::path::PathBuf;

use lgs_core::io::{self, ScenePaths};
use lgs_core::losses::{self, LossComponents, Sampling};
use lgs_core::query::EditOp;
use lgs_core::raster::RenderOptions;
use lgs_core::synth::{synth_scene, write_synth, Preset};
use lgs_core::{metrics, query, raster, sparsify, Error, FeatureMap, Image, InstanceMask, LossConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Parse { .. } | Error::Json(_) | Error::Image(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image(data: Vec<f64>, width: usize, height: usize) -> PyResult<Image> {
    Image::from_data(width, height, data).map_err(to_py)
}

/// A Gaussian scene: geometry set plus optional semantic set.
#[pyclass(name = "Scene", module = "lgs", skip_from_py_object)]
struct PyScene {
    inner: lgs_core::Scene,
}

#[pymethods]
impl PyScene {
    /// Reads `<name>.geo.ply` and its `<name>.sem.ply` sibling when present.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = io::read_scene(&ScenePaths::from_geo(&path)).map_err(to_py)?;
        Ok(PyScene { inner })
    }

    /// Writes the geometry set to `path` and the semantic set to its `.sem.ply` sibling.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let sem = match self.inner.sem {
            Some(_) => Some(
                io::ScenePaths::sem_sibling(&path)
                    .ok_or_else(|| PyValueError::new_err("scene with a semantic set needs a .geo.ply path"))?,
            ),
            None => None,
        };
        io::write_scene(&ScenePaths { geo: path, sem }, &self.inner).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(geo={}, sem={}, feat_dim={}, sh_degree={})",
            self.inner.len(),
            self.semantic_count(),
            self.inner.feat_dim,
            self.inner.sh_degree
        )
    }

    #[getter]
    fn feat_dim(&self) -> usize {
        self.inner.feat_dim
    }

    #[getter]
    fn sh_degree(&self) -> usize {
        self.inner.sh_degree
    }

    #[getter]
    fn semantic_count(&self) -> usize {
        self.inner.sem.as_ref().map_or(0, Vec::len)
    }

    /// Invariant violations, one message per breach. Empty when the scene is valid.
    fn violations(&self) -> Vec<String> {
        lgs_core::validate_scene(&self.inner).iter().map(|v| v.to_string()).collect()
    }

    /// Geometry merged at `eps_geo` plus a semantic set at `eps_sem`. Omitted sizes
    /// default to 1% of the scene diagonal and four times that.
    #[pyo3(signature = (eps_geo=None, eps_sem=None))]
    fn sparsify(&self, py: Python<'_>, eps_geo: Option<f64>, eps_sem: Option<f64>) -> PyResult<Self> {
        let (dg, ds) = sparsify::default_eps(&self.inner);
        let (g, s) = (eps_geo.unwrap_or(dg), eps_sem.unwrap_or(ds));
        let inner = py.detach(|| sparsify::hierarchical_sparsify(&self.inner, g, s)).map_err(to_py)?;
        Ok(PyScene { inner })
    }

    /// Cosine relevance of every semantic (or, without one, geometry) Gaussian.
    fn relevance(&self, query: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(query::query_scene(&self.inner, &query, 0.0, None).map_err(to_py)?.relevance)
    }

    /// Indices with relevance at or above `threshold`, ascending.
    #[pyo3(signature = (query, threshold=0.5))]
    fn select(&self, query: Vec<f64>, threshold: f64) -> PyResult<Vec<usize>> {
        Ok(query::query_scene(&self.inner, &query, threshold, None).map_err(to_py)?.selected)
    }

    /// `op` is "extract" or "delete".
    #[pyo3(signature = (query, op, threshold=0.5))]
    fn edit(&self, query: Vec<f64>, op: &str, threshold: f64) -> PyResult<Self> {
        let op: EditOp = op.parse().map_err(to_py)?;
        let inner = query::edit_scene(&self.inner, &query, threshold, op).map_err(to_py)?;
        Ok(PyScene { inner })
    }

    /// Renders one view of a camera file. Returns `(width, height, rgb)`.
    #[pyo3(signature = (cameras, view=0, background=[0.0, 0.0, 0.0]))]
    fn render(
        &self,
        py: Python<'_>,
        cameras: PathBuf,
        view: usize,
        background: [f64; 3],
    ) -> PyResult<(usize, usize, Vec<f64>)> {
        let cams = io::read_cameras(&cameras).map_err(to_py)?;
        let cam = cams
            .get(view)
            .ok_or_else(|| PyValueError::new_err(format!("view {view} out of range for {} views", cams.len())))?;
        let opts = RenderOptions {
            background,
            features: false,
        };
        let out = py.detach(|| raster::render(&self.inner, cam, &opts)).map_err(to_py)?;
        Ok((out.color.width, out.color.height, out.color.data))
    }
}

/// Generates a synthetic dataset into `out` and returns `(gaussians, views)`.
#[pyfunction]
#[pyo3(signature = (preset, out, seed=0))]
fn synth(py: Python<'_>, preset: &str, out: PathBuf, seed: u64) -> PyResult<(usize, usize)> {
    let preset: Preset = preset.parse().map_err(to_py)?;
    let s = py.detach(|| synth_scene(preset, seed)).map_err(to_py)?;
    write_synth(&out, &s).map_err(to_py)?;
    Ok((s.scene.len(), s.views.len()))
}

/// Instance contrastive loss over every foreground pixel. `features` holds
/// `width * height * dim` values; mask id 0 is background.
#[pyfunction]
#[pyo3(signature = (features, mask, width, height, dim, alpha=0.07))]
fn contrastive_loss(
    features: Vec<f64>,
    mask: Vec<u16>,
    width: usize,
    height: usize,
    dim: usize,
    alpha: f64,
) -> PyResult<f64> {
    let f = FeatureMap::from_data(width, height, dim, features).map_err(to_py)?;
    let m = InstanceMask::from_data(width, height, mask).map_err(to_py)?;
    losses::instance_contrastive_loss(&f, &m, alpha, Sampling::Full).map_err(to_py)
}

/// Weighted total with the default weights: correctly rounded sum of the terms.
#[pyfunction]
#[pyo3(signature = (photo, feat=0.0, depth_distill=0.0, pose_distill=0.0, inst=0.0))]
fn total_loss(photo: f64, feat: f64, depth_distill: f64, pose_distill: f64, inst: f64) -> f64 {
    let c = LossComponents {
        photo,
        feat,
        depth_distill,
        pose_distill,
        inst,
    };
    losses::total_loss(&c, &LossConfig::default()).total
}

/// Mean SSIM of two RGB images given as flat `[0, 1]` lists.
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    metrics::ssim(&image(a, width, height)?, &image(b, width, height)?).map_err(to_py)
}

/// PSNR in dB for unit-range RGB images, capped at 99 for identical inputs.
#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    metrics::psnr(&image(a, width, height)?, &image(b, width, height)?).map_err(to_py)
}

/// Runs the `lgs` command line in-process. Returns `(exit_code, stdout, stderr)`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (i32, String, String) {
    py.detach(|| {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let argv = std::iter::once("lgs".to_string()).chain(args);
        let code = lgs_core::cli::run(argv, &mut out, &mut err);
        (
            code,
            String::from_utf8_lossy(&out).into_owned(),
            String::from_utf8_lossy(&err).into_owned(),
        )
    })
}

#[pymodule]
fn lgs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
