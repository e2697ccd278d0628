//! Python bindings. Images cross the boundary as flat lists in
//! `(row, column, channel)` order.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use thsmooth_core::pipeline::{self, PresetOverrides, SmoothOptions};
use thsmooth_core::tasks::{self, depth, FixtureKind};
use thsmooth_core::{io, penalty, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "ImageGrid", module = "thsmooth", from_py_object)]
#[derive(Clone)]
struct PyImageGrid {
    inner: thsmooth_core::ImageGrid,
}

#[pymethods]
impl PyImageGrid {
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        let inner = thsmooth_core::ImageGrid::new(height, width, channels, data).map_err(to_py)?;
        Ok(PyImageGrid { inner })
    }

    /// A 1-row, 1-channel grid.
    #[staticmethod]
    fn from_signal(values: Vec<f64>) -> PyResult<Self> {
        let inner = thsmooth_core::ImageGrid::from_signal(&values).map_err(to_py)?;
        Ok(PyImageGrid { inner })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, y: usize, x: usize, c: usize) -> PyResult<f64> {
        if y >= self.inner.height() || x >= self.inner.width() || c >= self.inner.channels() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.get(y, x, c))
    }

    fn to_luma(&self) -> Self {
        PyImageGrid {
            inner: self.inner.to_luma(),
        }
    }

    fn clamped(&self) -> Self {
        PyImageGrid {
            inner: self.inner.clamped(),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "ImageGrid(height={}, width={}, channels={})",
            self.inner.height(),
            self.inner.width(),
            self.inner.channels()
        )
    }
}

#[pyclass(name = "SmoothingParams", module = "thsmooth", from_py_object)]
#[derive(Clone)]
struct PyParams {
    #[pyo3(get, set)]
    lambda_: f64,
    #[pyo3(get, set)]
    alpha: f64,
    #[pyo3(get, set)]
    a_d: f64,
    #[pyo3(get, set)]
    b_d: f64,
    #[pyo3(get, set)]
    a_s: f64,
    #[pyo3(get, set)]
    b_s: f64,
    #[pyo3(get, set)]
    r_d: usize,
    #[pyo3(get, set)]
    r_s: usize,
    #[pyo3(get, set)]
    n_iters: usize,
    #[pyo3(get, set)]
    delta: f64,
}

impl From<thsmooth_core::SmoothingParams> for PyParams {
    fn from(p: thsmooth_core::SmoothingParams) -> Self {
        PyParams {
            lambda_: p.lambda,
            alpha: p.alpha,
            a_d: p.a_d,
            b_d: p.b_d,
            a_s: p.a_s,
            b_s: p.b_s,
            r_d: p.r_d,
            r_s: p.r_s,
            n_iters: p.n_iters,
            delta: p.delta,
        }
    }
}

impl PyParams {
    fn core(&self) -> thsmooth_core::SmoothingParams {
        thsmooth_core::SmoothingParams {
            lambda: self.lambda_,
            alpha: self.alpha,
            a_d: self.a_d,
            b_d: self.b_d,
            a_s: self.a_s,
            b_s: self.b_s,
            r_d: self.r_d,
            r_s: self.r_s,
            n_iters: self.n_iters,
            delta: self.delta,
            ..Default::default()
        }
    }
}

#[pymethods]
impl PyParams {
    /// Defaults: the group 2 regime with a = ε, b untruncated, r = 1, N = 10.
    #[new]
    fn new() -> Self {
        thsmooth_core::SmoothingParams::default().into()
    }

    fn validate(&self) -> PyResult<()> {
        self.core().validate().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.core())
    }
}

/// Parameters of a named preset with the allowed overrides applied.
#[pyfunction]
#[pyo3(signature = (name, *, lambda_=None, radius=None, b=None, n_iters=None))]
fn preset(name: &str, lambda_: Option<f64>, radius: Option<usize>, b: Option<f64>, n_iters: Option<usize>) -> PyResult<PyParams> {
    let o = PresetOverrides {
        lambda: lambda_,
        radius,
        b,
        n_iters,
        ..Default::default()
    };
    Ok(pipeline::preset(name, &o).map_err(to_py)?.into())
}

#[pyfunction]
fn preset_names() -> Vec<&'static str> {
    pipeline::Preset::ALL.iter().map(|p| p.name()).collect()
}

/// Smooths `f` under guidance `g` (self-guided when omitted). With `audit`
/// the return value is `(image, [(e_u, e_ul, e_ulmu), ...])`.
#[pyfunction]
#[pyo3(signature = (f, params, g=None, audit=false))]
fn smooth(
    py: Python<'_>,
    f: &PyImageGrid,
    params: &PyParams,
    g: Option<&PyImageGrid>,
    audit: bool,
) -> PyResult<Py<PyAny>> {
    let guide = g.unwrap_or(f);
    let opts = SmoothOptions {
        audit,
        ..Default::default()
    };
    let p = params.core();
    let out = py
        .detach(|| pipeline::smooth_with(&f.inner, &guide.inner, &p, &opts))
        .map_err(to_py)?;
    let image = PyImageGrid { inner: out.image };
    if audit {
        let energies: Vec<(f64, f64, f64)> = out.reports.iter().map(|r| (r.e_u, r.e_ul, r.e_ulmu)).collect();
        Ok((image, energies).into_pyobject(py)?.into_any().unbind())
    } else {
        Ok(image.into_pyobject(py)?.into_any().unbind())
    }
}

#[pyfunction]
fn huber(x: f64, a: f64) -> PyResult<f64> {
    penalty::huber(x, a).map_err(to_py)
}

#[pyfunction]
fn truncated_huber(x: f64, a: f64, b: f64) -> PyResult<f64> {
    Ok(penalty::HuberSpec::new(a, b).map_err(to_py)?.truncated(x))
}

#[pyfunction]
#[pyo3(signature = (f, lambda_=20.0, boost=tasks::DEFAULT_BOOST))]
fn enhance_detail(py: Python<'_>, f: &PyImageGrid, lambda_: f64, boost: f64) -> PyResult<PyImageGrid> {
    let inner = py
        .detach(|| tasks::enhance_detail(&f.inner, lambda_, boost, &SmoothOptions::default()))
        .map_err(to_py)?;
    Ok(PyImageGrid { inner })
}

#[pyfunction]
#[pyo3(signature = (f, b=0.1, r=1, lambda_=5.0))]
fn remove_clipart_artifacts(py: Python<'_>, f: &PyImageGrid, b: f64, r: usize, lambda_: f64) -> PyResult<PyImageGrid> {
    let inner = py
        .detach(|| tasks::remove_clipart_artifacts(&f.inner, b, r, lambda_, &SmoothOptions::default()))
        .map_err(to_py)?;
    Ok(PyImageGrid { inner })
}

#[pyfunction]
#[pyo3(signature = (f, lambda_=0.5, r=1))]
fn remove_texture(py: Python<'_>, f: &PyImageGrid, lambda_: f64, r: usize) -> PyResult<PyImageGrid> {
    let inner = py
        .detach(|| tasks::remove_texture(&f.inner, lambda_, r, &SmoothOptions::default()))
        .map_err(to_py)?;
    Ok(PyImageGrid { inner })
}

/// Guided upsampling of a low-resolution depth map by `scale`.
#[pyfunction]
#[pyo3(signature = (low_res, guide, scale, params=None))]
fn upsample_depth(
    py: Python<'_>,
    low_res: &PyImageGrid,
    guide: &PyImageGrid,
    scale: usize,
    params: Option<&PyParams>,
) -> PyResult<PyImageGrid> {
    let sample = depth::DepthSample::new(low_res.inner.clone(), guide.inner.clone(), None, scale).map_err(to_py)?;
    let p = params.map(PyParams::core).unwrap_or_else(depth::depth_params);
    let inner = py
        .detach(|| depth::upsample_depth(&sample, &p, &SmoothOptions::default()))
        .map_err(to_py)?;
    Ok(PyImageGrid { inner })
}

#[pyfunction]
fn mae(a: &PyImageGrid, b: &PyImageGrid) -> PyResult<f64> {
    Ok(depth::mae(&a.inner, &b.inner).map_err(to_py)?.value)
}

/// One of the 1-D test signals: step_details, pulses or blurred_step.
#[pyfunction]
#[pyo3(signature = (kind, seed=0))]
fn gen_1d_fixture(kind: &str, seed: u64) -> PyResult<PyImageGrid> {
    let k: FixtureKind = kind.parse().map_err(to_py)?;
    Ok(PyImageGrid {
        inner: tasks::gen_1d_fixture(k, seed),
    })
}

/// The parameters the 1-D fixture of this kind is smoothed with.
#[pyfunction]
fn fixture_params(kind: &str) -> PyResult<PyParams> {
    let k: FixtureKind = kind.parse().map_err(to_py)?;
    Ok(tasks::fixture_params(k).into())
}

/// Loads an image scaled to [0, 1] (PFM values are kept as stored).
#[pyfunction]
fn load_image(path: &str) -> PyResult<PyImageGrid> {
    let loaded = io::load_image(path).map_err(to_py)?;
    Ok(PyImageGrid { inner: loaded.image })
}

#[pyfunction]
#[pyo3(signature = (image, path, bit_depth=8))]
fn save_image(image: &PyImageGrid, path: &str, bit_depth: u32) -> PyResult<()> {
    let depth = match bit_depth {
        8 => io::SampleDepth::U8,
        16 => io::SampleDepth::U16,
        32 => io::SampleDepth::F32,
        _ => return Err(PyValueError::new_err("bit_depth must be 8, 16 or 32")),
    };
    io::save_image(&image.inner, path, depth).map_err(to_py)
}

#[pymodule]
fn thsmooth(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImageGrid>()?;
    m.add_class::<PyParams>()?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(smooth, m)?)?;
    m.add_function(wrap_pyfunction!(huber, m)?)?;
    m.add_function(wrap_pyfunction!(truncated_huber, m)?)?;
    m.add_function(wrap_pyfunction!(enhance_detail, m)?)?;
    m.add_function(wrap_pyfunction!(remove_clipart_artifacts, m)?)?;
    m.add_function(wrap_pyfunction!(remove_texture, m)?)?;
    m.add_function(wrap_pyfunction!(upsample_depth, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(gen_1d_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(fixture_params, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(save_image, m)?)?;
    Ok(())
}
