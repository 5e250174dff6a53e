//! Python bindings for the registration engine: grids, volumes,
//! displacement fields, phantom generation, registration, metrics and
//! MetaImage I/O.
//!
//! Values cross the boundary as plain Python lists of floats in the same
//! x-fastest linear order the Rust types use, keeping the module free of
//! binary-array dependencies.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use maskreg::{
    coarse_align, compute_metrics, dice_binary, generate_phantom, normalize_intensity,
    signed_distance_map, total_loss, warp, DisplacementField, Error, Grid, Landmark, LandmarkSet,
    LossWeights, MetricsReport, PhantomSpec, RegistrationConfig, Volume, VolumeKind,
};

fn to_py_err(e: Error) -> PyErr {
    match &e {
        Error::Io { .. } | Error::MissingFile { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_kind(kind: &str) -> PyResult<VolumeKind> {
    match kind {
        "intensity" => Ok(VolumeKind::Intensity),
        "soft_mask" => Ok(VolumeKind::SoftMask),
        "binary_mask" => Ok(VolumeKind::BinaryMask),
        "sdm_mm" => Ok(VolumeKind::SdmMm),
        other => Err(PyValueError::new_err(format!(
            "unknown volume kind {other:?}; expected intensity, soft_mask, binary_mask or sdm_mm"
        ))),
    }
}

fn kind_name(kind: VolumeKind) -> &'static str {
    match kind {
        VolumeKind::Intensity => "intensity",
        VolumeKind::SoftMask => "soft_mask",
        VolumeKind::BinaryMask => "binary_mask",
        VolumeKind::SdmMm => "sdm_mm",
    }
}

/// Regular 3-D sampling grid: shape, voxel spacing (mm) and world origin (mm).
#[pyclass(name = "Grid", from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: Grid,
}

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (dims, spacing, origin = [0.0, 0.0, 0.0]))]
    fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> PyResult<Self> {
        Ok(Self {
            inner: Grid::new(dims, spacing, origin).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.inner.spacing
    }

    #[getter]
    fn origin(&self) -> [f64; 3] {
        self.inner.origin
    }

    fn num_voxels(&self) -> usize {
        self.inner.num_voxels()
    }

    /// World coordinates (mm) of voxel (i, j, k).
    fn world(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.inner.world(i, j, k)
    }

    fn world_center(&self) -> [f64; 3] {
        self.inner.world_center()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid(dims={:?}, spacing={:?}, origin={:?})",
            self.inner.dims, self.inner.spacing, self.inner.origin
        )
    }
}

/// Scalar volume on a grid; `kind` is one of "intensity", "soft_mask",
/// "binary_mask", "sdm_mm".
#[pyclass(name = "Volume", from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    fn new(grid: PyGrid, kind: &str, values: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: Volume::new(grid.inner, parse_kind(kind)?, values).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(grid: PyGrid, kind: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Volume::zeros(grid.inner, parse_kind(kind)?),
        })
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid {
            inner: self.inner.grid().clone(),
        }
    }

    #[getter]
    fn kind(&self) -> &'static str {
        kind_name(self.inner.kind())
    }

    /// All voxel values in x-fastest linear order.
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.inner.at(i, j, k)
    }

    fn foreground_count(&self) -> usize {
        self.inner.foreground_count()
    }

    /// Thresholds at 0.5 into a binary mask.
    fn binarized(&self) -> PyVolume {
        PyVolume {
            inner: self.inner.binarized(),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Volume(kind={:?}, dims={:?})",
            kind_name(self.inner.kind()),
            self.inner.grid().dims
        )
    }
}

/// Dense displacement field: one (x, y, z) millimetre vector per voxel.
#[pyclass(name = "DisplacementField", from_py_object)]
#[derive(Clone)]
struct PyDisplacementField {
    inner: DisplacementField,
}

#[pymethods]
impl PyDisplacementField {
    #[new]
    fn new(grid: PyGrid, vectors: Vec<[f64; 3]>) -> PyResult<Self> {
        Ok(Self {
            inner: DisplacementField::new(grid.inner, vectors).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(grid: PyGrid) -> Self {
        Self {
            inner: DisplacementField::zeros(grid.inner),
        }
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid {
            inner: self.inner.grid().clone(),
        }
    }

    /// All displacement vectors in x-fastest linear order.
    fn vectors(&self) -> Vec<[f64; 3]> {
        self.inner.vectors().to_vec()
    }

    fn at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.inner.at(i, j, k)
    }

    fn max_magnitude(&self) -> f64 {
        self.inner.max_magnitude()
    }

    fn __repr__(&self) -> String {
        format!(
            "DisplacementField(dims={:?}, max_magnitude={:.3})",
            self.inner.grid().dims,
            self.inner.max_magnitude()
        )
    }
}

fn metrics_to_dict(py: Python<'_>, m: &MetricsReport) -> PyResult<Py<PyDict>> {
    let d = PyDict::new(py);
    d.set_item("dsc_whole", m.dsc_whole)?;
    d.set_item("dsc_base", m.dsc_base)?;
    d.set_item("dsc_mid", m.dsc_mid)?;
    d.set_item("dsc_apex", m.dsc_apex)?;
    d.set_item("tre_mm", m.tre_mm)?;
    d.set_item("jac_grad", m.jac_grad)?;
    d.set_item("folding_fraction", m.folding_fraction)?;
    Ok(d.unbind())
}

/// Outcome of a registration run.
#[pyclass(name = "RegistrationResult")]
struct PyRegistrationResult {
    #[pyo3(get)]
    ddf: PyDisplacementField,
    metrics: MetricsReport,
    /// (total, dice_term, distance_term, bending_term) per iteration.
    #[pyo3(get)]
    loss_trace: Vec<(f64, f64, f64, f64)>,
    #[pyo3(get)]
    iterations_per_stage: Vec<usize>,
}

#[pymethods]
impl PyRegistrationResult {
    #[getter]
    fn metrics(&self, py: Python<'_>) -> PyResult<Py<PyDict>> {
        metrics_to_dict(py, &self.metrics)
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.iterations_per_stage.iter().sum()
    }

    fn __repr__(&self) -> String {
        format!(
            "RegistrationResult(dsc_whole={:.4}, iterations={})",
            self.metrics.dsc_whole,
            self.iterations_per_stage.iter().sum::<usize>()
        )
    }
}

/// Ground-truth synthetic case.
#[pyclass(name = "PhantomPair")]
struct PyPhantomPair {
    #[pyo3(get)]
    moving_mask: PyVolume,
    #[pyo3(get)]
    fixed_mask: PyVolume,
    #[pyo3(get)]
    true_ddf: PyDisplacementField,
    #[pyo3(get)]
    moving_landmarks: Vec<(String, PyVolume)>,
    #[pyo3(get)]
    fixed_landmarks: Vec<(String, PyVolume)>,
}

fn landmark_list(set: &LandmarkSet) -> Vec<(String, PyVolume)> {
    set.entries()
        .iter()
        .map(|lm| {
            (
                lm.id.clone(),
                PyVolume {
                    inner: lm.mask.clone(),
                },
            )
        })
        .collect()
}

fn landmark_set(pairs: Vec<(String, PyVolume)>) -> PyResult<LandmarkSet> {
    let entries = pairs
        .into_iter()
        .map(|(id, vol)| Landmark {
            id,
            mask: vol.inner,
        })
        .collect();
    LandmarkSet::new(entries).map_err(to_py_err)
}

/// Generates a synthetic test case from settings JSON (fields: dims,
/// spacing, semi_axes_mm, affine, bump_count, bump_amplitude_mm,
/// bump_sigma_mm, landmark_count, seed; all optional).
#[pyfunction]
#[pyo3(signature = (spec_json = "{}"))]
fn phantom(spec_json: &str) -> PyResult<PyPhantomPair> {
    let spec: PhantomSpec =
        serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let pair = generate_phantom(&spec).map_err(to_py_err)?;
    Ok(PyPhantomPair {
        moving_mask: PyVolume {
            inner: pair.moving_mask,
        },
        fixed_mask: PyVolume {
            inner: pair.fixed_mask,
        },
        true_ddf: PyDisplacementField {
            inner: pair.true_ddf,
        },
        moving_landmarks: landmark_list(&pair.moving_landmarks),
        fixed_landmarks: landmark_list(&pair.fixed_landmarks),
    })
}

/// Registers a moving binary mask onto a fixed one.  `mode` picks the loss
/// preset ("mdsc", "sdm" or "mix"); `config_json` may override any
/// registration setting, including the weights.
#[pyfunction]
#[pyo3(signature = (moving_mask, fixed_mask, mode = "mix", config_json = None))]
fn register(
    moving_mask: &PyVolume,
    fixed_mask: &PyVolume,
    mode: &str,
    config_json: Option<&str>,
) -> PyResult<PyRegistrationResult> {
    let weights = LossWeights::preset(mode)
        .ok_or_else(|| PyValueError::new_err(format!("unknown mode {mode:?}")))?;
    let mut value: serde_json::Value = match config_json {
        Some(text) => {
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?
        }
        None => serde_json::json!({}),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| PyValueError::new_err("config JSON root must be an object"))?;
    if !obj.contains_key("weights") {
        obj.insert(
            "weights".to_string(),
            serde_json::to_value(weights).map_err(|e| PyValueError::new_err(e.to_string()))?,
        );
    }
    let config: RegistrationConfig =
        serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;

    let result =
        maskreg::register(&moving_mask.inner, &fixed_mask.inner, &config).map_err(to_py_err)?;
    Ok(PyRegistrationResult {
        ddf: PyDisplacementField { inner: result.ddf },
        metrics: result.metrics,
        loss_trace: result
            .loss_trace
            .iter()
            .map(|b| (b.total, b.mdsc, b.msle, b.bending))
            .collect(),
        iterations_per_stage: result.iterations_used,
    })
}

/// Applies a displacement field: samples the source volume at x + u(x) for
/// every voxel of the field's grid.
#[pyfunction(name = "warp")]
fn warp_py(volume: &PyVolume, ddf: &PyDisplacementField) -> PyVolume {
    PyVolume {
        inner: warp(&volume.inner, &ddf.inner),
    }
}

/// Signed Euclidean distance map (mm): negative inside, positive outside.
#[pyfunction(name = "signed_distance_map")]
fn signed_distance_map_py(mask: &PyVolume) -> PyResult<PyVolume> {
    Ok(PyVolume {
        inner: signed_distance_map(&mask.inner).map_err(to_py_err)?,
    })
}

/// Hard Dice overlap of two binary masks.
#[pyfunction(name = "dice_binary")]
fn dice_binary_py(a: &PyVolume, b: &PyVolume) -> PyResult<f64> {
    dice_binary(&a.inner, &b.inner).map_err(to_py_err)
}

/// Evaluation metrics of a registration: whole/regional Dice, optional TRE,
/// Jacobian statistics.  Landmarks are (id, mask) lists paired by id.
#[pyfunction(name = "metrics")]
#[pyo3(signature = (moving_mask, fixed_mask, ddf, moving_landmarks = None, fixed_landmarks = None))]
fn metrics_py(
    py: Python<'_>,
    moving_mask: &PyVolume,
    fixed_mask: &PyVolume,
    ddf: &PyDisplacementField,
    moving_landmarks: Option<Vec<(String, PyVolume)>>,
    fixed_landmarks: Option<Vec<(String, PyVolume)>>,
) -> PyResult<Py<PyDict>> {
    let report = match (moving_landmarks, fixed_landmarks) {
        (Some(m), Some(f)) => {
            let m_set = landmark_set(m)?;
            let f_set = landmark_set(f)?;
            compute_metrics(
                &moving_mask.inner,
                &fixed_mask.inner,
                &ddf.inner,
                Some((&m_set, &f_set)),
            )
            .map_err(to_py_err)?
        }
        (None, None) => compute_metrics(&moving_mask.inner, &fixed_mask.inner, &ddf.inner, None)
            .map_err(to_py_err)?,
        _ => {
            return Err(PyValueError::new_err(
                "moving_landmarks and fixed_landmarks must be given together",
            ))
        }
    };
    metrics_to_dict(py, &report)
}

/// Weakly-supervised objective value as a dict with the total and each term.
#[pyfunction(name = "loss")]
#[pyo3(signature = (moving_mask, fixed_mask, ddf, alpha, beta, sigmas = None))]
fn loss_py(
    py: Python<'_>,
    moving_mask: &PyVolume,
    fixed_mask: &PyVolume,
    ddf: &PyDisplacementField,
    alpha: f64,
    beta: f64,
    sigmas: Option<Vec<f64>>,
) -> PyResult<Py<PyDict>> {
    let weights = LossWeights { alpha, beta };
    let sigmas = sigmas.unwrap_or_else(|| maskreg::DEFAULT_SIGMAS.to_vec());
    let moving_sdm = signed_distance_map(&moving_mask.inner).map_err(to_py_err)?;
    let fixed_sdm = signed_distance_map(&fixed_mask.inner).map_err(to_py_err)?;
    let breakdown = total_loss(
        &moving_mask.inner,
        &fixed_mask.inner,
        &moving_sdm,
        &fixed_sdm,
        &ddf.inner,
        weights,
        &sigmas,
    )
    .map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("total", breakdown.total)?;
    d.set_item("mdsc", breakdown.mdsc)?;
    d.set_item("msle", breakdown.msle)?;
    d.set_item("bending", breakdown.bending)?;
    Ok(d.unbind())
}

/// Percentile normalization of a non-negative intensity volume into [0, 1].
#[pyfunction(name = "normalize_intensity")]
#[pyo3(signature = (volume, percentile = 99.0))]
fn normalize_intensity_py(volume: &PyVolume, percentile: f64) -> PyResult<PyVolume> {
    Ok(PyVolume {
        inner: normalize_intensity(&volume.inner, percentile).map_err(to_py_err)?,
    })
}

/// Center-of-mass pre-alignment onto a common grid.  Returns a dict with the
/// translation and the four resampled volumes.
#[pyfunction(name = "prealign")]
#[pyo3(signature = (moving, moving_mask, fixed, fixed_mask, dims = maskreg::DEFAULT_TARGET_DIMS, spacing = maskreg::DEFAULT_TARGET_SPACING_MM))]
fn prealign_py(
    py: Python<'_>,
    moving: &PyVolume,
    moving_mask: &PyVolume,
    fixed: &PyVolume,
    fixed_mask: &PyVolume,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> PyResult<Py<PyDict>> {
    let result = coarse_align(
        &moving.inner,
        &moving_mask.inner,
        &fixed.inner,
        &fixed_mask.inner,
        dims,
        spacing,
    )
    .map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("translation_mm", result.translation_mm)?;
    d.set_item("moving", PyVolume { inner: result.moving })?;
    d.set_item(
        "moving_mask",
        PyVolume {
            inner: result.moving_mask,
        },
    )?;
    d.set_item("fixed", PyVolume { inner: result.fixed })?;
    d.set_item(
        "fixed_mask",
        PyVolume {
            inner: result.fixed_mask,
        },
    )?;
    Ok(d.unbind())
}

/// Reads a MetaImage volume (.mhd + .raw).
#[pyfunction]
fn read_volume(path: PathBuf) -> PyResult<PyVolume> {
    Ok(PyVolume {
        inner: maskreg::read_volume_mhd(&path).map_err(to_py_err)?,
    })
}

/// Reads a MetaImage 3-channel displacement field.
#[pyfunction]
fn read_field(path: PathBuf) -> PyResult<PyDisplacementField> {
    Ok(PyDisplacementField {
        inner: maskreg::read_field_mhd(&path).map_err(to_py_err)?,
    })
}

/// Writes a volume as .mhd + sibling .raw.
#[pyfunction]
fn write_volume(volume: &PyVolume, path: PathBuf) -> PyResult<()> {
    maskreg::write_volume_mhd(&volume.inner, &path).map_err(to_py_err)
}

/// Writes a displacement field as a 3-channel .mhd pair.
#[pyfunction]
fn write_field(ddf: &PyDisplacementField, path: PathBuf) -> PyResult<()> {
    maskreg::write_field_mhd(&ddf.inner, &path).map_err(to_py_err)
}

#[pymodule]
fn maskreg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyDisplacementField>()?;
    m.add_class::<PyRegistrationResult>()?;
    m.add_class::<PyPhantomPair>()?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(warp_py, m)?)?;
    m.add_function(wrap_pyfunction!(signed_distance_map_py, m)?)?;
    m.add_function(wrap_pyfunction!(dice_binary_py, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_py, m)?)?;
    m.add_function(wrap_pyfunction!(loss_py, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_intensity_py, m)?)?;
    m.add_function(wrap_pyfunction!(prealign_py, m)?)?;
    m.add_function(wrap_pyfunction!(read_volume, m)?)?;
    m.add_function(wrap_pyfunction!(read_field, m)?)?;
    m.add_function(wrap_pyfunction!(write_volume, m)?)?;
    m.add_function(wrap_pyfunction!(write_field, m)?)?;
    Ok(())
}
