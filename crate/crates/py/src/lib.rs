//! Python bindings: phantoms, projection, the neural field, training and
//! metrics. Arrays cross the boundary as flat lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use neural_cbct::cli::{self, RunConfig};
use neural_cbct::field::{self, CheckpointMeta};
use neural_cbct::geometry::{RaySampling, ScannerGeometry};
use neural_cbct::phantom::VoxelVolume;
use neural_cbct::projector::{self, ProjectionStack};
use neural_cbct::rng::SeedStream;
use neural_cbct::{metrics, training, Error, Vec3};

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        3 => PyIOError::new_err(e.to_string()),
        4 => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for neural_cbct::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn config_from(json: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match json {
        Some(text) => RunConfig::from_json(text).py()?,
        None => RunConfig::default(),
    };
    cfg.validate().py()?;
    Ok(cfg)
}

/// Voxel volume, x-fastest.
#[pyclass(name = "Volume", module = "neural_cbct", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyVolume {
    inner: VoxelVolume,
}

#[pymethods]
impl PyVolume {
    #[new]
    fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f64>,
    ) -> PyResult<Self> {
        let inner = VoxelVolume::new(dims, Vec3::from(spacing), Vec3::from(origin), data).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: neural_cbct::io::read_volume(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        neural_cbct::io::write_volume(&self.inner, &path, neural_cbct::io::Dtype::F64).py()
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.inner.spacing().into()
    }

    #[getter]
    fn origin(&self) -> [f64; 3] {
        self.inner.origin().into()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, i: usize, j: usize, k: usize) -> PyResult<f64> {
        let [nx, ny, nz] = self.inner.dims();
        if i >= nx || j >= ny || k >= nz {
            return Err(PyValueError::new_err("voxel index out of range"));
        }
        Ok(self.inner.get(i, j, k))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?})", self.inner.dims())
    }
}

/// Stack of detector images.
#[pyclass(
    name = "ProjectionStack",
    module = "neural_cbct",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
pub struct PyStack {
    inner: ProjectionStack,
}

#[pymethods]
impl PyStack {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: neural_cbct::io::read_stack(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        neural_cbct::io::write_stack(&self.inner, &path, neural_cbct::io::Dtype::F64).py()
    }

    #[getter]
    fn num_views(&self) -> usize {
        self.inner.num_views()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        let g = &self.inner.geometry;
        (g.detector_rows, g.detector_cols)
    }

    /// Row-major pixels of one view.
    fn image(&self, view: usize) -> PyResult<Vec<f64>> {
        self.inner
            .images
            .get(view)
            .map(|im| im.pixels.clone())
            .ok_or_else(|| PyValueError::new_err(format!("view {view} out of range")))
    }

    fn __repr__(&self) -> String {
        let (r, c) = self.shape();
        format!(
            "ProjectionStack(views={}, rows={r}, cols={c})",
            self.num_views()
        )
    }
}

/// Hash encoder, optional layer norm and MLP head.
#[pyclass(name = "FieldModel", module = "neural_cbct")]
pub struct PyField {
    inner: field::FieldModel,
    config: RunConfig,
}

#[pymethods]
impl PyField {
    /// `config_json` uses the CLI's flat configuration keys.
    #[new]
    #[pyo3(signature = (config_json=None, seed=None))]
    fn new(config_json: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut config = config_from(config_json)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let fc = config.field(config.bounds().py()?).py()?;
        let inner = field::FieldModel::new(&fc, &SeedStream::new(config.seed)).py()?;
        Ok(Self { inner, config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, meta) = field::load_full(&path).py()?;
        let fc = inner.config();
        let mut config = RunConfig {
            seed: meta.seed,
            use_ln: fc.use_ln,
            hidden: fc.hidden.clone(),
            ..RunConfig::default()
        };
        config.levels = fc.grid.levels;
        config.features_per_level = fc.grid.features_per_level;
        config.log2_table_size = fc.grid.table_size.trailing_zeros();
        config.base_resolution = fc.grid.base_resolution;
        config.growth_factor = fc.grid.growth_factor;
        Ok(Self { inner, config })
    }

    fn save(&self, path: PathBuf, epoch: Option<u64>) -> PyResult<()> {
        let meta = CheckpointMeta {
            seed: self.config.seed,
            epoch: epoch.unwrap_or(0),
            provenance: self.inner.provenance().to_string(),
        };
        field::save_checkpoint(&self.inner, &meta, &path).py()
    }

    /// Loads only the LN and MLP weights of a checkpoint.
    fn load_mci(&mut self, path: PathBuf) -> PyResult<()> {
        self.inner.load_mci(&path).py()?;
        Ok(())
    }

    #[getter]
    fn use_ln(&self) -> bool {
        self.inner.ln().is_some()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn provenance(&self) -> String {
        self.inner.provenance().to_string()
    }

    /// Attenuation at one point (mm).
    fn eval(&self, p: [f64; 3]) -> PyResult<f64> {
        Ok(self.inner.eval(&Vec3::from(p)).py()?.0)
    }

    fn predict(&self, points: Vec<[f64; 3]>) -> PyResult<Vec<f64>> {
        let pts: Vec<Vec3> = points.into_iter().map(Vec3::from).collect();
        self.inner.predict(&pts).py()
    }

    /// Pre-LN hash features, one row per point.
    fn encode(&self, points: Vec<[f64; 3]>) -> PyResult<Vec<Vec<f64>>> {
        let pts: Vec<Vec3> = points.into_iter().map(Vec3::from).collect();
        let f = self.inner.encode_points(&pts).py()?;
        Ok(f.outer_iter().map(|r| r.to_vec()).collect())
    }

    /// Samples the field on a `dims`^3 grid over its bounds.
    fn extract(&self, dims: usize) -> PyResult<PyVolume> {
        let bounds = self.inner.grid().config().bounds;
        let spacing = bounds.extent() / dims.max(1) as f64;
        let inner = projector::extract_volume(&self.inner, [dims; 3], spacing, bounds.min).py()?;
        Ok(PyVolume { inner })
    }

    /// Pixel-loss reconstruction. Returns log rows as
    /// `(epoch, loss, probe_l1, psnr_val)`.
    #[pyo3(signature = (stack, config_json=None, gt=None))]
    fn train(
        &mut self,
        py: Python<'_>,
        stack: &PyStack,
        config_json: Option<&str>,
        gt: Option<&PyVolume>,
    ) -> PyResult<Vec<(u64, f64, Option<f64>, Option<f64>)>> {
        let mut cfg = config_from(config_json)?.train();
        cfg.use_ln = self.use_ln();
        cfg.deterministic = true;
        let mut outcome = training::TrainOutcome::default();
        let opts = training::TrainOptions {
            validation: gt.map(|g| &g.inner),
            abort_checkpoint: None,
        };
        let model = &mut self.inner;
        let res = py.detach(|| {
            training::train_reconstruction_with(model, &stack.inner, &cfg, &opts, &mut outcome)
        });
        res.py()?;
        Ok(outcome
            .log
            .records()
            .iter()
            .map(|r| (r.epoch, r.loss, r.probe_l1, r.psnr_val))
            .collect())
    }

    /// Voxel-loss pre-training against a volume. Returns `(epoch, loss)` rows.
    #[pyo3(signature = (gt, config_json=None))]
    fn pretrain(
        &mut self,
        py: Python<'_>,
        gt: &PyVolume,
        config_json: Option<&str>,
    ) -> PyResult<Vec<(u64, f64)>> {
        let cfg = config_from(config_json)?.pretrain();
        let model = &mut self.inner;
        let (_, log) = py
            .detach(|| {
                training::pretrain_mci(training::GroundTruth::Volume(&gt.inner), model, &cfg)
            })
            .py()?;
        Ok(log.records().iter().map(|r| (r.epoch, r.loss)).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "FieldModel(use_ln={}, feature_dim={}, hidden={:?})",
            self.use_ln(),
            self.feature_dim(),
            self.config.hidden
        )
    }
}

/// Voxelized builtin phantom (or JSON spec path) on the config grid.
#[pyfunction]
#[pyo3(signature = (name, config_json=None))]
fn phantom(name: &str, config_json: Option<&str>) -> PyResult<PyVolume> {
    let cfg = config_from(config_json)?;
    let spec = cli::load_phantom(name).py()?;
    Ok(PyVolume {
        inner: cli::voxelize_config(&cfg, &spec).py()?,
    })
}

/// Ray-marched projections of a volume with the config geometry.
#[pyfunction]
#[pyo3(signature = (volume, config_json=None))]
fn project(py: Python<'_>, volume: &PyVolume, config_json: Option<&str>) -> PyResult<PyStack> {
    let cfg = config_from(config_json)?;
    let geometry = ScannerGeometry {
        volume: volume.inner.bounds(),
        ..cfg.geometry().py()?
    };
    let sampling = RaySampling::midpoint(cfg.projection_points);
    let inner = py
        .detach(|| projector::project_stack(&volume.inner, &geometry, &sampling))
        .py()?;
    Ok(PyStack { inner })
}

#[pyfunction]
fn psnr(recon: &PyVolume, gt: &PyVolume) -> PyResult<f64> {
    metrics::psnr(&recon.inner, &gt.inner).py()
}

#[pyfunction]
fn ssim(recon: &PyVolume, gt: &PyVolume) -> PyResult<f64> {
    metrics::ssim(&recon.inner, &gt.inner).py()
}

/// Runs the command-line tool in-process; returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cli::main_with_args(std::iter::once("neural-cbct".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "neural_cbct")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyStack>()?;
    m.add_class::<PyField>()?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("PSNR_CAP", metrics::PSNR_CAP)?;
    Ok(())
}
