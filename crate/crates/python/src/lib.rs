//! Python bindings: configs, synthetic features, projector forward passes,
//! FLOPs reports, gradient checks and the toy training run.

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tokenfuse::flops::{self, FlopsReport, DEFAULT_LLM_PARAMS};
use tokenfuse::fusion::{self, LayerId, TokenSequence};
use tokenfuse::gradcheck::{self, CheckTarget};
use tokenfuse::pipeline::{self, fmap, TrainConfig};
use tokenfuse::{Error, ProjectorKind};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        Error::Numeric(msg) => PyArithmeticError::new_err(msg),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn kind(name: &str) -> PyResult<ProjectorKind> {
    name.parse().map_err(to_py)
}

/// Projector shape and seed. `preset` is `paper`, `tiny` or `toy`; keyword
/// overrides use the config-file key names (`k`, `e`, `c1`, `m`, ...).
#[pyclass(name = "FusionConfig", module = "pytokenfuse", from_py_object)]
#[derive(Clone)]
struct PyFusionConfig {
    inner: fusion::FusionConfig,
}

#[pymethods]
impl PyFusionConfig {
    #[new]
    #[pyo3(signature = (preset = "paper", **overrides))]
    fn new(preset: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut text = String::new();
        if let Some(kw) = overrides {
            for (key, value) in kw.iter() {
                text.push_str(&format!("{} = {}\n", key.str()?, value.str()?));
            }
        }
        let base = pipeline::config::preset(preset).map_err(to_py)?;
        let inner = pipeline::parse_config(&text, base).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn encoder_depth(&self) -> usize {
        self.inner.encoder_depth
    }
    #[getter]
    fn m(&self) -> usize {
        self.inner.num_blocks
    }
    #[getter]
    fn h1(&self) -> usize {
        self.inner.grid_h
    }
    #[getter]
    fn w1(&self) -> usize {
        self.inner.grid_w
    }
    #[getter]
    fn c1(&self) -> usize {
        self.inner.encoder_width
    }
    #[getter]
    fn k(&self) -> usize {
        self.inner.kernel
    }
    #[getter]
    fn e(&self) -> usize {
        self.inner.tokens_per_window
    }
    #[getter]
    fn c3(&self) -> usize {
        self.inner.llm_width
    }
    #[getter]
    fn mbtf_hidden(&self) -> usize {
        self.inner.mbtf_hidden
    }
    #[getter]
    fn stf_hidden(&self) -> usize {
        self.inner.stf_hidden
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Copy with `k` and `E` replaced; the STF hidden width follows `k`.
    fn with_fusion(&self, k: usize, e: usize) -> PyResult<Self> {
        let inner = self.inner.clone().with_fusion(k, e);
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self { inner: self.inner.clone().with_seed(seed) }
    }

    fn token_count(&self) -> usize {
        self.inner.token_count()
    }

    fn block_indices(&self) -> PyResult<Vec<usize>> {
        self.inner.block_indices().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "FusionConfig(encoder_depth={}, m={}, h1={}, w1={}, c1={}, k={}, e={}, c3={}, \
             mbtf_hidden={}, stf_hidden={}, seed={})",
            c.encoder_depth,
            c.num_blocks,
            c.grid_h,
            c.grid_w,
            c.encoder_width,
            c.kernel,
            c.tokens_per_window,
            c.llm_width,
            c.mbtf_hidden,
            c.stf_hidden,
            c.seed
        )
    }
}

/// Encoder feature maps, one `H x W x C` map per selected block.
#[pyclass(name = "FeatureStack", module = "pytokenfuse", from_py_object)]
#[derive(Clone)]
struct PyFeatureStack {
    inner: fusion::FeatureStack,
}

#[pymethods]
impl PyFeatureStack {
    /// Parses FMAP1 bytes.
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let (_, inner) = fmap::decode(data).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self { inner: fmap::read_path(&path).map_err(to_py)? })
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        fmap::encode(&self.inner).map_err(to_py)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        fmap::write_path(&path, &self.to_bytes()?).map_err(to_py)
    }

    #[getter]
    fn block_indices(&self) -> Vec<u32> {
        self.inner.block_indices().to_vec()
    }

    /// `(M, H, W, C)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let (h, w, c) = self.inner.dims();
        (self.inner.num_blocks(), h, w, c)
    }

    /// Flat values of map `i`, channel fastest.
    fn map_values(&self, i: usize) -> PyResult<Vec<f32>> {
        self.inner
            .maps()
            .get(i)
            .map(|m| m.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("no map {i}")))
    }

    fn __len__(&self) -> usize {
        self.inner.num_blocks()
    }
}

/// Tokens handed to the language model.
#[pyclass(name = "TokenSequence", module = "pytokenfuse", from_py_object)]
#[derive(Clone)]
struct PyTokenSequence {
    inner: TokenSequence,
}

#[pymethods]
impl PyTokenSequence {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn provenance(&self) -> String {
        self.inner.provenance().to_string()
    }

    fn token(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("token {i} out of range")));
        }
        Ok(self.inner.token(i).to_vec())
    }

    fn tolist(&self) -> Vec<Vec<f32>> {
        (0..self.inner.len()).map(|i| self.inner.token(i).to_vec()).collect()
    }

    /// FMAP1 bytes with one `1 x L x width` map.
    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        fmap::encode_tokens(&self.inner).map_err(to_py)
    }

    /// `(min, max, mean)`.
    fn stats(&self) -> (f64, f64, f64) {
        let t = self.inner.tensor();
        (t.min(), t.max(), t.mean())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "TokenSequence(len={}, width={}, provenance={})",
            self.inner.len(),
            self.inner.width(),
            self.inner.provenance()
        )
    }
}

/// Seeded weights of one projector.
#[pyclass(name = "ModuleParams", module = "pytokenfuse", from_py_object)]
#[derive(Clone)]
struct PyModuleParams {
    inner: fusion::ModuleParams,
}

#[pymethods]
impl PyModuleParams {
    #[new]
    #[pyo3(signature = (config, projector = "stf"))]
    fn new(config: &PyFusionConfig, projector: &str) -> PyResult<Self> {
        config.inner.validate().map_err(to_py)?;
        Ok(Self { inner: fusion::ModuleParams::init(&config.inner, kind(projector)?) })
    }

    fn param_count(&self) -> u64 {
        self.inner.param_count()
    }

    fn layers(&self) -> Vec<String> {
        self.inner.iter().map(|(id, _)| id.to_string()).collect()
    }

    /// Weight shape `[kh, kw, cin, cout]` of a layer.
    fn weight_shape(&self, layer: &str) -> PyResult<Vec<usize>> {
        let id: LayerId = layer.parse().map_err(to_py)?;
        self.inner
            .get(id)
            .map(|l| l.weight.shape().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("{layer} is not part of this projector")))
    }

    /// Little-endian f32 bytes of every weight and bias, in layer order.
    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_le_bytes()
    }
}

#[pyfunction]
fn select_block_indices(encoder_depth: usize, m: usize) -> PyResult<Vec<usize>> {
    fusion::select_block_indices(encoder_depth, m).map_err(to_py)
}

#[pyfunction]
fn gen_features(seed: u64, config: &PyFusionConfig) -> PyResult<PyFeatureStack> {
    Ok(PyFeatureStack { inner: pipeline::gen_features(seed, &config.inner).map_err(to_py)? })
}

/// Runs the projector `params` belongs to.
#[pyfunction]
fn forward(
    py: Python<'_>,
    stack: &PyFeatureStack,
    params: &PyModuleParams,
    config: &PyFusionConfig,
) -> PyResult<PyTokenSequence> {
    let (s, p, c) = (&stack.inner, &params.inner, &config.inner);
    let inner = py.detach(|| fusion::run_projector(s, p, c)).map_err(to_py)?;
    Ok(PyTokenSequence { inner })
}

#[pyfunction]
fn llm_prefill_flops(n_params: u64, n_vision_tokens: u64) -> u64 {
    flops::llm_prefill_flops(n_params, n_vision_tokens)
}

#[pyfunction]
#[pyo3(signature = (config, projector = "stf"))]
fn projector_flops(config: &PyFusionConfig, projector: &str) -> PyResult<u64> {
    Ok(flops::projector_flops(&config.inner, kind(projector)?))
}

fn report_dict<'py>(py: Python<'py>, r: &FlopsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("projector", r.kind.name())?;
    d.set_item("k", r.kernel)?;
    d.set_item("e", r.tokens_per_window)?;
    d.set_item("tokens", r.vision_tokens)?;
    d.set_item("llm_params", r.llm_params)?;
    d.set_item("llm_prefill_flops", r.llm_prefill_flops)?;
    d.set_item("tflops", r.tflops())?;
    d.set_item("projector_flops", r.projector_flops)?;
    d.set_item("projector_params", r.projector_params)?;
    d.set_item("ratio", r.ratio_to_baseline)?;
    Ok(d)
}

/// One dict per row of the kernel-size grid.
#[pyfunction]
#[pyo3(signature = (config = None, llm_params = DEFAULT_LLM_PARAMS))]
fn table4_grid<'py>(
    py: Python<'py>,
    config: Option<&PyFusionConfig>,
    llm_params: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let base = config.map_or_else(fusion::FusionConfig::paper, |c| c.inner.clone());
    flops::table4_grid(&base, llm_params)
        .iter()
        .map(|r| report_dict(py, r))
        .collect()
}

/// Finite-difference check of one target; returns a dict with a `blocks` list.
#[pyfunction]
#[pyo3(signature = (target, config = None, seed = 0, epsilon = gradcheck::DEFAULT_EPSILON,
                    threshold = gradcheck::DEFAULT_THRESHOLD))]
fn check_gradients<'py>(
    py: Python<'py>,
    target: &str,
    config: Option<&PyFusionConfig>,
    seed: u64,
    epsilon: f32,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let target: CheckTarget = target.parse().map_err(to_py)?;
    let config = config.map_or_else(fusion::FusionConfig::tiny, |c| c.inner.clone());
    let report = py
        .detach(|| gradcheck::check_module(target, &config, seed, epsilon, threshold))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("target", report.target.to_string())?;
    d.set_item("seed", report.seed)?;
    d.set_item("epsilon", report.epsilon)?;
    d.set_item("passed", report.passed())?;
    d.set_item("max_rel_error", report.max_rel_error())?;
    let blocks = report
        .blocks
        .iter()
        .map(|b| {
            let bd = PyDict::new(py);
            bd.set_item("block", b.block.to_string())?;
            bd.set_item("checked", b.checked)?;
            bd.set_item("max_rel_error", b.max_rel_error)?;
            bd.set_item("worst_index", b.worst_index)?;
            bd.set_item("passed", b.passed)?;
            Ok(bd)
        })
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("blocks", blocks)?;
    Ok(d)
}

/// Loss before each update plus the final loss, `steps + 1` values.
#[pyfunction]
#[pyo3(signature = (seed = 0, lr = 1e-3, steps = 200, batch = 4))]
fn toy_train(py: Python<'_>, seed: u64, lr: f32, steps: usize, batch: usize) -> PyResult<Vec<f64>> {
    let cfg = TrainConfig { lr, steps, batch, ..TrainConfig::toy(seed) };
    let curve = py.detach(|| pipeline::toy_train(&cfg)).map_err(to_py)?;
    Ok(curve.points.iter().map(|p| p.loss).collect())
}

#[pymodule]
fn pytokenfuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFusionConfig>()?;
    m.add_class::<PyFeatureStack>()?;
    m.add_class::<PyTokenSequence>()?;
    m.add_class::<PyModuleParams>()?;
    m.add_function(wrap_pyfunction!(select_block_indices, m)?)?;
    m.add_function(wrap_pyfunction!(gen_features, m)?)?;
    m.add_function(wrap_pyfunction!(forward, m)?)?;
    m.add_function(wrap_pyfunction!(llm_prefill_flops, m)?)?;
    m.add_function(wrap_pyfunction!(projector_flops, m)?)?;
    m.add_function(wrap_pyfunction!(table4_grid, m)?)?;
    m.add_function(wrap_pyfunction!(check_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(toy_train, m)?)?;
    m.add("DEFAULT_LLM_PARAMS", DEFAULT_LLM_PARAMS)?;
    Ok(())
}
