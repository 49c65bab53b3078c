//! Python bindings: schedules, depth policies, the cost model, datasets,
//! models with training and generation, and the verification suite.
//! Token maps cross the boundary as nested lists of ints.

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use scalevar::data::{read_shard, write_shard, ScaleSchedule, TokenMap, TokenPyramid};
use scalevar::depth::{self, DepthPolicy};
use scalevar::model::{self, ModelConfig, ModelParams};
use scalevar::sampler::{self, SampleConfig};
use scalevar::train::{self, Branch, TrainConfig, TrainPhasePlan};
use scalevar::{perf, verify, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn branch(name: &str) -> PyResult<Branch> {
    match name {
        "subnet" => Ok(Branch::Subnet),
        "full" => Ok(Branch::Full),
        _ => Err(PyValueError::new_err(format!("branch must be 'subnet' or 'full', got {name:?}"))),
    }
}

fn map_rows(m: &TokenMap) -> Vec<Vec<u16>> {
    m.tokens.chunks(m.w).map(<[u16]>::to_vec).collect()
}

fn pyramid_maps(p: &TokenPyramid) -> Vec<Vec<Vec<u16>>> {
    p.maps.iter().map(map_rows).collect()
}

#[pyclass(name = "Schedule", from_py_object)]
#[derive(Clone)]
struct PySchedule(ScaleSchedule);

#[pymethods]
impl PySchedule {
    /// Square grids with the given side lengths.
    #[new]
    fn new(sides: Vec<usize>, vocab: usize) -> PyResult<Self> {
        ScaleSchedule::square(&sides, vocab).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn toy() -> Self {
        Self(ScaleSchedule::toy())
    }

    #[staticmethod]
    fn large() -> Self {
        Self(ScaleSchedule::large())
    }

    #[getter]
    fn grids(&self) -> Vec<(usize, usize)> {
        self.0.grids().to_vec()
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.0.vocab()
    }

    #[getter]
    fn scales(&self) -> usize {
        self.0.scales()
    }

    #[getter]
    fn total_tokens(&self) -> usize {
        self.0.total_tokens()
    }

    fn offsets(&self) -> Vec<usize> {
        self.0.offsets()
    }

    fn __repr__(&self) -> String {
        format!("Schedule(grids={:?}, vocab={})", self.0.grids(), self.0.vocab())
    }
}

#[pyclass(name = "Policy", from_py_object)]
#[derive(Clone)]
struct PyPolicy(DepthPolicy);

#[pymethods]
impl PyPolicy {
    #[new]
    fn new(depth: usize, d: usize, bridge: usize, scales: usize) -> PyResult<Self> {
        DepthPolicy::new(depth, d, bridge, scales).map(Self).map_err(py_err)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.depth
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d
    }

    #[getter]
    fn bridge(&self) -> usize {
        self.0.bridge
    }

    #[getter]
    fn selected(&self) -> Vec<usize> {
        self.0.selected.as_slice().to_vec()
    }

    fn full_only_layers(&self) -> Vec<usize> {
        self.0.full_only_layers()
    }

    /// Layers run at 1-based scale `k`.
    fn active_layers(&self, k: usize) -> PyResult<Vec<usize>> {
        depth::active_layers(k, &self.0)
            .map(|s| s.as_slice().to_vec())
            .map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Policy(D={}, d={}, N={}, K={})", self.0.depth, self.0.d, self.0.bridge, self.0.scales)
    }
}

#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset(scalevar::data::Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn synthesize(schedule: &PySchedule, classes: u32, count: usize, seed: u64) -> PyResult<Self> {
        scalevar::data::Dataset::synthesize(&schedule.0, classes, count, seed)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        read_shard(path).map(Self).map_err(py_err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        write_shard(path, &self.0).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn schedule(&self) -> PySchedule {
        PySchedule(self.0.schedule.clone())
    }

    /// `(class_label, maps)` of sample `i`, each map a list of rows.
    fn pyramid(&self, i: usize) -> PyResult<(u32, Vec<Vec<Vec<u16>>>)> {
        let p = self
            .0
            .samples
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("sample {i} of {}", self.0.len())))?;
        Ok((p.class_label, pyramid_maps(p)))
    }
}

#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel(ModelParams);

impl PyModel {
    fn sample(&self, index: usize, ds: &PyDataset) -> PyResult<TokenPyramid> {
        ds.0.samples
            .get(index)
            .cloned()
            .ok_or_else(|| PyIndexError::new_err(format!("sample {index} of {}", ds.0.len())))
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (depth, width, heads, classes, schedule, seed=0))]
    fn new(depth: usize, width: usize, heads: usize, classes: usize, schedule: &PySchedule, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::new(depth, width, heads, classes, schedule.0.clone()).map_err(py_err)?;
        model::init_params(&cfg, seed).map(Self).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn toy(seed: u64) -> PyResult<Self> {
        model::init_params(&ModelConfig::toy(), seed).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        model::load_checkpoint(path).map(Self).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(path, &self.0).map_err(py_err)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.layers.len()
    }

    #[getter]
    fn schedule(&self) -> PySchedule {
        PySchedule(self.0.config.schedule.clone())
    }

    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    /// A `len(layers)`-deep model with copies of the chosen layers.
    fn extract_subnet(&self, layers: Vec<usize>) -> PyResult<Self> {
        model::extract_subnet(&self.0, &depth::LayerSet::from_indices(layers))
            .map(Self)
            .map_err(py_err)
    }

    /// Per-scale logits `[t_k][V]` for sample `index` of `dataset`.
    fn logits(&self, dataset: &PyDataset, index: usize, policy: &PyPolicy) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let p = self.sample(index, dataset)?;
        let scales = model::forward_pyramid(&self.0, &p, &policy.0).map_err(py_err)?;
        let v = self.0.config.vocab();
        Ok(scales
            .iter()
            .map(|t| t.data().chunks(v).map(<[f64]>::to_vec).collect())
            .collect())
    }

    /// Mean token cross-entropy of `branch` over the dataset.
    fn loss(&self, dataset: &PyDataset, policy: &PyPolicy, branch_name: &str) -> PyResult<f64> {
        let refs: Vec<&TokenPyramid> = dataset.0.samples.iter().collect();
        train::pyramid_loss(&self.0, &refs, &policy.0, branch(branch_name)?).map_err(py_err)
    }

    /// Token maps of one generated pyramid.
    #[pyo3(signature = (class_label, policy, seed=0, top_k=900, top_p=0.96, temperature=1.0))]
    fn generate(
        &self,
        class_label: u32,
        policy: &PyPolicy,
        seed: u64,
        top_k: usize,
        top_p: f64,
        temperature: f64,
    ) -> PyResult<Vec<Vec<Vec<u16>>>> {
        let cfg = SampleConfig { top_k, top_p, temperature, seed };
        sampler::generate(&self.0, class_label, &policy.0, &cfg)
            .map(|p| pyramid_maps(&p))
            .map_err(py_err)
    }

    /// Cache entries a generation under `policy` leaves behind.
    fn generation_kv_entries(&self, policy: &PyPolicy) -> PyResult<u64> {
        let cfg = SampleConfig { top_k: 1, ..SampleConfig::default() };
        sampler::generate_instrumented(&self.0, 0, &policy.0, &cfg)
            .map(|(_, c)| c.total_entries())
            .map_err(py_err)
    }

    /// Progressive training in place; returns one dict per epoch.
    #[pyo3(signature = (train_set, val_set, policy, e1, e2, e, batch_size=16, seed=0, fixed_p=None, lr=1e-3))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train_set: &PyDataset,
        val_set: &PyDataset,
        policy: &PyPolicy,
        e1: usize,
        e2: usize,
        e: usize,
        batch_size: usize,
        seed: u64,
        fixed_p: Option<f64>,
        lr: f64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let plan = TrainPhasePlan::new(e1, e2, e, 0.2).map_err(py_err)?;
        let mut cfg = TrainConfig::new(plan, policy.0.clone());
        cfg.batch_size = batch_size;
        cfg.seed = seed;
        cfg.fixed_p = fixed_p;
        cfg.adam.lr = lr;
        let h = train::run_training(&mut self.0, &cfg, &train_set.0, &val_set.0, |_| Ok(()))
            .map_err(py_err)?;
        h.epochs
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("phase", r.phase)?;
                d.set_item("p", r.p)?;
                d.set_item("loss_subnet", r.loss_subnet)?;
                d.set_item("loss_full", r.loss_full)?;
                d.set_item("branch_counts", (r.branch_counts.subnet, r.branch_counts.full))?;
                d.set_item("per_layer_bridge_norms", r.per_layer_bridge_norms.clone())?;
                d.set_item("per_layer_flexible_norms", r.per_layer_flexible_norms.clone())?;
                Ok(d)
            })
            .collect()
    }
}

type NestingRow = (usize, usize, bool, Option<usize>);
type CheckRow = (String, bool, f64, f64, String);

#[pyfunction]
fn select_layers(depth: usize, d: usize) -> PyResult<Vec<usize>> {
    depth::select_layers(depth, d)
        .map(|s| s.as_slice().to_vec())
        .map_err(py_err)
}

/// `(smaller, larger, nested, witness)` for every pair of depths.
#[pyfunction]
fn nesting_report(depth: usize, depths: Vec<usize>) -> PyResult<Vec<NestingRow>> {
    depth::nesting_report(depth, &depths)
        .map(|vs| vs.into_iter().map(|v| (v.smaller, v.larger, v.nested, v.witness)).collect())
        .map_err(py_err)
}

#[pyfunction]
fn kv_entries(policy: &PyPolicy, schedule: &PySchedule) -> PyResult<u64> {
    perf::kv_entries(&policy.0, &schedule.0).map_err(py_err)
}

#[pyfunction]
fn perf_report<'py>(py: Python<'py>, policy: &PyPolicy, schedule: &PySchedule, width: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = perf::report(&policy.0, &schedule.0, width).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("d", r.d)?;
    d.set_item("N", r.bridge)?;
    d.set_item("kv_entries", r.kv_entries)?;
    d.set_item("full_kv_entries", r.full_kv_entries)?;
    d.set_item("kv_reduction_pct", 100.0 * r.kv_reduction_fraction)?;
    d.set_item("flops_total", r.flops_total)?;
    d.set_item("flexible_flops_share", r.flexible_flops_share)?;
    d.set_item("flexible_token_share", r.flexible_token_share)?;
    d.set_item("layer_flops_reduction_pct", 100.0 * r.layer_flops_reduction)?;
    Ok(d)
}

/// The sweep over `depths × bridges` as CSV text.
#[pyfunction]
fn sweep_csv(depth: usize, depths: Vec<usize>, bridges: Vec<usize>, schedule: &PySchedule, width: usize) -> PyResult<String> {
    let policies = depth::enumerate_configs(depth, schedule.0.scales(), &depths, &bridges).map_err(py_err)?;
    perf::sweep(&policies, &schedule.0, width)
        .map(|rows| perf::to_csv(&rows))
        .map_err(py_err)
}

/// `(name, passed, measured, tolerance, detail)` per property check.
#[pyfunction]
#[pyo3(signature = (seed=0, corrupt_mask=false))]
fn run_verify(seed: u64, corrupt_mask: bool) -> PyResult<Vec<CheckRow>> {
    let opts = verify::VerifyOptions {
        seed,
        mask: if corrupt_mask { model::MaskKind::Unmasked } else { model::MaskKind::BlockCausal },
        ..verify::VerifyOptions::default()
    };
    verify::run_all(&opts)
        .map(|cs| cs.into_iter().map(|c| (c.name, c.passed, c.measured, c.tolerance, c.detail)).collect())
        .map_err(py_err)
}

#[pymodule]
#[pyo3(name = "scalevar")]
fn scalevar_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(select_layers, m)?)?;
    m.add_function(wrap_pyfunction!(nesting_report, m)?)?;
    m.add_function(wrap_pyfunction!(kv_entries, m)?)?;
    m.add_function(wrap_pyfunction!(perf_report, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_csv, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    Ok(())
}
