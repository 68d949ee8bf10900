//! Python bindings for `dmih`.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dmih::eval::{evaluate_ranking, RetrievalProtocol};
use dmih::losses::RelaxedCode;
use dmih::trainer::{self, DatasetParams, HyperParams, LabeledBank, Split, TrainConfig};

fn to_py(e: dmih::Error) -> PyErr {
    match e {
        dmih::Error::Io(e) => PyIOError::new_err(e.to_string()),
        dmih::Error::File { .. } => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn strategy(name: &str) -> PyResult<dmih::Strategy> {
    name.parse().map_err(to_py)
}

fn relaxed(values: Vec<f64>) -> PyResult<RelaxedCode> {
    RelaxedCode::new(values).map_err(to_py)
}

#[pyclass(name = "BinaryCode", module = "pydmih", eq, frozen, from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyBinaryCode {
    inner: dmih::BinaryCode,
}

#[pymethods]
impl PyBinaryCode {
    #[new]
    fn new(bits: Vec<bool>) -> PyResult<Self> {
        let inner = dmih::BinaryCode::from_bits(&bits).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Sign of each value, with 0 mapped to +1.
    #[staticmethod]
    fn from_signs(values: Vec<f64>) -> PyResult<Self> {
        let inner = dmih::BinaryCode::from_signs(&values).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn random(bits: usize, seed: u64) -> PyResult<Self> {
        let mut rng = trainer::stream_rng(seed, trainer::Stream::Queries);
        let inner = dmih::BinaryCode::random(bits, &mut rng).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_bits(&self) -> Vec<bool> {
        self.inner.to_bits()
    }

    fn to_signs(&self) -> Vec<i8> {
        dmih::unpack(&self.inner)
    }

    fn flipped(&self, positions: Vec<usize>) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        for j in positions {
            if j >= inner.len() {
                return Err(PyIndexError::new_err(format!(
                    "bit {j} out of range for {} bits",
                    inner.len()
                )));
            }
            inner.flip(j);
        }
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let bits: String = self
            .inner
            .to_bits()
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect();
        format!("BinaryCode('{bits}')")
    }
}

#[pyclass(name = "CodeBank", module = "pydmih", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCodeBank {
    inner: Arc<dmih::CodeBank>,
}

#[pymethods]
impl PyCodeBank {
    #[new]
    #[pyo3(signature = (bits, codes=Vec::new()))]
    fn new(bits: usize, codes: Vec<PyBinaryCode>) -> PyResult<Self> {
        let mut bank = dmih::CodeBank::new(bits).map_err(to_py)?;
        for c in &codes {
            bank.push(&c.inner).map_err(to_py)?;
        }
        Ok(Self { inner: Arc::new(bank) })
    }

    #[staticmethod]
    fn random(n: usize, bits: usize, seed: u64) -> PyResult<Self> {
        let mut rng = trainer::stream_rng(seed, trainer::Stream::TestData);
        let bank = dmih::CodeBank::random(n, bits, &mut rng).map_err(to_py)?;
        Ok(Self { inner: Arc::new(bank) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bank = dmih::CodeBank::load(path).map_err(to_py)?;
        Ok(Self { inner: Arc::new(bank) })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn push(&mut self, code: &PyBinaryCode) -> PyResult<u32> {
        Arc::make_mut(&mut self.inner).push(&code.inner).map_err(to_py)
    }

    #[getter]
    fn bits(&self) -> usize {
        self.inner.bits()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __getitem__(&self, id: usize) -> PyResult<PyBinaryCode> {
        if id >= self.inner.len() {
            return Err(PyIndexError::new_err(format!(
                "id {id} out of range for {} codes",
                self.inner.len()
            )));
        }
        Ok(PyBinaryCode {
            inner: self.inner.get(id),
        })
    }

    fn __repr__(&self) -> String {
        format!("CodeBank(n={}, bits={})", self.inner.len(), self.inner.bits())
    }
}

#[pyclass(name = "SearchStats", module = "pydmih", get_all, frozen)]
pub struct PySearchStats {
    buckets_probed: u64,
    candidates_raised: u64,
    candidates_unique: u64,
    candidates_verified: u64,
    survivors: u64,
    wall_time_s: f64,
}

impl From<dmih::SearchStats> for PySearchStats {
    fn from(s: dmih::SearchStats) -> Self {
        Self {
            buckets_probed: s.buckets_probed,
            candidates_raised: s.candidates_raised,
            candidates_unique: s.candidates_unique,
            candidates_verified: s.candidates_verified,
            survivors: s.survivors,
            wall_time_s: s.wall_time.as_secs_f64(),
        }
    }
}

#[pymethods]
impl PySearchStats {
    fn __repr__(&self) -> String {
        format!(
            "SearchStats(buckets_probed={}, candidates_verified={}, survivors={})",
            self.buckets_probed, self.candidates_verified, self.survivors
        )
    }
}

#[pyclass(name = "MihIndex", module = "pydmih", frozen)]
pub struct PyMihIndex {
    inner: dmih::MihIndex,
}

#[pymethods]
impl PyMihIndex {
    #[new]
    #[pyo3(signature = (bank, m=4, strategy="blockwise", branches=1))]
    fn new(py: Python<'_>, bank: &PyCodeBank, m: usize, strategy: &str, branches: usize) -> PyResult<Self> {
        let strategy = self::strategy(strategy)?;
        let bank = bank.inner.clone();
        let inner = py
            .detach(|| dmih::MihIndex::with_params(bank, m, strategy, branches))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf, bank: &PyCodeBank) -> PyResult<Self> {
        let inner = dmih::MihIndex::load(path, bank.inner.clone()).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// Ids of all codes within Hamming distance `k`, ascending.
    fn radius_search(&self, py: Python<'_>, query: &PyBinaryCode, k: usize) -> PyResult<(Vec<u32>, PySearchStats)> {
        let (ids, stats) = py
            .detach(|| self.inner.r_neighbor_search(&query.inner, k))
            .map_err(to_py)?;
        Ok((ids, stats.into()))
    }

    /// `(id, distance)` pairs of the `k` nearest codes, ties broken by id.
    fn knn_search(&self, py: Python<'_>, query: &PyBinaryCode, k: usize) -> PyResult<(Vec<(u32, u32)>, PySearchStats)> {
        let (found, stats) = py.detach(|| self.inner.knn_search(&query.inner, k)).map_err(to_py)?;
        Ok((found.iter().map(|n| (n.id, n.distance)).collect(), stats.into()))
    }

    #[getter]
    fn tables(&self) -> usize {
        self.inner.tables()
    }

    #[getter]
    fn strategy(&self) -> String {
        self.inner.layout().strategy().to_string()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "MihIndex(n={}, m={}, strategy='{}')",
            self.inner.len(),
            self.inner.tables(),
            self.inner.layout().strategy()
        )
    }
}

#[pyclass(name = "Dataset", module = "pydmih", frozen)]
pub struct PyDataset {
    inner: trainer::SyntheticDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (samples=4000, identities=50, cameras=4, branches=3, feature_dim=32, seed=7, split="train"))]
    fn generate(
        samples: usize,
        identities: usize,
        cameras: usize,
        branches: usize,
        feature_dim: usize,
        seed: u64,
        split: &str,
    ) -> PyResult<Self> {
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown split {other:?} (expected train or test)"
                )))
            }
        };
        let params = DatasetParams {
            samples,
            identities,
            cameras,
            branches,
            feature_dim,
            seed,
            split,
            ..DatasetParams::default()
        };
        let inner = trainer::generate(&params).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::SyntheticDataset::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.labels.clone()
    }

    #[getter]
    fn cameras(&self) -> Vec<u32> {
        self.inner.cameras.clone()
    }

    /// Nested `[sample][branch][dim]` lists.
    #[getter]
    fn features(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.features.clone()
    }

    #[getter]
    fn identities(&self) -> usize {
        self.inner.identities()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "HashModel", module = "pydmih")]
pub struct PyHashModel {
    inner: trainer::HashModel,
}

#[pymethods]
impl PyHashModel {
    #[new]
    #[pyo3(signature = (branches, feature_dim, r, classes, alpha=1.0, beta=2.0, gamma=0.5, tables=4, seed=7))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        branches: usize,
        feature_dim: usize,
        r: usize,
        classes: usize,
        alpha: f64,
        beta: f64,
        gamma: f64,
        tables: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let hyper = HyperParams {
            alpha,
            beta,
            gamma,
            tables,
        };
        let inner = trainer::HashModel::init(branches, feature_dim, r, classes, hyper, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::HashModel::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// Trains in place and returns the per-epoch loss trace as dicts.
    #[pyo3(signature = (dataset, epochs=20, learning_rate=0.05, weight_decay=5e-4, p=16, k=4, seed=7))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &PyDataset,
        epochs: usize,
        learning_rate: f64,
        weight_decay: f64,
        p: usize,
        k: usize,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let config = TrainConfig {
            epochs,
            learning_rate,
            weight_decay,
            identities_per_batch: p,
            samples_per_identity: k,
            seed,
        };
        let model = self.inner.clone();
        let (model, trace) = py
            .detach(|| trainer::train(&dataset.inner, model, &config))
            .map_err(to_py)?;
        self.inner = model;
        trace
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("epoch", e.epoch)?;
                d.set_item("learning_rate", e.learning_rate)?;
                d.set_item("total", e.total)?;
                d.set_item("triplet", e.triplet)?;
                d.set_item("classification", e.classification)?;
                d.set_item("sami", e.sami)?;
                Ok(d)
            })
            .collect()
    }

    fn encode(&self, dataset: &PyDataset) -> PyResult<PyCodeBank> {
        let labeled = trainer::encode(&self.inner, &dataset.inner).map_err(to_py)?;
        Ok(PyCodeBank {
            inner: Arc::new(labeled.bank),
        })
    }

    #[getter]
    fn code_bits(&self) -> usize {
        self.inner.code_bits()
    }
}

#[pyfunction]
fn hamming(a: &PyBinaryCode, b: &PyBinaryCode) -> PyResult<u32> {
    dmih::hamming_distance(&a.inner, &b.inner).map_err(to_py)
}

/// Packs a ±1 vector into a code.
#[pyfunction]
fn pack(signs: Vec<i8>) -> PyResult<PyBinaryCode> {
    Ok(PyBinaryCode {
        inner: dmih::pack(&signs).map_err(to_py)?,
    })
}

#[pyfunction]
fn unpack(code: &PyBinaryCode) -> Vec<i8> {
    dmih::unpack(&code.inner)
}

/// Per-table probe radii for an overall radius `k` over `m` tables (-1 means skip).
#[pyfunction]
fn radius_schedule(k: usize, m: usize) -> PyResult<Vec<i64>> {
    if m == 0 {
        return Err(PyValueError::new_err("m must be at least 1"));
    }
    Ok(dmih::radius_schedule(k, m).per_table_radius)
}

#[pyfunction]
fn linear_scan_radius(bank: &PyCodeBank, query: &PyBinaryCode, k: usize) -> Vec<u32> {
    dmih::oracle::linear_scan_radius(&bank.inner, &query.inner, k)
}

#[pyfunction]
fn linear_scan_knn(bank: &PyCodeBank, query: &PyBinaryCode, k: usize) -> Vec<(u32, u32)> {
    dmih::oracle::linear_scan_knn(&bank.inner, &query.inner, k)
        .iter()
        .map(|n| (n.id, n.distance))
        .collect()
}

/// Batch-hard triplet loss on relaxed codes in [-1, 1].
#[pyfunction]
#[pyo3(signature = (codes, labels, alpha=1.0))]
fn triplet_loss(codes: Vec<Vec<f64>>, labels: Vec<u32>, alpha: f64) -> PyResult<f64> {
    let codes = codes.into_iter().map(relaxed).collect::<PyResult<Vec<_>>>()?;
    Ok(dmih::losses::triplet_loss_batch_hard(&codes, &labels, alpha)
        .map_err(to_py)?
        .value)
}

/// SAMI loss over `[sample][table][bit]` relaxed keys.
#[pyfunction]
fn sami_loss(keys: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    let keys = keys
        .into_iter()
        .map(|s| s.into_iter().map(relaxed).collect::<PyResult<Vec<_>>>())
        .collect::<PyResult<Vec<_>>>()?;
    Ok(dmih::losses::sami_loss(&keys).map_err(to_py)?.value)
}

/// Cross-camera mAP and CMC of Hamming ranking over a labelled bank.
#[pyfunction]
#[pyo3(signature = (bank, labels, cameras, ranks=vec![1, 5, 10, 20], top_n=20))]
fn evaluate<'py>(
    py: Python<'py>,
    bank: &PyCodeBank,
    labels: Vec<u32>,
    cameras: Vec<u32>,
    ranks: Vec<usize>,
    top_n: usize,
) -> PyResult<Bound<'py, PyDict>> {
    if labels.len() != bank.inner.len() {
        return Err(PyValueError::new_err(format!(
            "{} labels for {} codes",
            labels.len(),
            bank.inner.len()
        )));
    }
    let protocol = RetrievalProtocol::reid(&labels, &cameras, top_n).map_err(to_py)?;
    let data = LabeledBank {
        bank: (*bank.inner).clone(),
        features: vec![Vec::new(); labels.len()],
        labels,
        cameras,
    };
    let metrics = evaluate_ranking(&data, &protocol, &ranks).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("map", metrics.map)?;
    d.set_item("cmc", metrics.cmc)?;
    d.set_item("evaluated_queries", metrics.evaluated_queries)?;
    Ok(d)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBinaryCode>()?;
    m.add_class::<PyCodeBank>()?;
    m.add_class::<PySearchStats>()?;
    m.add_class::<PyMihIndex>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyHashModel>()?;
    m.add_function(wrap_pyfunction!(hamming, m)?)?;
    m.add_function(wrap_pyfunction!(pack, m)?)?;
    m.add_function(wrap_pyfunction!(unpack, m)?)?;
    m.add_function(wrap_pyfunction!(radius_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(linear_scan_radius, m)?)?;
    m.add_function(wrap_pyfunction!(linear_scan_knn, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(sami_loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

#[pymodule]
fn pydmih(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
