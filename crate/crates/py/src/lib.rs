//! Python bindings: configs, datasets, trained models, indexes, sessions,
//! evaluation and the self-test suites.

use std::collections::HashMap;
use std::sync::Arc;

use partfit_core::baseline::evaluate_all;
use partfit_core::dataprep::{DatasetPair, Part};
use partfit_core::error::Error;
use partfit_core::geometry::{normalize_part, PointCloud};
use partfit_core::model::TrainedModel;
use partfit_core::pipeline::{desk_run, generate, metrics_for, prepare, train_encoder, train_relnet, DeskConfig};
use partfit_core::relnet::RelNetSnapshot;
use partfit_core::retrieval::{
    advance_session, build_index, prepare_query, RankedCandidate, Session as CoreSession, SlotTarget, WarehouseIndex,
};
use partfit_core::selftest::{run_all, SuiteSizes};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(partfit, PartfitError, PyException, "A pipeline error; `args[0]` starts with its category.");

fn err(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.category());
    match e {
        Error::InvalidInput(_) | Error::DegeneratePart(_) | Error::NonFinite(_) | Error::Config(_) | Error::Usage(_) => {
            PyValueError::new_err(msg)
        }
        _ => PartfitError::new_err(msg),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn cloud(points: Vec<[f32; 3]>) -> PyResult<PointCloud> {
    PointCloud::new(points).map_err(err)
}

/// Desk configuration; every field has a default.
#[pyclass(module = "partfit", name = "Config")]
struct PyConfig {
    inner: DeskConfig,
}

#[pymethods]
impl PyConfig {
    /// `json` overrides defaults field by field; `seed` overrides `json`.
    #[new]
    #[pyo3(signature = (json=None, seed=None))]
    fn new(json: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut inner: DeskConfig = match json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
            None => DeskConfig::default(),
        };
        if let Some(s) = seed {
            inner.seed = s;
        }
        Ok(PyConfig { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| err(e.into()))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, classes={:?}, count={})", self.inner.seed, self.inner.classes, self.inner.count)
    }
}

/// Prepared items plus the warehouse of normalized parts.
#[pyclass(module = "partfit", frozen)]
struct Dataset {
    inner: Arc<DatasetPair>,
}

#[pymethods]
impl Dataset {
    /// Synthesizes the raw corpus and prepares it.
    #[staticmethod]
    fn generate(py: Python<'_>, config: &PyConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let data = py.detach(|| generate(&cfg).and_then(|raw| prepare(&raw, &cfg))).map_err(err)?;
        Ok(Dataset { inner: Arc::new(data) })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            inner: Arc::new(DatasetPair::load(&path).map_err(err)?),
        })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.items.len()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.labels.classes.clone()
    }

    #[getter]
    fn part_labels(&self) -> Vec<String> {
        self.inner.labels.part_labels.clone()
    }

    #[getter]
    fn object_ids(&self) -> Vec<String> {
        self.inner.items.iter().map(|o| o.object_id.clone()).collect()
    }

    /// Objects kept out of training.
    #[getter]
    fn holdout(&self) -> Vec<String> {
        self.inner.holdout.iter().cloned().collect()
    }

    #[getter]
    fn warehouse_size(&self) -> usize {
        self.inner.warehouse.len()
    }

    /// Part ids of one object, in stored order.
    fn object_parts(&self, object_id: &str) -> PyResult<Vec<u64>> {
        self.inner
            .items
            .iter()
            .find(|o| o.object_id == object_id)
            .map(|o| o.parts.iter().map(|p| p.part_id).collect())
            .ok_or_else(|| PyValueError::new_err(format!("no object {object_id:?}")))
    }

    /// A warehouse part: label, class, pose and points in its normalized frame.
    fn part<'py>(&self, py: Python<'py>, part_id: u64) -> PyResult<Bound<'py, PyDict>> {
        let p = self
            .inner
            .warehouse
            .iter()
            .find(|p| p.part_id == part_id)
            .ok_or_else(|| err(Error::UnknownPart(part_id)))?;
        let d = PyDict::new(py);
        d.set_item("part_id", p.part_id)?;
        d.set_item("label", &self.inner.labels.part_labels[p.part_label as usize])?;
        d.set_item("object_class", &self.inner.labels.classes[p.object_class as usize])?;
        d.set_item("source_object", &p.source_object)?;
        d.set_item("pose", json_to_py(py, &p.pose)?)?;
        d.set_item("points", p.cloud.points().to_vec())?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(items={}, holdout={}, warehouse={})",
            self.inner.items.len(),
            self.inner.holdout.len(),
            self.inner.warehouse.len()
        )
    }
}

/// Part encoder plus, after stage 2, the relation network.
#[pyclass(module = "partfit", frozen)]
struct Model {
    inner: Arc<TrainedModel>,
}

impl Model {
    fn relnet(&self) -> PyResult<RelNetSnapshot> {
        Ok(self.inner.snapshots().map_err(err)?.1)
    }
}

#[pymethods]
impl Model {
    /// Runs both training stages.
    #[staticmethod]
    fn train(py: Python<'_>, dataset: &Dataset, config: &PyConfig) -> PyResult<Self> {
        let (data, cfg) = (dataset.inner.clone(), config.inner.clone());
        let model = py
            .detach(|| -> partfit_core::error::Result<TrainedModel> {
                let (encoder, s1) = train_encoder(&data, &cfg)?;
                let (relnet, _) = train_relnet(&data, &encoder.snapshot(), &cfg)?;
                Ok(TrainedModel {
                    labels: data.labels.clone(),
                    encoder,
                    relnet: Some(relnet),
                    stats: Some(s1.stats),
                })
            })
            .map_err(err)?;
        Ok(Model { inner: Arc::new(model) })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: Arc::new(TrainedModel::load(&path).map_err(err)?),
        })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn encoder_hash(&self) -> String {
        self.inner.encoder_hash()
    }

    #[getter]
    fn has_relnet(&self) -> bool {
        self.inner.relnet.is_some()
    }

    /// Feature vector of a part given in any frame; it is normalized first.
    fn encode(&self, points: Vec<[f32; 3]>) -> PyResult<Vec<f32>> {
        let (normalized, _) = normalize_part(&cloud(points)?).map_err(err)?;
        self.inner.encoder_snapshot().encode(&normalized).map_err(err)
    }
}

/// Encoded warehouse parts.
#[pyclass(module = "partfit", frozen)]
struct Index {
    inner: Arc<WarehouseIndex>,
}

#[pymethods]
impl Index {
    #[staticmethod]
    fn build(py: Python<'_>, dataset: &Dataset, model: &Model) -> PyResult<Self> {
        let (data, model) = (dataset.inner.clone(), model.inner.clone());
        let index = py
            .detach(|| {
                let parts: Vec<&Part> = data.warehouse.iter().collect();
                build_index(&parts, &model.encoder_snapshot())
            })
            .map_err(err)?;
        Ok(Index { inner: Arc::new(index) })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Index {
            inner: Arc::new(WarehouseIndex::load(&path).map_err(err)?),
        })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn encoder_hash(&self) -> String {
        self.inner.encoder_hash().to_string()
    }

    fn checksum(&self) -> PyResult<String> {
        self.inner.checksum().map_err(err)
    }
}

/// Interactive retrieval: rank candidates for the active slot, choose one,
/// repeat until every slot is filled.
#[pyclass(module = "partfit")]
struct Session {
    session: CoreSession,
    relnet: RelNetSnapshot,
    index: Arc<WarehouseIndex>,
    data: Arc<DatasetPair>,
    parts: HashMap<u64, usize>,
}

fn candidate<'py>(py: Python<'py>, data: &DatasetPair, index: &WarehouseIndex, c: &RankedCandidate) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("part_id", c.part_id)?;
    d.set_item("rank", c.rank)?;
    d.set_item("log_prob", c.log_prob)?;
    d.set_item("suitability", c.suitability)?;
    if let Some(r) = index.get(c.part_id) {
        d.set_item("label", &data.labels.part_labels[r.part_label as usize])?;
        d.set_item("object_class", &data.labels.classes[r.object_class as usize])?;
    }
    Ok(d)
}

#[pymethods]
impl Session {
    /// `parts` are point lists and `slots` centroids, all in one common frame.
    #[new]
    #[pyo3(signature = (model, index, dataset, class_name, parts, slots, labels=None))]
    fn new(
        model: &Model,
        index: &Index,
        dataset: &Dataset,
        class_name: &str,
        parts: Vec<Vec<[f32; 3]>>,
        slots: Vec<[f32; 3]>,
        labels: Option<Vec<Option<String>>>,
    ) -> PyResult<Self> {
        let tables = &dataset.inner.labels;
        let class = tables
            .class_id(class_name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown class {class_name:?}")))?;
        index.inner.check_encoder(&model.inner.encoder_hash()).map_err(err)?;
        let labels = labels.unwrap_or_else(|| vec![None; parts.len()]);
        if labels.len() != parts.len() {
            return Err(PyValueError::new_err("labels must match parts one to one"));
        }
        let mut query = Vec::with_capacity(parts.len());
        for (pts, label) in parts.into_iter().zip(labels) {
            let label = match label {
                Some(n) => Some(tables.part_label_id(&n).ok_or_else(|| PyValueError::new_err(format!("unknown label {n:?}")))?),
                None => None,
            };
            query.push((cloud(pts)?, label));
        }
        let slots: Vec<SlotTarget> = slots
            .into_iter()
            .map(|centroid| SlotTarget {
                centroid,
                axis: None,
                scale: None,
            })
            .collect();
        let q = prepare_query(query, &slots, &model.inner.encoder_snapshot()).map_err(err)?;
        let session = CoreSession::new(class, q.parts, q.slots).map_err(err)?;
        let parts = dataset.inner.warehouse.iter().enumerate().map(|(i, p)| (p.part_id, i)).collect();
        Ok(Session {
            session,
            relnet: model.relnet()?,
            index: index.inner.clone(),
            data: dataset.inner.clone(),
            parts,
        })
    }

    /// Ranks the warehouse for the active slot and remembers the ranking as
    /// shown; `choose` accepts only parts from it.
    #[pyo3(signature = (k=10))]
    fn candidates<'py>(&mut self, py: Python<'py>, k: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let ranking = self.session.candidates(&self.index, &self.relnet, k).map_err(err)?;
        let out = ranking
            .iter()
            .map(|c| candidate(py, &self.data, &self.index, c))
            .collect::<PyResult<Vec<_>>>()?;
        self.session.show(ranking);
        Ok(out)
    }

    fn choose(&mut self, part_id: u64) -> PyResult<()> {
        if self.session.is_complete() {
            return Err(err(Error::RejectedChoice("every slot is already filled".into())));
        }
        let i = *self.parts.get(&part_id).ok_or_else(|| err(Error::UnknownPart(part_id)))?;
        advance_session(&mut self.session, &self.data.warehouse[i], &self.index).map_err(err)?;
        Ok(())
    }

    #[getter]
    fn complete(&self) -> bool {
        self.session.is_complete()
    }

    #[getter]
    fn active_slot(&self) -> Option<usize> {
        (!self.session.is_complete()).then_some(self.session.active)
    }

    /// Warehouse parts placed so far, in slot order.
    #[getter]
    fn placed(&self) -> Vec<u64> {
        self.session.parts.iter().filter_map(|p| p.part_id).collect()
    }
}

/// Trains on a fresh corpus and indexes it: `(dataset, model, index)`.
#[pyfunction]
fn run_desk(py: Python<'_>, config: &PyConfig) -> PyResult<(Dataset, Model, Index)> {
    let cfg = config.inner.clone();
    let run = py.detach(|| desk_run(&cfg)).map_err(err)?;
    Ok((
        Dataset { inner: Arc::new(run.data) },
        Model { inner: Arc::new(run.model) },
        Index { inner: Arc::new(run.index) },
    ))
}

/// Baseline comparison and desk metrics: `{"table", "digest", "rows", "metrics"}`.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, dataset: &Dataset, model: &Model, index: &Index, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    let (data, idx, cfg) = (dataset.inner.clone(), index.inner.clone(), config.inner.clone());
    let enc = model.inner.encoder_snapshot();
    let rel = model.relnet()?;
    idx.check_encoder(enc.hash()).map_err(err)?;
    let (table, metrics) = py
        .detach(|| -> partfit_core::error::Result<_> {
            let table = evaluate_all(&data, &enc, &rel, &idx, &cfg.eval)?;
            let metrics = metrics_for(&data, &enc, &rel, &idx, &cfg)?;
            Ok((table, metrics))
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("table", table.to_text())?;
    d.set_item("digest", table.content_digest())?;
    d.set_item("rows", json_to_py(py, &table.rows)?)?;
    d.set_item("metrics", json_to_py(py, &metrics)?)?;
    Ok(d)
}

/// Gradient, invariance, closed-form and clustering checks.
#[pyfunction]
#[pyo3(signature = (gradient_trials=100, invariance_cases=50, dbscan_instances=200))]
fn selftest<'py>(
    py: Python<'py>,
    gradient_trials: usize,
    invariance_cases: usize,
    dbscan_instances: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let results = py.detach(|| {
        run_all(SuiteSizes {
            gradient_trials,
            invariance_cases,
            dbscan_instances,
        })
    });
    results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", &r.name)?;
            d.set_item("passed", r.passed())?;
            d.set_item("line", r.line())?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn partfit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("PartfitError", m.py().get_type::<PartfitError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Index>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(run_desk, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
