//! Python bindings: datasets, label noise, MVS views, the scalar losses and
//! end-to-end runs. Reports come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use tshn_core::config::RunConfig;
use tshn_core::distiller as dist;
use tshn_core::evalbench::{self, Classifier, Method};
use tshn_core::gradnet::{load_checkpoint, EmbeddingNetwork};
use tshn_core::mvs::{self, MvsConfig};
use tshn_core::noiselab::{self, NoiseArg, TransitionMatrix};
use tshn_core::protomind::{self, Distance, PrototypeBank, Similarity};
use tshn_core::rng;
use tshn_core::sigsynth::{self, Dataset, SignalRecord};

fn err(e: tshn_core::Error) -> PyErr {
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<TransitionMatrix> {
    TransitionMatrix::from_rows(rows).map_err(err)
}

/// A labeled IQ dataset held in memory.
#[pyclass(name = "Dataset", module = "tshn")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthesize `per_class` records for every (class, SNR) pair.
    #[staticmethod]
    #[pyo3(signature = (classes=None, per_class=200, snrs=vec![0, 10, 18], sample_len=128, seed=7))]
    fn synthesize(classes: Option<Vec<String>>, per_class: usize, snrs: Vec<i16>, sample_len: usize, seed: u64) -> PyResult<Self> {
        let mut cfg = tshn_core::config::DataConfig { per_class, snrs, sample_len, seed, ..Default::default() };
        if let Some(c) = classes {
            cfg.classes = c;
        }
        let (m, records) = sigsynth::generate_dataset(&cfg.request().map_err(err)?).map_err(err)?;
        Ok(Self { inner: Dataset { class_names: m.class_names, sample_len: m.sample_len, records } })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (_, inner) = sigsynth::read_dataset(&dir).map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        let d = &self.inner;
        let manifest = sigsynth::DatasetManifest {
            format_version: sigsynth::FORMAT_VERSION,
            class_names: d.class_names.clone(),
            sample_len: d.sample_len,
            samples_per_symbol: sigsynth::DEFAULT_SAMPLES_PER_SYMBOL,
            seed: 0,
            impairments: Default::default(),
            counts: sigsynth::DatasetManifest::count(&d.class_names, &d.records),
            total_records: d.records.len(),
            provenance: Vec::new(),
        };
        std::fs::create_dir_all(&dir)?;
        sigsynth::write_dataset(&dir, &manifest, &d.records).map_err(err)
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    #[getter]
    fn sample_len(&self) -> usize {
        self.inner.sample_len
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.records.iter().map(|r| usize::from(r.label)).collect()
    }

    /// `(id, label, snr_db, i, q)` of record `index`.
    #[allow(clippy::type_complexity)]
    fn record(&self, index: usize) -> PyResult<(u64, usize, i16, Vec<f32>, Vec<f32>)> {
        let r = self.inner.records.get(index).ok_or_else(|| PyValueError::new_err("index out of range"))?;
        Ok((r.id, usize::from(r.label), r.snr_db, r.i_row().to_vec(), r.q_row().to_vec()))
    }
}

/// Transition matrix implied by a noise spec such as `sym:0.8` or `mixed:0.6`.
#[pyfunction]
#[pyo3(signature = (noise, class_names, seed=0))]
fn spec_to_matrix(noise: &str, class_names: Vec<String>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let spec = noise.parse::<NoiseArg>().and_then(|a| a.resolve(&class_names, seed)).map_err(err)?;
    Ok(noiselab::spec_to_matrix(&spec, class_names.len()).map_err(err)?.rows())
}

/// Observed labels after corruption; ids are the label positions.
#[pyfunction]
#[pyo3(signature = (labels, noise, class_names, seed=0))]
fn corrupt(labels: Vec<usize>, noise: &str, class_names: Vec<String>, seed: u64) -> PyResult<Vec<usize>> {
    let spec = noise.parse::<NoiseArg>().and_then(|a| a.resolve(&class_names, seed)).map_err(err)?;
    let ids: Vec<u64> = (0..labels.len() as u64).collect();
    Ok(noiselab::corrupt(&labels, &ids, &spec, class_names.len()).map_err(err)?.0)
}

#[pyfunction]
fn empirical_transition(true_labels: Vec<usize>, observed: Vec<usize>, n_classes: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(noiselab::empirical_transition(&true_labels, &observed, n_classes).map_err(err)?.rows())
}

/// One segment-permute-splice view of an I/Q pair.
#[pyfunction]
#[pyo3(signature = (i, q, n_segments=4, min_segment_len=8, seed=0))]
fn mvs_view(i: Vec<f32>, q: Vec<f32>, n_segments: usize, min_segment_len: usize, seed: u64) -> PyResult<(Vec<f32>, Vec<f32>)> {
    if i.len() != q.len() {
        return Err(PyValueError::new_err("I and Q must have the same length"));
    }
    let len = i.len();
    let rec = SignalRecord { id: 0, label: 0, snr_db: 0, iq: [i, q].concat() };
    let cfg = MvsConfig { n_segments, min_segment_len, ..Default::default() };
    let v = mvs::mvs_view(&rec, &cfg, &mut rng::seeded(seed)).map_err(err)?;
    Ok((v.iq[..len].to_vec(), v.iq[len..].to_vec()))
}

#[pyfunction]
fn cross_entropy(logits: Vec<f64>, target: usize) -> f64 {
    dist::cross_entropy(&logits, target)
}

#[pyfunction]
fn smoothed_ce(logits: Vec<f64>, target: usize, epsilon: f64) -> f64 {
    dist::smoothed_ce(&logits, target, epsilon)
}

#[pyfunction]
fn forward_corrected_ce(logits: Vec<f64>, observed: usize, transition: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(dist::forward_corrected_ce(&logits, observed, &matrix(transition)?))
}

/// Softmax over scaled cosine similarity to each prototype.
#[pyfunction]
#[pyo3(signature = (feature, prototypes, scale=1.0))]
fn soft_label(feature: Vec<f64>, prototypes: Vec<Vec<f64>>, scale: f64) -> PyResult<Vec<f64>> {
    let mut bank = PrototypeBank::new(prototypes.len(), 1.0, 1, 0).map_err(err)?;
    let protos: Vec<(usize, Vec<f64>)> = prototypes.into_iter().enumerate().collect();
    bank.ema_update(&protos).map_err(err)?;
    let sim = Similarity { distance: Distance::NegCosine, scale };
    Ok(protomind::soft_label(&feature, &bank, &sim).map_err(err)?.p)
}

/// GLC estimate from predicted probabilities on trusted samples.
#[pyfunction]
fn glc_from_predictions(probs: Vec<Vec<f64>>, true_labels: Vec<usize>, n_classes: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(dist::glc_from_predictions(&probs, &true_labels, n_classes).map_err(err)?.0.rows())
}

/// Default run configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml().map_err(err)
}

/// Train and evaluate one run. `config` is a TOML document (defaults when
/// omitted); `method` and `noise` override it. Returns the run record.
#[pyfunction]
#[pyo3(signature = (dataset, config=None, method=None, noise=None, seed=0, out_dir=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    config: Option<&str>,
    method: Option<&str>,
    noise: Option<&str>,
    seed: u64,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = match config {
        Some(s) => RunConfig::from_toml(s).map_err(err)?,
        None => RunConfig::default(),
    };
    if let Some(n) = noise {
        cfg.noise = n.to_string();
    }
    let method: Method = match method {
        Some(m) => m.parse().map_err(err)?,
        None => cfg.eval.method,
    };
    cfg.validate().map_err(err)?;
    let exp = cfg.experiment(method).map_err(err)?;
    let ds = &dataset.inner;
    let record = py
        .detach(|| evalbench::run_experiment(ds, &exp, seed, out_dir.as_deref()))
        .map_err(err)?;
    to_py(py, &record)
}

/// A trained network restored from a checkpoint.
#[pyclass(name = "Model", module = "tshn")]
struct PyModel {
    net: EmbeddingNetwork<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(&path)?);
        Ok(Self { net: load_checkpoint(&mut r).map_err(err)?.net })
    }

    fn predict(&self, dataset: &PyDataset) -> PyResult<Vec<usize>> {
        self.net.predict(&dataset.inner.records).map_err(err)
    }

    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        let e = evalbench::evaluate(&self.net, &dataset.inner.records, dataset.inner.n_classes()).map_err(err)?;
        to_py(py, &e)
    }
}

#[pymodule]
fn tshn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(spec_to_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_transition, m)?)?;
    m.add_function(wrap_pyfunction!(mvs_view, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(smoothed_ce, m)?)?;
    m.add_function(wrap_pyfunction!(forward_corrected_ce, m)?)?;
    m.add_function(wrap_pyfunction!(soft_label, m)?)?;
    m.add_function(wrap_pyfunction!(glc_from_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
