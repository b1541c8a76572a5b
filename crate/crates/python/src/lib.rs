use std::path::PathBuf;

use phrasetag_core::attnfeat::{
    write_archive, Archive as CoreArchive, ArchiveProvider, AttentionTensor, SentKey,
};
use phrasetag_core::classifier::{
    load_checkpoint, save_checkpoint, train as core_train, Checkpoint, TrainConfig,
};
use phrasetag_core::corpus::{self, Document};
use phrasetag_core::eval::{evaluate_tagging as core_eval_tagging, SpanKey};
use phrasetag_core::hash::doc_seed;
use phrasetag_core::labelgen::{self, Gazetteer, LabelRecord, SpanLabel};
use phrasetag_core::tagger::{Decode, PredictionRecord, Tagger};
use phrasetag_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pythonize::pythonize;
use serde::Serialize;

create_exception!(phrasetag, PhrasetagError, PyException);

fn py_err(e: Error) -> PyErr {
    PhrasetagError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize + ?Sized>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    Ok(pythonize(py, value)?)
}

fn label_dicts<'py>(py: Python<'py>, labels: &[SpanLabel]) -> PyResult<Bound<'py, PyAny>> {
    let rows: Vec<serde_json::Value> = labels
        .iter()
        .map(|l| {
            let mut v =
                serde_json::to_value(LabelRecord::from(l)).expect("label record serializes");
            v["phrase"] = l.span.text().into();
            v
        })
        .collect();
    to_py(py, &rows)
}

fn documents(docs: Vec<(String, String)>) -> Vec<Document> {
    docs.into_iter()
        .map(|(id, text)| Document::new(id, text))
        .collect()
}

/// Sentences of lowercased tokens.
#[pyfunction]
fn tokenize(text: &str) -> Vec<Vec<String>> {
    corpus::tokenize_and_split(text)
        .into_iter()
        .map(|s| s.words)
        .collect()
}

#[pyfunction]
fn is_stopword(word: &str) -> bool {
    corpus::is_stopword(word)
}

/// Positive labels from repeated maximal patterns.
#[pyfunction]
#[pyo3(signature = (text, doc_id = "doc", min_freq = 2, k_max = 6))]
fn mine_core_phrases<'py>(
    py: Python<'py>,
    text: &str,
    doc_id: &str,
    min_freq: usize,
    k_max: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let doc = Document::new(doc_id, text);
    let labels = labelgen::mine_core_phrases(&doc, min_freq, k_max).map_err(py_err)?;
    label_dicts(py, &labels)
}

/// Mines positives, then draws as many negatives with the per-document seed.
#[pyfunction]
#[pyo3(signature = (text, doc_id = "doc", seed = 0, min_freq = 2, k_max = 6))]
fn sample_negatives<'py>(
    py: Python<'py>,
    text: &str,
    doc_id: &str,
    seed: u64,
    min_freq: usize,
    k_max: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let doc = Document::new(doc_id, text);
    let pos = labelgen::mine_core_phrases(&doc, min_freq, k_max).map_err(py_err)?;
    let neg = labelgen::sample_negatives(&doc, &pos, k_max, doc_seed(seed, doc_id));
    label_dicts(py, &neg)
}

#[pyfunction]
#[pyo3(signature = (text, phrases, doc_id = "doc", k_max = 6))]
fn match_gazetteer<'py>(
    py: Python<'py>,
    text: &str,
    phrases: Vec<String>,
    doc_id: &str,
    k_max: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let doc = Document::new(doc_id, text);
    let labels = labelgen::gazetteer_match(&doc, &Gazetteer::new(phrases), k_max);
    label_dicts(py, &labels)
}

/// Writes an attention archive. Each tensor is
/// `(doc_id, sent_idx, n_layers, n_heads, n_words, values)` with values flat
/// in layer, head, row, column order.
#[pyfunction]
fn write_attention_archive(
    path: PathBuf,
    tensors: Vec<(String, usize, usize, usize, usize, Vec<f32>)>,
) -> PyResult<()> {
    let tensors = tensors
        .into_iter()
        .map(|(doc, sent, layers, heads, words, values)| {
            AttentionTensor::new(SentKey::new(doc, sent), words, layers, heads, values)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    write_archive(&path, &tensors).map_err(py_err)
}

/// Read-only view of an attention archive.
#[pyclass]
struct AttentionArchive {
    inner: CoreArchive<std::io::BufReader<std::fs::File>>,
}

#[pymethods]
impl AttentionArchive {
    #[new]
    fn open(path: PathBuf) -> PyResult<Self> {
        Ok(AttentionArchive {
            inner: CoreArchive::open(&path).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, key: (String, usize)) -> bool {
        self.inner.contains(&SentKey::new(key.0, key.1))
    }

    /// `(doc_id, sent_idx)` pairs in index order.
    fn keys(&self) -> PyResult<Vec<(String, usize)>> {
        Ok(self
            .inner
            .keys()
            .map_err(py_err)?
            .into_iter()
            .map(|k| (k.doc_id, k.sent_idx))
            .collect())
    }

    /// `(n_layers, n_heads, n_words, values)` for one sentence.
    fn read(&self, doc_id: String, sent_idx: usize) -> PyResult<(usize, usize, usize, Vec<f32>)> {
        let t = self
            .inner
            .read(&SentKey::new(doc_id, sent_idx))
            .map_err(py_err)?;
        Ok((t.n_layers, t.n_heads, t.n_words, t.values))
    }
}

/// Mines labels for `docs`, trains on attention from `archive` and saves the
/// best checkpoint. Returns the per-epoch reports.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (docs, archive, checkpoint, seed = 0, max_epochs = 50, min_freq = 2, k_max = 6))]
fn train<'py>(
    py: Python<'py>,
    docs: Vec<(String, String)>,
    archive: PathBuf,
    checkpoint: PathBuf,
    seed: u64,
    max_epochs: usize,
    min_freq: usize,
    k_max: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let docs = documents(docs);
    let mut labels = Vec::new();
    for d in &docs {
        let pos = labelgen::mine_core_phrases(d, min_freq, k_max).map_err(py_err)?;
        labels.extend(labelgen::sample_negatives(
            d,
            &pos,
            k_max,
            doc_seed(seed, &d.id),
        ));
        labels.extend(pos);
    }
    let provider = ArchiveProvider::open(&archive).map_err(py_err)?;
    let config = TrainConfig {
        seed,
        max_epochs,
        k_max,
        ..TrainConfig::default()
    };
    let outcome = py
        .detach(|| core_train(&docs, &labels, &provider, &config))
        .map_err(py_err)?;
    save_checkpoint(&checkpoint, &outcome.checkpoint).map_err(py_err)?;
    to_py(py, &outcome.epochs)
}

/// A trained span classifier.
#[pyclass]
struct Model {
    checkpoint: Checkpoint,
}

#[pymethods]
impl Model {
    #[new]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            checkpoint: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn input_channels(&self) -> usize {
        self.checkpoint.params.input_channels
    }

    #[getter]
    fn k_max(&self) -> usize {
        self.checkpoint.params.k_max
    }

    /// Checkpoint metadata as a dict.
    fn meta<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.checkpoint.meta)
    }

    /// Tags every sentence of `docs`, reading attention from `archive`.
    #[pyo3(signature = (docs, archive, threshold = 0.5, decode = "overlap"))]
    fn tag<'py>(
        &self,
        py: Python<'py>,
        docs: Vec<(String, String)>,
        archive: PathBuf,
        threshold: f64,
        decode: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let decode: Decode = serde_json::from_value(decode.into())
            .map_err(|_| PhrasetagError::new_err(format!("unknown decode {decode:?}")))?;
        let docs = documents(docs);
        let provider = ArchiveProvider::open(&archive).map_err(py_err)?;
        let tagger =
            Tagger::new(&self.checkpoint.params, &provider, threshold, decode).map_err(py_err)?;
        let out = py.detach(|| tagger.tag_corpus(&docs)).map_err(py_err)?;
        let records: Vec<PredictionRecord> =
            out.predictions.iter().map(PredictionRecord::from).collect();
        to_py(py, &records)
    }
}

/// Micro precision, recall and F1 over exact `(doc_id, sent_idx, start, end)` spans.
#[pyfunction]
fn evaluate_tagging<'py>(
    py: Python<'py>,
    predicted: Vec<SpanKey>,
    gold: Vec<SpanKey>,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core_eval_tagging(&predicted, &gold))
}

#[pymodule]
fn phrasetag(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PhrasetagError", m.py().get_type::<PhrasetagError>())?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(is_stopword, m)?)?;
    m.add_function(wrap_pyfunction!(mine_core_phrases, m)?)?;
    m.add_function(wrap_pyfunction!(sample_negatives, m)?)?;
    m.add_function(wrap_pyfunction!(match_gazetteer, m)?)?;
    m.add_function(wrap_pyfunction!(write_attention_archive, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_tagging, m)?)?;
    m.add_class::<AttentionArchive>()?;
    m.add_class::<Model>()?;
    Ok(())
}
