//! Python bindings: matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use biam_core::biam::{biam_forward, monotonicity_score};
use biam_core::ctc::{ctc_bruteforce, ctc_greedy_decode, ctc_loss, GraphemeSequence};
use biam_core::data::{
    split_heldout, synth_corpus as core_synth_corpus, SynthConfig, Utterance as CoreUtterance,
};
use biam_core::export::export_alignment;
use biam_core::gradcheck::{self, GradcheckOptions};
use biam_core::losses::cosine_distance_loss;
use biam_core::train::{
    character_error_rate as core_cer, evaluate, finetune_paired, metrics_csv, pretrain_unpaired,
    train_paired, Checkpoint as CoreCheckpoint, TrainConfig as CoreTrainConfig, MONOTONICITY_BAND,
};
use biam_core::{Error, Matrix};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &Rows) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(to_py)
}

fn sequence(tokens: Vec<usize>) -> PyResult<GraphemeSequence> {
    GraphemeSequence::new(tokens).map_err(to_py)
}

/// Output of the bidirectional attention on one pair of sequences.
#[pyclass(frozen, get_all)]
pub struct Alignment {
    pub w12: Rows,
    pub w21: Rows,
    pub x_aligned: Rows,
    pub y_aligned: Rows,
}

/// Bidirectional attention of speech `x` (n1×d) and text `y` (n2×d).
#[pyfunction]
fn biam(x: Rows, y: Rows) -> PyResult<Alignment> {
    let out = biam_forward(&matrix(&x)?, &matrix(&y)?).map_err(to_py)?;
    Ok(Alignment {
        w12: out.w12.to_rows(),
        w21: out.w21.to_rows(),
        x_aligned: out.x_aligned.to_rows(),
        y_aligned: out.y_aligned.to_rows(),
    })
}

#[pyfunction]
#[pyo3(signature = (w12, band = MONOTONICITY_BAND))]
fn monotonicity(w12: Rows, band: f64) -> PyResult<f64> {
    Ok(monotonicity_score(&matrix(&w12)?, band))
}

/// CTC negative log-likelihood and its gradient with respect to the logits.
#[pyfunction]
fn ctc(logits: Rows, target: Vec<usize>) -> PyResult<(f64, Rows)> {
    let out = ctc_loss(&matrix(&logits)?, &sequence(target)?).map_err(to_py)?;
    Ok((out.loss, out.grad_logits.to_rows()))
}

/// CTC loss by explicit path enumeration (small instances only).
#[pyfunction]
fn ctc_enumerate(logits: Rows, target: Vec<usize>) -> PyResult<f64> {
    ctc_bruteforce(&matrix(&logits)?, &sequence(target)?).map_err(to_py)
}

#[pyfunction]
fn greedy_decode(logits: Rows) -> PyResult<Vec<usize>> {
    Ok(ctc_greedy_decode(&matrix(&logits)?).tokens().to_vec())
}

#[pyfunction]
fn cosine_distance(y_aligned: Rows, x: Rows) -> PyResult<f64> {
    Ok(cosine_distance_loss(&matrix(&y_aligned)?, &matrix(&x)?)
        .map_err(to_py)?
        .loss)
}

/// Micro-averaged character error rate over (hypothesis, reference) pairs.
#[pyfunction]
fn character_error_rate(pairs: Vec<(Vec<usize>, Vec<usize>)>) -> PyResult<f64> {
    let pairs = pairs
        .into_iter()
        .map(|(h, r)| Ok((sequence(h)?, sequence(r)?)))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(core_cer(&pairs))
}

/// Runs the finite-difference gradient checks; returns one dict per operation.
#[pyfunction]
#[pyo3(signature = (scope = "all", seed = 1))]
fn run_gradcheck<'py>(
    py: Python<'py>,
    scope: &str,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let report = gradcheck::run(&GradcheckOptions {
        scope: Some(scope.to_string()),
        seed,
        corrupt: None,
    })
    .map_err(to_py)?;
    report
        .ops
        .iter()
        .map(|o| {
            let d = PyDict::new(py);
            d.set_item("module", o.module)?;
            d.set_item("op", o.op)?;
            d.set_item("worst_relative_error", o.worst_relative_error)?;
            d.set_item("passed", o.passed)?;
            Ok(d)
        })
        .collect()
}

#[pyclass(frozen, get_all, from_py_object)]
#[derive(Clone)]
pub struct Utterance {
    pub id: String,
    pub speech: Rows,
    pub graphemes: Vec<usize>,
}

impl Utterance {
    fn to_core(&self) -> PyResult<CoreUtterance> {
        Ok(CoreUtterance {
            id: self.id.clone(),
            speech: matrix(&self.speech)?,
            graphemes: sequence(self.graphemes.clone())?,
            alignment: None,
        })
    }
}

fn core_corpus(corpus: &[Utterance]) -> PyResult<Vec<CoreUtterance>> {
    corpus.iter().map(Utterance::to_core).collect()
}

/// Synthetic paired corpus; `config` is a JSON object of generator
/// settings overriding the defaults.
#[pyfunction]
#[pyo3(signature = (config = "{}"))]
fn synth_corpus(config: &str) -> PyResult<Vec<Utterance>> {
    let cfg: SynthConfig =
        serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(core_synth_corpus(&cfg)
        .map_err(to_py)?
        .into_iter()
        .map(|u| Utterance {
            id: u.id,
            speech: u.speech.to_rows(),
            graphemes: u.graphemes.tokens().to_vec(),
        })
        .collect())
}

/// Training configuration; construct from a JSON object of overrides.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct TrainConfig {
    inner: CoreTrainConfig,
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (json = "{}"))]
    fn new(json: &str) -> PyResult<Self> {
        let inner: CoreTrainConfig =
            serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(to_py)?;
        Ok(TrainConfig { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.hash()
    }
}

#[pyclass(frozen)]
pub struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn untrained(config: &TrainConfig) -> Self {
        Checkpoint {
            inner: CoreCheckpoint::untrained(&config.inner),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Checkpoint {
            inner: CoreCheckpoint::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn stage(&self) -> String {
        self.inner.stage.clone()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn config(&self) -> TrainConfig {
        TrainConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn transcribe(&self, speech: Rows) -> PyResult<Vec<usize>> {
        Ok(self
            .inner
            .model
            .transcribe(&matrix(&speech)?)
            .map_err(to_py)?
            .tokens()
            .to_vec())
    }

    /// Speech-to-text attention weights (n1×n2).
    fn alignment(&self, speech: Rows, graphemes: Vec<usize>) -> PyResult<Rows> {
        Ok(self
            .inner
            .model
            .alignment(&matrix(&speech)?, &sequence(graphemes)?)
            .map_err(to_py)?
            .to_rows())
    }

    /// Writes `<prefix>.w12.csv` and `<prefix>.w12.pgm` for one utterance.
    fn export_alignment(
        &self,
        utterance: &Utterance,
        prefix: PathBuf,
    ) -> PyResult<(PathBuf, PathBuf)> {
        let u = utterance.to_core()?;
        let w12 = self
            .inner
            .model
            .alignment(&u.speech, &u.graphemes)
            .map_err(to_py)?;
        export_alignment(&w12, &prefix).map_err(to_py)
    }

    /// Evaluation on the held-out tail of `corpus` (or all of it).
    #[pyo3(signature = (corpus, heldout_only = true))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        corpus: Vec<Utterance>,
        heldout_only: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let corpus = core_corpus(&corpus)?;
        let subset = if heldout_only {
            split_heldout(&corpus).1
        } else {
            &corpus[..]
        };
        let r = evaluate(subset, &self.inner).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("cer", r.cer)?;
        d.set_item("monotonicity", r.mean_monotonicity)?;
        d.set_item("total_loss", r.breakdown.total)?;
        d.set_item("utterances", r.utterances)?;
        d.set_item("skipped", r.skipped)?;
        Ok(d)
    }
}

/// Paired training; returns the checkpoint and the per-epoch metrics CSV.
#[pyfunction]
fn train(
    py: Python<'_>,
    corpus: Vec<Utterance>,
    config: &TrainConfig,
) -> PyResult<(Checkpoint, String)> {
    let corpus = core_corpus(&corpus)?;
    let cfg = config.inner.clone();
    let (ckpt, history) = py.detach(|| train_paired(&corpus, &cfg)).map_err(to_py)?;
    Ok((Checkpoint { inner: ckpt }, metrics_csv(&history)))
}

/// Text-only decoder pretraining; returns the checkpoint and per-epoch losses.
#[pyfunction]
fn pretrain_text(
    py: Python<'_>,
    texts: Vec<Vec<usize>>,
    checkpoint: &Checkpoint,
) -> PyResult<(Checkpoint, Vec<f64>)> {
    let texts = texts
        .into_iter()
        .map(sequence)
        .collect::<PyResult<Vec<_>>>()?;
    let ckpt = checkpoint.inner.clone();
    let cfg = ckpt.config.clone();
    let (ckpt, losses) = py
        .detach(|| pretrain_unpaired(&texts, ckpt, &cfg))
        .map_err(to_py)?;
    Ok((Checkpoint { inner: ckpt }, losses))
}

#[pyfunction]
fn finetune(
    py: Python<'_>,
    corpus: Vec<Utterance>,
    checkpoint: &Checkpoint,
) -> PyResult<(Checkpoint, String)> {
    let corpus = core_corpus(&corpus)?;
    let ckpt = checkpoint.inner.clone();
    let cfg = ckpt.config.clone();
    let (ckpt, history) = py
        .detach(|| finetune_paired(&corpus, ckpt, &cfg))
        .map_err(to_py)?;
    Ok((Checkpoint { inner: ckpt }, metrics_csv(&history)))
}

#[pymodule(name = "biam")]
fn biam_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Alignment>()?;
    m.add_class::<Utterance>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(biam, m)?)?;
    m.add_function(wrap_pyfunction!(monotonicity, m)?)?;
    m.add_function(wrap_pyfunction!(ctc, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_enumerate, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_distance, m)?)?;
    m.add_function(wrap_pyfunction!(character_error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_text, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    Ok(())
}
