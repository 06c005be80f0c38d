//! Python bindings for the cst toolkit: the tiny language model, the
//! two-sided preference augmentation, preference-loss evaluation, the
//! two-stage tuning recipe, and the rule judge. The compiled module is
//! `cst_py`; see `python/smoke_test.py` at the workspace root for a usage
//! tour.
//!
//! Errors surface as `ValueError` carrying the library's own message.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use cst_core::critique::{
    synthesize_dataset, toy_persona_prompts, toy_safety_prompts, PromptTemplates, ToyGenerator,
    ToyStyle, MARKER_HONEST, MARKER_PERSONA, MARKER_REFUSAL, MARKER_UNSAFE,
};
use cst_core::data::{CstTuple, Dataset, PreferencePair, SystemPromptPair};
use cst_core::dpo::DpoConfig;
use cst_core::eval::{rule_judge, score_model, RuleJudge};
use cst_core::model::{ReferenceModel, TinyLM, Vocabulary};
use cst_core::train::{lm_warmup, train, Optimizer, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

// ---------------------------------------------------------------------------
// Data types
// ---------------------------------------------------------------------------

/// One synthesized preference pair: a prompt, the draft answer, and its
/// revision.
#[pyclass(name = "PreferencePair", from_py_object)]
#[derive(Clone)]
pub struct PyPreferencePair {
    inner: PreferencePair,
}

#[pymethods]
impl PyPreferencePair {
    #[new]
    #[pyo3(signature = (prompt, original, revised, source_tag = String::from("python")))]
    fn new(prompt: String, original: String, revised: String, source_tag: String) -> PyResult<Self> {
        let inner = PreferencePair { prompt, original, revised, source_tag };
        inner.check().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn prompt(&self) -> String {
        self.inner.prompt.clone()
    }

    #[getter]
    fn original(&self) -> String {
        self.inner.original.clone()
    }

    #[getter]
    fn revised(&self) -> String {
        self.inner.revised.clone()
    }

    #[getter]
    fn source_tag(&self) -> String {
        self.inner.source_tag.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "PreferencePair(prompt={:?}, original={:?}, revised={:?}, source_tag={:?})",
            self.inner.prompt, self.inner.original, self.inner.revised, self.inner.source_tag
        )
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// An opposed pair of system prompts plus the behavior labels scored
/// against each side (label 0 with s0, label 1 with s1).
#[pyclass(name = "SystemPromptPair", from_py_object)]
#[derive(Clone)]
pub struct PySystemPromptPair {
    inner: SystemPromptPair,
}

#[pymethods]
impl PySystemPromptPair {
    #[new]
    fn new(s0: String, s1: String, label0: String, label1: String) -> PyResult<Self> {
        let inner = SystemPromptPair::new(s0, s1, label0, label1).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn s0(&self) -> String {
        self.inner.s0.clone()
    }

    #[getter]
    fn s1(&self) -> String {
        self.inner.s1.clone()
    }

    #[getter]
    fn score_labels(&self) -> (String, String) {
        self.inner.score_labels.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "SystemPromptPair(s0={:?}, s1={:?}, score_labels={:?})",
            self.inner.s0, self.inner.s1, self.inner.score_labels
        )
    }
}

/// One training tuple: prefer `chosen` over `rejected` for `prompt` under
/// `system`.
#[pyclass(name = "CstTuple", from_py_object)]
#[derive(Clone)]
pub struct PyCstTuple {
    inner: CstTuple,
}

#[pymethods]
impl PyCstTuple {
    #[new]
    #[pyo3(signature = (system, prompt, chosen, rejected, source_tag = String::from("python")))]
    fn new(
        system: String,
        prompt: String,
        chosen: String,
        rejected: String,
        source_tag: String,
    ) -> Self {
        Self { inner: CstTuple { system, prompt, chosen, rejected, source_tag } }
    }

    #[getter]
    fn system(&self) -> String {
        self.inner.system.clone()
    }

    #[getter]
    fn prompt(&self) -> String {
        self.inner.prompt.clone()
    }

    #[getter]
    fn chosen(&self) -> String {
        self.inner.chosen.clone()
    }

    #[getter]
    fn rejected(&self) -> String {
        self.inner.rejected.clone()
    }

    #[getter]
    fn source_tag(&self) -> String {
        self.inner.source_tag.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "CstTuple(system={:?}, prompt={:?}, chosen={:?}, rejected={:?}, source_tag={:?})",
            self.inner.system,
            self.inner.prompt,
            self.inner.chosen,
            self.inner.rejected,
            self.inner.source_tag
        )
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

fn to_dataset(tuples: Vec<PyCstTuple>) -> Dataset {
    Dataset::from_tuples(tuples.into_iter().map(|t| t.inner).collect())
}

fn from_dataset(dataset: Dataset) -> Vec<PyCstTuple> {
    dataset.tuples().iter().cloned().map(|inner| PyCstTuple { inner }).collect()
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Frozen snapshot of a model, used as the reference during preference
/// tuning and scoring.
#[pyclass(name = "ReferenceModel")]
pub struct PyReferenceModel {
    inner: ReferenceModel,
}

#[pymethods]
impl PyReferenceModel {
    fn seq_logprob(&self, system: &str, prompt: &str, completion: &str) -> f64 {
        self.inner.seq_logprob(system, prompt, completion)
    }
}

/// The windowed neural language model. Construct it over a corpus (every
/// whitespace token becomes a vocabulary entry), tune it in place with
/// `lm_warmup` and `train`, and read it back with `seq_logprob` and
/// `greedy_generate`.
#[pyclass(name = "TinyLM")]
pub struct PyTinyLM {
    inner: TinyLM,
}

#[pymethods]
impl PyTinyLM {
    #[new]
    fn new(corpus: Vec<String>, k: usize, e: usize, h: usize, seed: u64) -> PyResult<Self> {
        let vocab = Vocabulary::build(&corpus).map_err(value_err)?;
        Ok(Self { inner: TinyLM::new(vocab, k, e, h, seed) })
    }

    /// Log-probability of `completion` (plus end-of-sequence) given the
    /// rendered system prompt and user prompt.
    fn seq_logprob(&self, system: &str, prompt: &str, completion: &str) -> f64 {
        self.inner.seq_logprob(system, prompt, completion)
    }

    /// Greedy decode of at most `max_len` tokens.
    #[pyo3(signature = (system, prompt, max_len = 16))]
    fn greedy_generate(&self, system: &str, prompt: &str, max_len: usize) -> String {
        self.inner.greedy_generate(system, prompt, max_len)
    }

    /// Freeze a copy of the current parameters.
    fn snapshot(&self) -> PyReferenceModel {
        PyReferenceModel { inner: self.inner.snapshot() }
    }

    /// Supervised warm-up: minimise the mean negative log-likelihood of the
    /// chosen completions. Returns the per-epoch mean losses.
    fn lm_warmup(&mut self, tuples: Vec<PyCstTuple>, config: &PyTrainConfig) -> PyResult<Vec<f64>> {
        let dataset = to_dataset(tuples);
        let report = lm_warmup(&mut self.inner, &dataset, &config.inner).map_err(value_err)?;
        Ok(report.epoch_mean_loss)
    }

    /// Preference tuning against a reference snapshotted at entry. Run
    /// `lm_warmup` first so the reference can already decode the preferred
    /// strings. Returns the per-epoch mean losses.
    fn train(&mut self, tuples: Vec<PyCstTuple>, config: &PyTrainConfig) -> PyResult<Vec<f64>> {
        let dataset = to_dataset(tuples);
        let report = train(&mut self.inner, &dataset, &config.inner).map_err(value_err)?;
        Ok(report.epoch_mean_loss)
    }

    /// Serialize every parameter losslessly to JSON.
    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Inverse of `to_json`, bit-identical parameters included.
    #[staticmethod]
    fn from_json(json: &str) -> PyResult<Self> {
        Ok(Self { inner: TinyLM::from_json(json, "python").map_err(value_err)? })
    }

    #[getter]
    fn param_len(&self) -> usize {
        self.inner.params().len()
    }

    #[getter]
    fn vocab_tokens(&self) -> Vec<String> {
        self.inner.vocab().tokens().to_vec()
    }

    fn __repr__(&self) -> String {
        let arch = self.inner.arch();
        format!(
            "TinyLM(vocab={}, k={}, e={}, h={}, params={})",
            self.inner.vocab().len(),
            arch.k,
            arch.e,
            arch.h,
            self.inner.params().len()
        )
    }
}

/// Hyperparameters for one tuning stage.
#[pyclass(name = "TrainConfig")]
pub struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (lr = 0.01, epochs = 30, batch = 8, seed = 42, optimizer = "adam", beta = 0.1))]
    fn new(
        lr: f64,
        epochs: usize,
        batch: usize,
        seed: u64,
        optimizer: &str,
        beta: f64,
    ) -> PyResult<Self> {
        let optimizer = match optimizer {
            "adam" => Optimizer::Adam,
            "sgd" => Optimizer::Sgd,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown optimizer {other:?} (use \"adam\" or \"sgd\")"
                )))
            }
        };
        let inner = TrainConfig {
            learning_rate: lr,
            epochs,
            batch_size: batch,
            seed,
            optimizer,
            dpo: DpoConfig { beta },
            ..TrainConfig::default()
        };
        inner.check().map_err(value_err)?;
        Ok(Self { inner })
    }
}

// ---------------------------------------------------------------------------
// Free functions
// ---------------------------------------------------------------------------

/// Two-sided augmentation: 2n tuples for n pairs, pair i yielding tuples 2i
/// (permissive side, original preferred) and 2i+1 (restrictive side,
/// revision preferred).
#[pyfunction]
fn cst_augment(pairs: Vec<PyPreferencePair>, sp: &PySystemPromptPair) -> PyResult<Vec<PyCstTuple>> {
    let pairs: Vec<PreferencePair> = pairs.into_iter().map(|p| p.inner).collect();
    let dataset = cst_core::data::cst_augment(&pairs, &sp.inner).map_err(value_err)?;
    Ok(from_dataset(dataset))
}

/// One-sided baseline view: one tuple per pair, restrictive prompt only.
#[pyfunction]
fn dpo_only_view(
    pairs: Vec<PyPreferencePair>,
    sp: &PySystemPromptPair,
) -> PyResult<Vec<PyCstTuple>> {
    let pairs: Vec<PreferencePair> = pairs.into_iter().map(|p| p.inner).collect();
    let dataset = cst_core::data::dpo_only_view(&pairs, &sp.inner).map_err(value_err)?;
    Ok(from_dataset(dataset))
}

/// Concatenate two tuple lists and shuffle deterministically by `seed`.
#[pyfunction]
fn mix_datasets(a: Vec<PyCstTuple>, b: Vec<PyCstTuple>, seed: u64) -> Vec<PyCstTuple> {
    let mixed = cst_core::data::mix_datasets(&to_dataset(a), &to_dataset(b), seed);
    from_dataset(mixed)
}

/// Mean preference loss of `policy` against `reference` over `tuples`. With
/// `policy` untouched since the snapshot this is exactly ln 2.
#[pyfunction]
fn dpo_loss(
    policy: &PyTinyLM,
    reference: &PyReferenceModel,
    tuples: Vec<PyCstTuple>,
    beta: f64,
) -> PyResult<f64> {
    let cfg = DpoConfig::new(beta).map_err(value_err)?;
    cst_core::dpo::dpo_loss(&policy.inner, &reference.inner, &to_dataset(tuples), &cfg)
        .map_err(value_err)
}

/// Draft-critique-revise over the built-in deterministic generator. `style`
/// is `"safety"` or `"persona"`.
#[pyfunction]
#[pyo3(signature = (prompts, sp, style, seed = 1, source_tag = String::from("toy")))]
fn synthesize_toy_pairs(
    prompts: Vec<String>,
    sp: &PySystemPromptPair,
    style: &str,
    seed: u64,
    source_tag: String,
) -> PyResult<Vec<PyPreferencePair>> {
    let style = match style {
        "safety" => ToyStyle::Safety,
        "persona" => ToyStyle::Persona,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown toy style {other:?} (use \"safety\" or \"persona\")"
            )))
        }
    };
    let generator = ToyGenerator::new(seed, sp.inner.clone(), style);
    let outcome = synthesize_dataset(
        &generator,
        &prompts,
        &sp.inner,
        &PromptTemplates::default(),
        &source_tag,
        false,
    )
    .map_err(value_err)?;
    Ok(outcome.pairs.into_iter().map(|inner| PyPreferencePair { inner }).collect())
}

/// The built-in marker judge: 1 if `answer` exhibits the behavior `label`
/// names, 0 otherwise.
#[pyfunction]
#[pyo3(name = "rule_judge")]
fn rule_judge_py(label: &str, prompt: &str, answer: &str) -> PyResult<u8> {
    rule_judge(label, prompt, answer).map_err(value_err)
}

/// F1 of binary verdicts against gold verdicts.
#[pyfunction]
fn judge_f1(predictions: Vec<u8>, gold: Vec<u8>) -> PyResult<f64> {
    cst_core::eval::judge_f1(&predictions, &gold).map_err(value_err)
}

/// Generate under both system prompts for every prompt, judge with the
/// rule judge, and return `{label: mean verdict}`.
#[pyfunction]
#[pyo3(name = "score_model", signature = (model_id, model, prompts, sp, max_len = 16))]
fn score_model_py(
    model_id: &str,
    model: &PyTinyLM,
    prompts: Vec<String>,
    sp: &PySystemPromptPair,
    max_len: usize,
) -> PyResult<std::collections::BTreeMap<String, f64>> {
    let report = score_model(model_id, &model.inner, &prompts, &sp.inner, &RuleJudge, max_len)
        .map_err(value_err)?;
    Ok(report.labels.into_iter().map(|(label, score)| (label, score.mean)).collect())
}

/// The 64 built-in safety-style prompts.
#[pyfunction]
#[pyo3(name = "toy_safety_prompts")]
fn toy_safety_prompts_py() -> Vec<String> {
    toy_safety_prompts()
}

/// The 64 built-in persona-style prompts.
#[pyfunction]
#[pyo3(name = "toy_persona_prompts")]
fn toy_persona_prompts_py() -> Vec<String> {
    toy_persona_prompts()
}

#[pymodule]
fn cst_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPreferencePair>()?;
    m.add_class::<PySystemPromptPair>()?;
    m.add_class::<PyCstTuple>()?;
    m.add_class::<PyTinyLM>()?;
    m.add_class::<PyReferenceModel>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_function(wrap_pyfunction!(cst_augment, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_only_view, m)?)?;
    m.add_function(wrap_pyfunction!(mix_datasets, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_toy_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(rule_judge_py, m)?)?;
    m.add_function(wrap_pyfunction!(judge_f1, m)?)?;
    m.add_function(wrap_pyfunction!(score_model_py, m)?)?;
    m.add_function(wrap_pyfunction!(toy_safety_prompts_py, m)?)?;
    m.add_function(wrap_pyfunction!(toy_persona_prompts_py, m)?)?;
    m.add("MARKER_UNSAFE", MARKER_UNSAFE)?;
    m.add("MARKER_REFUSAL", MARKER_REFUSAL)?;
    m.add("MARKER_PERSONA", MARKER_PERSONA)?;
    m.add("MARKER_HONEST", MARKER_HONEST)?;
    m.add("LN_2", std::f64::consts::LN_2)?;
    Ok(())
}
