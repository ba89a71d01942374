//! Python bindings: combination specs, encoder checkpoints, the twelve
//! combiners, paired statistics and the experiment grid.

use std::path::PathBuf;

use earlybird::combiner::{self, CombinationSpec, CombinerParams};
use earlybird::data::{read_corpus, tokenize as tokenize_text};
use earlybird::diffcore::Tensor;
use earlybird::encoder::{self, mlm_pretrain, EncoderConfig, LayerStates, Mode};
use earlybird::experiment::{self, ExperimentConfig, GridOptions, ResultsStore};
use earlybird::stats::{self, Metric, PairedSamples};
use earlybird::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for earlybird::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// One of the twelve combination strategies with its layer and token scope,
/// written like `ix:layer=2:scope=code`.
#[pyclass(name = "CombinationSpec", frozen, eq, hash, skip_from_py_object, module = "earlybird")]
#[derive(Clone, PartialEq, Eq, Hash)]
struct PySpec(CombinationSpec);

#[pymethods]
impl PySpec {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        text.parse().map(PySpec).py()
    }

    #[staticmethod]
    fn baseline() -> Self {
        PySpec(CombinationSpec::baseline())
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.0.strategy.roman()
    }

    #[getter]
    fn layer(&self) -> Option<usize> {
        self.0.layer
    }

    #[getter]
    fn scope(&self) -> &'static str {
        self.0.scope.name()
    }

    #[getter]
    fn description(&self) -> &'static str {
        self.0.strategy.description()
    }

    fn is_baseline(&self) -> bool {
        self.0.is_baseline()
    }

    /// Trainable weights the strategy adds on top of encoder and head.
    fn added_param_count(&self, seq_len: usize, layers: usize) -> usize {
        self.0.added_param_count(seq_len, layers)
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("CombinationSpec('{}')", self.0)
    }
}

/// Every spec compared for an encoder with `layers` blocks, baseline first.
#[pyfunction]
fn full_grid(layers: usize) -> Vec<PySpec> {
    combiner::full_grid(layers).into_iter().map(PySpec).collect()
}

/// Byte-level framing: `(ids, attention_mask, code_token_mask)`.
#[pyfunction]
fn tokenize(text: &str, max_len: usize) -> (Vec<usize>, Vec<bool>, Vec<bool>) {
    let t = tokenize_text(text, max_len);
    (t.ids, t.attention_mask, t.code_token_mask)
}

fn params_for(
    spec: &CombinationSpec,
    seq_len: usize,
    layers: usize,
    token_weights: Option<Vec<f64>>,
    layer_weights: Option<Vec<f64>>,
) -> CombinerParams {
    let mut p = CombinerParams::init(spec, seq_len, layers);
    if let Some(w) = token_weights {
        p.token_weights = Some(Tensor::vector(w));
    }
    if let Some(w) = layer_weights {
        p.layer_weights = Some(Tensor::vector(w));
    }
    p
}

fn states_from_nested(states: &[Vec<Vec<f64>>], code_mask: Vec<bool>) -> PyResult<LayerStates> {
    let l = states.len();
    let s = states.first().map_or(0, Vec::len);
    let h = states.first().and_then(|x| x.first()).map_or(0, Vec::len);
    let mut values = Vec::with_capacity(l * s * h);
    for layer in states {
        if layer.len() != s || layer.iter().any(|row| row.len() != h) {
            return Err(PyValueError::new_err("states must be a rectangular [layers][tokens][hidden] list"));
        }
        layer.iter().for_each(|row| values.extend_from_slice(row));
    }
    let tensor = Tensor::new(vec![l, s, h], values).py()?;
    LayerStates::new(tensor, vec![true; s], code_mask).py()
}

/// Reduces `[layers][tokens][hidden]` states to one vector. Weights default
/// to the strategy's initial values.
#[pyfunction]
#[pyo3(signature = (states, code_mask, spec, token_weights=None, layer_weights=None))]
fn combine(
    states: Vec<Vec<Vec<f64>>>,
    code_mask: Vec<bool>,
    spec: &PySpec,
    token_weights: Option<Vec<f64>>,
    layer_weights: Option<Vec<f64>>,
) -> PyResult<Vec<f64>> {
    let st = states_from_nested(&states, code_mask)?;
    let p = params_for(&spec.0, st.seq_len(), st.num_layers(), token_weights, layer_weights);
    Ok(combiner::combine(&st, &spec.0, &p).py()?.values)
}

/// Encoder weights plus shape.
#[pyclass(name = "Checkpoint", frozen, module = "earlybird")]
struct PyCheckpoint(encoder::Checkpoint);

#[pymethods]
impl PyCheckpoint {
    /// Freshly initialised encoder.
    #[staticmethod]
    #[pyo3(signature = (layers, hidden, max_len, heads, ffn, seed=0, dropout=0.1))]
    fn init(
        layers: usize,
        hidden: usize,
        max_len: usize,
        heads: usize,
        ffn: usize,
        seed: u64,
        dropout: f64,
    ) -> PyResult<Self> {
        let cfg = EncoderConfig { layers, hidden, max_len, heads, ffn, vocab: earlybird::data::VOCAB_SIZE, dropout };
        encoder::Checkpoint::init(&cfg, seed).map(PyCheckpoint).py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        encoder::Checkpoint::load(&path).map(PyCheckpoint).py()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).py()
    }

    /// The first `layers` blocks with embeddings, as a new checkpoint.
    fn prune(&self, layers: usize) -> PyResult<Self> {
        self.0.prune(layers).map(PyCheckpoint).py()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.0.num_layers()
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.0.config.max_len
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.0.config.hidden
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    /// Eval-mode hidden states per text as `[layers][tokens][hidden]`.
    fn encode(&self, py: Python<'_>, texts: Vec<String>) -> PyResult<Vec<Vec<Vec<Vec<f64>>>>> {
        let states = py.detach(|| self.encode_states(&texts)).py()?;
        Ok(states.iter().map(nested).collect())
    }

    /// Encodes `text` and applies `spec` to its states.
    #[pyo3(signature = (text, spec, token_weights=None, layer_weights=None))]
    fn represent(
        &self,
        text: &str,
        spec: &PySpec,
        token_weights: Option<Vec<f64>>,
        layer_weights: Option<Vec<f64>>,
    ) -> PyResult<Vec<f64>> {
        let st = self.encode_states(&[text.to_owned()]).py()?.remove(0);
        let p = params_for(&spec.0, st.seq_len(), st.num_layers(), token_weights, layer_weights);
        Ok(combiner::combine(&st, &spec.0, &p).py()?.values)
    }

    fn __repr__(&self) -> String {
        let c = &self.0.config;
        format!(
            "Checkpoint(layers={}, hidden={}, max_len={}, heads={}, ffn={})",
            c.layers, c.hidden, c.max_len, c.heads, c.ffn
        )
    }
}

impl PyCheckpoint {
    fn encode_states(&self, texts: &[String]) -> earlybird::Result<Vec<LayerStates>> {
        let seqs: Vec<_> = texts.iter().map(|t| tokenize_text(t, self.0.config.max_len)).collect();
        encoder::encode(&self.0, &seqs, Mode::Eval, 0)
    }
}

fn nested(st: &LayerStates) -> Vec<Vec<Vec<f64>>> {
    (1..=st.num_layers()).map(|l| (0..st.seq_len()).map(|s| st.token(l, s).to_vec()).collect()).collect()
}

/// Exact two-sided Wilcoxon signed-rank p-value for paired samples.
#[pyfunction]
fn wilcoxon(baseline: Vec<f64>, candidate: Vec<f64>) -> PyResult<f64> {
    stats::wilcoxon_signed_rank(&PairedSamples::new(baseline, candidate).py()?).py()
}

/// Vargha-Delaney A12 of candidate over baseline and its magnitude label.
#[pyfunction]
fn a12(candidate: Vec<f64>, baseline: Vec<f64>) -> PyResult<(f64, &'static str)> {
    let (v, m) = stats::a12(&candidate, &baseline).py()?;
    Ok((v, m.name()))
}

/// Mean difference, p-value, significance and effect size in one dict.
#[pyfunction]
fn compare<'py>(py: Python<'py>, baseline: Vec<f64>, candidate: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let r = stats::compare(&PairedSamples::new(baseline, candidate).py()?).py()?;
    let d = PyDict::new(py);
    d.set_item("mean_diff", r.mean_diff)?;
    d.set_item("p_value", r.p_value)?;
    d.set_item("significant", r.significant)?;
    d.set_item("a12", r.a12)?;
    d.set_item("magnitude", r.magnitude.name())?;
    Ok(d)
}

#[pyfunction]
fn weighted_f1(predictions: Vec<usize>, labels: Vec<usize>, num_classes: usize) -> PyResult<f64> {
    stats::weighted_f1(&predictions, &labels, num_classes).py()
}

/// MLM-pretrains an encoder shaped by the config. Without a corpus file the
/// config's synthetic corpus is used. Returns the checkpoint and the mean
/// loss per epoch.
#[pyfunction]
#[pyo3(signature = (config, corpus=None))]
fn pretrain(py: Python<'_>, config: PathBuf, corpus: Option<PathBuf>) -> PyResult<(PyCheckpoint, Vec<f64>)> {
    let cfg = ExperimentConfig::load(&config).py()?;
    let lines = match corpus {
        Some(path) => read_corpus(&path).py()?,
        None => cfg.data.synthetic_corpus(&cfg.pretrain).py()?,
    };
    let (ck, report) = py.detach(|| mlm_pretrain(&lines, &cfg.model, &cfg.pretrain.mlm())).py()?;
    Ok((PyCheckpoint(ck), report.epoch_losses))
}

/// Runs or resumes the config's grid into `out`. Returns counts of executed,
/// skipped and pending runs plus the recorded failures.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, out, jobs=1, max_runs=None))]
fn run_grid<'py>(
    py: Python<'py>,
    config: PathBuf,
    checkpoint: &PyCheckpoint,
    out: PathBuf,
    jobs: usize,
    max_runs: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ExperimentConfig::load(&config).py()?;
    let opts = GridOptions { jobs, max_runs };
    let s = py.detach(|| experiment::run_grid(&cfg, &checkpoint.0, &out, &opts)).py()?;
    let d = PyDict::new(py);
    d.set_item("executed", s.executed)?;
    d.set_item("skipped", s.skipped)?;
    d.set_item("pending", s.pending)?;
    let failures: Vec<(String, u64, String)> =
        s.failures.iter().map(|f| (f.spec.to_string(), f.seed, f.error.clone())).collect();
    d.set_item("failures", failures)?;
    Ok(d)
}

/// Writes heatmap and pruning reports for a results directory and returns
/// the paths written.
#[pyfunction]
#[pyo3(signature = (results, prefix, metric="accuracy"))]
fn write_reports(results: PathBuf, prefix: PathBuf, metric: &str) -> PyResult<Vec<PathBuf>> {
    let metric: Metric = metric.parse().py()?;
    let store = ResultsStore::open(&results).py()?;
    experiment::write_reports(&store, metric, &prefix).py()
}

#[pymodule]
#[pyo3(name = "earlybird")]
fn earlybird_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpec>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(full_grid, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(combine, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(a12, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    m.add_function(wrap_pyfunction!(write_reports, m)?)?;
    Ok(())
}
