//! Python bindings for the `textirl` crate.
//!
//! Token sequences cross the boundary as `list[list[int]]`; configurations
//! and reports as JSON-compatible dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use textirl::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use textirl::metrics::{self, BleuConfig, SampleSizes};
use textirl::oracle::{self, OracleModel};
use textirl::policy::{self, GeneratorDims, GeneratorParams, SeqMode, Trajectory};
use textirl::reward::{self, RewardDims, RewardParams};
use textirl::trainer::{self, TrainConfig};
use textirl::{corpus, numerics, Error, RngStream};

fn to_py(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match e {
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Argument(_) | Error::Config(_) | Error::MalformedLine { .. } | Error::EmptyCorpus => {
            PyValueError::new_err(msg)
        }
        _ => PyRuntimeError::new_err(msg),
    }
}

fn parse_mode(mode: &str) -> PyResult<SeqMode> {
    match mode {
        "fixed-length" => Ok(SeqMode::FixedLength),
        "eos-terminated" => Ok(SeqMode::EosTerminated),
        _ => Err(PyValueError::new_err(format!("unknown mode {mode:?}"))),
    }
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn py_to_json(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<String> {
    py.import("json")?.call_method1("dumps", (obj,))?.extract()
}

/// LSTM generator policy.
#[pyclass(module = "textirl_py", skip_from_py_object)]
#[derive(Clone)]
struct Generator {
    inner: GeneratorParams,
}

#[pymethods]
impl Generator {
    /// Fresh generator with U(-0.08, 0.08) weights.
    #[new]
    #[pyo3(signature = (v_content, d_emb=32, d_hid=32, seed=0))]
    fn new(v_content: usize, d_emb: usize, d_hid: usize, seed: u64) -> PyResult<Self> {
        let dims = GeneratorDims::with_content(v_content, d_emb, d_hid).map_err(to_py)?;
        Ok(Self { inner: GeneratorParams::init_default(dims, &RngStream::new(seed)) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(&path).and_then(Checkpoint::into_generator).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &Checkpoint::from_generator(&self.inner)).map_err(to_py)
    }

    #[getter]
    fn v_total(&self) -> usize {
        self.inner.dims().v_total
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.store().num_scalars()
    }

    #[pyo3(signature = (n, max_len, mode="fixed-length", seed=0))]
    fn sample(&self, n: usize, max_len: usize, mode: &str, seed: u64) -> PyResult<Vec<Vec<usize>>> {
        let batch = policy::sample_batch(&self.inner, n, max_len, parse_mode(mode)?, &RngStream::new(seed)).map_err(to_py)?;
        Ok(batch.into_iter().map(|t| t.tokens).collect())
    }

    /// Returns `(total, per_step)` log-probabilities.
    #[pyo3(signature = (tokens, mode="fixed-length"))]
    fn log_prob(&self, tokens: Vec<usize>, mode: &str) -> PyResult<(f64, Vec<f64>)> {
        policy::log_prob(&self.inner, &tokens, parse_mode(mode)?).map_err(to_py)
    }

    /// Monte Carlo entropy estimate `(mean, std_err)` in nats.
    #[pyo3(signature = (n_samples, max_len, mode="fixed-length", seed=0))]
    fn entropy(&self, n_samples: usize, max_len: usize, mode: &str, seed: u64) -> PyResult<(f64, f64)> {
        let e = policy::entropy_estimate_detailed(&self.inner, n_samples, max_len, parse_mode(mode)?, &RngStream::new(seed))
            .map_err(to_py)?;
        Ok((e.mean, e.std_err))
    }

    /// MLE training in place; returns the mean loss of every epoch.
    #[pyo3(signature = (trainset, epochs, config=None))]
    fn pretrain(&mut self, py: Python<'_>, trainset: Vec<Vec<usize>>, epochs: usize, config: Option<&Bound<'_, PyAny>>) -> PyResult<Vec<f64>> {
        let cfg = train_config(py, config)?;
        let mut losses = Vec::new();
        let rng = RngStream::new(cfg.seed).child("pretrain");
        trainer::pretrain_mle(&mut self.inner, &trainset, epochs, &cfg, &rng, |_, l| {
            losses.push(l);
            Ok(())
        })
        .map_err(to_py)?;
        Ok(losses)
    }
}

/// Reward approximator `r(s, a)`.
#[pyclass(module = "textirl_py", skip_from_py_object)]
#[derive(Clone)]
struct Reward {
    inner: RewardParams,
}

#[pymethods]
impl Reward {
    #[new]
    #[pyo3(signature = (v_total, d_emb=32, d_hid=32, d_mlp=32, keep_prob=0.75, seed=0))]
    fn new(v_total: usize, d_emb: usize, d_hid: usize, d_mlp: usize, keep_prob: f64, seed: u64) -> PyResult<Self> {
        let dims = RewardDims::new(v_total, d_emb, d_hid, d_mlp).map_err(to_py)?;
        let inner = RewardParams::init_default(dims, keep_prob, &RngStream::new(seed)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(&path).and_then(Checkpoint::into_reward).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &Checkpoint::from_reward(&self.inner)).map_err(to_py)
    }

    /// Per-step rewards with dropout off.
    fn step_rewards(&self, tokens: Vec<usize>) -> PyResult<Vec<f64>> {
        reward::step_rewards_masked(&self.inner, &tokens, None).map_err(to_py)
    }

    /// Self-normalized importance weights of `seqs` scored under `generator`.
    #[pyo3(signature = (generator, seqs, mode="fixed-length"))]
    fn importance_weights(&self, generator: &Generator, seqs: Vec<Vec<usize>>, mode: &str) -> PyResult<Vec<f64>> {
        let mode = parse_mode(mode)?;
        let batch = seqs
            .into_iter()
            .map(|tokens| {
                let (_, step_logps) = policy::log_prob(&generator.inner, &tokens, mode)?;
                Ok(Trajectory { tokens, step_logps })
            })
            .collect::<textirl::Result<Vec<_>>>()
            .map_err(to_py)?;
        Ok(reward::importance_weights(&self.inner, &batch).map_err(to_py)?.w)
    }
}

/// Synthetic oracle: an LSTM with Normal(0, 1) weights.
#[pyclass(module = "textirl_py")]
struct Oracle {
    inner: OracleModel,
}

#[pymethods]
impl Oracle {
    #[new]
    #[pyo3(signature = (seed, v_content=5000, d_emb=32, d_hid=32))]
    fn new(seed: u64, v_content: usize, d_emb: usize, d_hid: usize) -> PyResult<Self> {
        Ok(Self { inner: oracle::make_oracle(seed, v_content, d_emb, d_hid).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(&path).and_then(Checkpoint::into_oracle).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &Checkpoint::from_oracle(&self.inner)).map_err(to_py)
    }

    #[pyo3(signature = (n, length, seed=0))]
    fn generate(&self, n: usize, length: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
        oracle::generate_dataset(&self.inner, n, length, &RngStream::new(seed)).map_err(to_py)
    }

    /// Mean per-token negative log-likelihood of `samples`.
    fn nll(&self, samples: Vec<Vec<usize>>) -> PyResult<f64> {
        oracle::nll_oracle(&self.inner, &samples).map_err(to_py)
    }
}

fn train_config(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<TrainConfig> {
    let cfg: TrainConfig = match config {
        None => TrainConfig::default(),
        Some(obj) => serde_json::from_str(&py_to_json(py, obj)?).map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Runs the alternating IRL loop and returns `(generator, reward, records)`.
#[pyfunction]
#[pyo3(signature = (generator, reward, trainset, config=None, oracle=None))]
fn train_irl(
    py: Python<'_>,
    generator: &Generator,
    reward: &Reward,
    trainset: Vec<Vec<usize>>,
    config: Option<&Bound<'_, PyAny>>,
    oracle: Option<&Oracle>,
) -> PyResult<(Generator, Reward, Py<PyAny>)> {
    let cfg = train_config(py, config)?;
    let (g, r, report) = trainer::run_irl(generator.inner.clone(), reward.inner.clone(), &trainset, &cfg, oracle.map(|o| &o.inner))
        .map_err(to_py)?;
    let records = serde_json::to_string(&report.records).expect("records serialize");
    Ok((Generator { inner: g }, Reward { inner: r }, json_to_py(py, &records)?))
}

#[pyfunction]
fn softmax(x: Vec<f64>) -> PyResult<Vec<f64>> {
    numerics::softmax(&x).map_err(to_py)
}

#[pyfunction]
fn sentence_bleu(hyp: Vec<usize>, refs: Vec<Vec<usize>>, n: usize) -> PyResult<f64> {
    metrics::sentence_bleu(&hyp, &refs, n).map_err(to_py)
}

#[pyfunction]
fn bleu_ha(f: f64, b: f64) -> f64 {
    metrics::bleu_ha(f, b)
}

/// Forward, backward and harmonic BLEU report as a dict.
#[pyfunction]
#[pyo3(signature = (generated, testset, orders=vec![2, 3, 4, 5], seed=0, hyps=1000, refs=5000))]
fn evaluate_bleu(
    py: Python<'_>,
    generated: Vec<Vec<usize>>,
    testset: Vec<Vec<usize>>,
    orders: Vec<usize>,
    seed: u64,
    hyps: usize,
    refs: usize,
) -> PyResult<Py<PyAny>> {
    let report = metrics::evaluate_bleu(&generated, &testset, &orders, &BleuConfig::default(), SampleSizes { hyps, refs }, seed)
        .map_err(to_py)?;
    json_to_py(py, &serde_json::to_string(&report).expect("report serializes"))
}

/// Returns `(vocab tokens by id, kept sentences)`.
#[pyfunction]
fn build_vocab_and_filter(
    texts: Vec<Vec<String>>,
    min_freq: usize,
    min_len: usize,
    max_len: usize,
) -> PyResult<(Vec<String>, Vec<Vec<String>>)> {
    let (vocab, kept) = corpus::build_vocab_and_filter(&texts, min_freq, min_len, max_len).map_err(to_py)?;
    Ok((vocab.tokens().to_vec(), kept))
}

#[pyfunction]
fn pretokenize(line: &str) -> Vec<String> {
    corpus::pretokenize(line)
}

#[pymodule]
fn textirl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Generator>()?;
    m.add_class::<Reward>()?;
    m.add_class::<Oracle>()?;
    m.add_function(wrap_pyfunction!(train_irl, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(bleu_ha, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(build_vocab_and_filter, m)?)?;
    m.add_function(wrap_pyfunction!(pretokenize, m)?)?;
    m.add("BOS", textirl::BOS)?;
    m.add("EOS", textirl::EOS)?;
    Ok(())
}
