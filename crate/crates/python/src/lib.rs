//! Python bindings. Grids cross the boundary as flat row-major lists of token ids.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tokensync::eval::SweepRow;
use tokensync::streams::{self, DynamicsConfig};
use tokensync::{
    Aggregation, BudgetModel, ChannelConfig, Error, KeyframePolicy, RunConfig, SweepSpec, TokenGrid, TokenId,
};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn grid(height: usize, width: usize, tokens: Vec<TokenId>) -> PyResult<TokenGrid> {
    TokenGrid::new(height, width, tokens).map_err(err)
}

/// Embedding table; rows are unit-normalized.
#[pyclass(frozen, from_py_object, module = "pytokensync")]
#[derive(Clone)]
struct Codebook(tokensync::Codebook);

#[pymethods]
impl Codebook {
    #[new]
    fn new(k: usize, dim: usize, rows: Vec<f64>) -> PyResult<Self> {
        tokensync::Codebook::from_unnormalized(k, dim, &rows)
            .map(Self)
            .map_err(err)
    }

    /// Synthetic codebook with `n_clusters` tight clusters.
    #[staticmethod]
    #[pyo3(signature = (k=8192, dim=384, n_clusters=64, spread=0.15, seed=0))]
    fn clustered(k: usize, dim: usize, n_clusters: usize, spread: f64, seed: u64) -> PyResult<Self> {
        tokensync::gen_clustered_codebook(k, dim, n_clusters, spread, seed)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        streams::read_codebook(path).map(Self).map_err(err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        streams::write_codebook(path, &self.0).map_err(err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    /// `1 - cos` between two token embeddings.
    fn cosine_change(&self, a: TokenId, b: TokenId) -> PyResult<f64> {
        self.0.cosine_change(a, b).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Codebook(k={}, dim={})", self.0.k(), self.0.dim())
    }
}

/// A sequence of equally shaped token grids.
#[pyclass(frozen, from_py_object, module = "pytokensync")]
#[derive(Clone)]
struct Clip(tokensync::Clip);

#[pymethods]
impl Clip {
    #[new]
    #[pyo3(signature = (frames, height, width, rate_hz=10.0))]
    fn new(frames: Vec<Vec<TokenId>>, height: usize, width: usize, rate_hz: f64) -> PyResult<Self> {
        let grids = frames
            .into_iter()
            .map(|f| grid(height, width, f))
            .collect::<PyResult<Vec<_>>>()?;
        tokensync::Clip::new(grids, rate_hz).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, rate_hz=10.0))]
    fn read(path: &str, rate_hz: f64) -> PyResult<Self> {
        streams::read_clip(path, rate_hz).map(|(c, _)| Self(c)).map_err(err)
    }

    fn write(&self, path: &str, k: usize) -> PyResult<()> {
        streams::write_clip(path, &self.0, k).map_err(err)
    }

    fn frames(&self) -> Vec<Vec<TokenId>> {
        self.0.grids().iter().map(|g| g.tokens().to_vec()).collect()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.shape().map_or(0, |s| s.0)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.shape().map_or(0, |s| s.1)
    }

    #[getter]
    fn rate_hz(&self) -> f64 {
        self.0.rate_hz()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Clip(T={}, {}x{}, {} Hz)",
            self.0.len(),
            self.height(),
            self.width(),
            self.0.rate_hz()
        )
    }
}

/// Keyframe trigger: `Policy.periodic(n)` or `Policy.adaptive(tau_h, n_max=30)`.
#[pyclass(frozen, from_py_object, module = "pytokensync")]
#[derive(Clone)]
struct Policy(KeyframePolicy);

#[pymethods]
impl Policy {
    #[staticmethod]
    fn periodic(n: usize) -> PyResult<Self> {
        let p = KeyframePolicy::Periodic { n };
        p.validate().map_err(err)?;
        Ok(Self(p))
    }

    #[staticmethod]
    #[pyo3(signature = (tau_h, n_max=30))]
    fn adaptive(tau_h: f64, n_max: usize) -> PyResult<Self> {
        let p = KeyframePolicy::Adaptive { tau_h, n_max };
        p.validate().map_err(err)?;
        Ok(Self(p))
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id()
    }

    fn __repr__(&self) -> String {
        format!("Policy({})", self.0.id())
    }
}

#[pyfunction]
#[pyo3(signature = (budget_bytes, header_bytes=20, update_bytes=4))]
fn budget_capacity(budget_bytes: usize, header_bytes: usize, update_bytes: usize) -> PyResult<usize> {
    let bm = BudgetModel::with_costs(budget_bytes, header_bytes, update_bytes, 1, 2).map_err(err)?;
    tokensync::budget_capacity(&bm).map_err(err)
}

/// Fixed-length keyframe size including the header.
#[pyfunction]
#[pyo3(signature = (height=18, width=32, k=8192, header_bytes=20))]
fn keyframe_bytes(height: usize, width: usize, k: usize, header_bytes: usize) -> PyResult<usize> {
    let bm = BudgetModel::with_costs(header_bytes + 1, header_bytes, 1, height * width, k).map_err(err)?;
    Ok(bm.keyframe_bytes())
}

#[pyfunction]
fn hamming_drift(current: Vec<TokenId>, reference: Vec<TokenId>, height: usize, width: usize) -> PyResult<f64> {
    tokensync::hamming_drift(&grid(height, width, current)?, &grid(height, width, reference)?).map_err(err)
}

/// Top-`m` changed positions as `(position, token)` pairs, largest change first.
#[pyfunction]
fn select_deltas(
    current: Vec<TokenId>,
    reference: Vec<TokenId>,
    height: usize,
    width: usize,
    codebook: &Codebook,
    m: usize,
) -> PyResult<Vec<(usize, TokenId)>> {
    let ups = tokensync::select_deltas(
        &grid(height, width, current)?,
        &grid(height, width, reference)?,
        &codebook.0,
        m,
    )
    .map_err(err)?;
    Ok(ups.into_iter().map(|u| (u.position, u.token)).collect())
}

#[pyfunction]
fn mismatch_rate(truth: &Clip, recon: &Clip) -> PyResult<f64> {
    tokensync::mismatch_rate(&truth.0, &recon.0).map_err(err)
}

/// Mean `1 - cos` over dynamic positions; `None` when the clip never moves.
#[pyfunction]
fn dyn_embedding_distortion(truth: &Clip, recon: &Clip, codebook: &Codebook) -> PyResult<Option<f64>> {
    tokensync::dyn_embedding_distortion(&truth.0, &recon.0, &codebook.0).map_err(err)
}

/// Synthetic burst-dynamics clips; clip `i` depends only on `(seed, i)`.
#[pyfunction]
#[pyo3(signature = (
    codebook, n_clips, timesteps=200, height=18, width=32, seed=0,
    base_change_rate=None, burst_prob=None, burst_change_rate=None, within_cluster_prob=None,
))]
#[allow(clippy::too_many_arguments)]
fn synthesize_clips(
    codebook: &Codebook,
    n_clips: usize,
    timesteps: usize,
    height: usize,
    width: usize,
    seed: u64,
    base_change_rate: Option<f64>,
    burst_prob: Option<f64>,
    burst_change_rate: Option<f64>,
    within_cluster_prob: Option<f64>,
) -> PyResult<Vec<Clip>> {
    let d = DynamicsConfig::default();
    let cfg = DynamicsConfig {
        base_change_rate: base_change_rate.unwrap_or(d.base_change_rate),
        burst_prob: burst_prob.unwrap_or(d.burst_prob),
        burst_change_rate: burst_change_rate.unwrap_or(d.burst_change_rate),
        within_cluster_prob: within_cluster_prob.unwrap_or(d.within_cluster_prob),
        seed,
    };
    let clips = streams::gen_clips(&cfg, &codebook.0, n_clips, timesteps, height, width).map_err(err)?;
    Ok(clips.into_iter().map(Clip).collect())
}

/// Threshold at percentile `q` of the per-step change rates of `clips`.
#[pyfunction]
fn percentile_threshold(clips: Vec<Clip>, q: f64) -> PyResult<f64> {
    let clips: Vec<_> = clips.into_iter().map(|c| c.0).collect();
    let rates = streams::change_rate_distribution(&clips).map_err(err)?;
    streams::percentile_threshold(&rates, q).map_err(err)
}

/// Simulates one clip end to end and returns a dict of its trace and metrics.
#[pyfunction]
#[pyo3(signature = (clip, codebook, policy, budget_bytes=200, drop_prob=0.0, seed=0))]
fn run_clip<'py>(
    py: Python<'py>,
    clip: &Clip,
    codebook: &Codebook,
    policy: &Policy,
    budget_bytes: usize,
    drop_prob: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let c = &clip.0;
    let cfg = RunConfig {
        policy: policy.0,
        budget: BudgetModel::new(budget_bytes, c.n_positions(), codebook.0.k()).map_err(err)?,
        channel: ChannelConfig::new(drop_prob, seed).map_err(err)?,
        rate_hz: c.rate_hz(),
    };
    let trace = tokensync::run_clip(c, &cfg, &codebook.0).map_err(err)?;
    let recon = trace.recon_clip(c.rate_hz()).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("bytes_total", trace.bytes_total)?;
    out.set_item("keyframes", trace.keyframe_count)?;
    out.set_item(
        "bitrate_mbps",
        tokensync::bitrate_mbps(&trace, c.rate_hz()).map_err(err)?,
    )?;
    out.set_item(
        "keyframe_steps",
        trace
            .steps
            .iter()
            .filter(|s| s.is_keyframe)
            .map(|s| s.t)
            .collect::<Vec<_>>(),
    )?;
    out.set_item("bytes", trace.steps.iter().map(|s| s.bytes).collect::<Vec<_>>())?;
    out.set_item("delivered", trace.steps.iter().map(|s| s.delivered).collect::<Vec<_>>())?;
    out.set_item("mismatch", tokensync::mismatch_rate(c, &recon).map_err(err)?)?;
    out.set_item(
        "d_dyn",
        tokensync::dyn_embedding_distortion(c, &recon, &codebook.0).map_err(err)?,
    )?;
    out.set_item("recon", Clip(recon))?;
    Ok(out)
}

fn row_dict<'py>(py: Python<'py>, r: &SweepRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("policy", r.policy_id())?;
    d.set_item("budget_bytes", r.budget_bytes)?;
    d.set_item("capacity", r.capacity)?;
    d.set_item("drop_prob", r.drop_prob)?;
    d.set_item("bitrate_mbps", r.agg.bitrate_mbps)?;
    d.set_item("d_dyn", r.agg.d_dyn)?;
    d.set_item("mismatch", r.agg.mismatch)?;
    d.set_item("keyframes_per_clip", r.agg.keyframes_per_clip)?;
    d.set_item("n_clips", r.agg.n_clips)?;
    d.set_item("n_undefined_ddyn", r.agg.n_undefined_ddyn)?;
    Ok(d)
}

/// Every `(policy, budget, drop_prob)` over `clips`; one dict per row, policy-major.
#[pyfunction]
#[pyo3(signature = (clips, codebook, policies, budgets, drop_probs, seed=0, pooled=false))]
#[allow(clippy::too_many_arguments)]
fn sweep<'py>(
    py: Python<'py>,
    clips: Vec<Clip>,
    codebook: &Codebook,
    policies: Vec<Policy>,
    budgets: Vec<usize>,
    drop_probs: Vec<f64>,
    seed: u64,
    pooled: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let clips: Vec<_> = clips.into_iter().map(|c| c.0).collect();
    let spec = SweepSpec {
        policies: policies.into_iter().map(|p| p.0).collect(),
        budgets,
        drop_probs,
        header_bytes: 20,
        update_bytes: 4,
        master_seed: seed,
        aggregation: if pooled {
            Aggregation::Pooled
        } else {
            Aggregation::PerClip
        },
    };
    let cb = &codebook.0;
    let res = py.detach(|| tokensync::sweep(&clips, &spec, cb, None)).map_err(err)?;
    res.rows.iter().map(|r| row_dict(py, r)).collect()
}

/// Runs the command-line tool with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> u8 {
    py.detach(|| tokensync::cli::main_with_args(std::iter::once("tokensync".to_string()).chain(args)))
}

#[pymodule]
fn pytokensync(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Codebook>()?;
    m.add_class::<Clip>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(budget_capacity, m)?)?;
    m.add_function(wrap_pyfunction!(keyframe_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(hamming_drift, m)?)?;
    m.add_function(wrap_pyfunction!(select_deltas, m)?)?;
    m.add_function(wrap_pyfunction!(mismatch_rate, m)?)?;
    m.add_function(wrap_pyfunction!(dyn_embedding_distortion, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_clips, m)?)?;
    m.add_function(wrap_pyfunction!(percentile_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(run_clip, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
