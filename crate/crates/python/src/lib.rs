use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lab::error::ExperimentError;
use lab::evaluator::{SafetyMetrics, WeightScheme};
use lab::experiment::{self, ExperimentConfig};
use lab::geometry::{AABox, Polyline, Resolution, Trajectory};
use lab::parsing;
use lab::policy::{PolicyParams, PolicyShape, SamplingConfig, SceneContext, TokenVocab};
use lab::rewards::{self, CoordinateSpace, RewardConfig};
use lab::trainer;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Xy = Vec<(f64, f64)>;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: ExperimentError) -> PyErr {
    PyRuntimeError::new_err(format!("{}: {e}", e.category()))
}

fn points(t: &Trajectory) -> Xy {
    t.points().iter().map(|p| (p.x, p.y)).collect()
}

fn polyline(xy: &[(f64, f64)]) -> PyResult<Polyline> {
    Polyline::from_xy(xy).map_err(value_err)
}

fn aabox(b: (f64, f64, f64, f64)) -> PyResult<AABox> {
    AABox::new(b.0, b.1, b.2, b.3).map_err(value_err)
}

/// Parse a `<think>…</think><answer>[…]</answer>` response. Raises
/// ValueError naming the failure reason.
#[pyfunction]
#[pyo3(signature = (text, n_waypoints, require_reasoning = false))]
fn parse_response<'py>(py: Python<'py>, text: &str, n_waypoints: usize, require_reasoning: bool) -> PyResult<Bound<'py, PyDict>> {
    let parsed = if require_reasoning {
        parsing::parse_response_requiring_reasoning(text, n_waypoints)
    } else {
        parsing::parse_response(text, n_waypoints)
    }
    .map_err(|f| PyValueError::new_err(f.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("reasoning", parsed.reasoning)?;
    d.set_item("trajectory", points(&parsed.trajectory))?;
    d.set_item("stray_text", parsed.stray_text)?;
    Ok(d)
}

#[pyfunction]
fn serialize_response(reasoning: &str, trajectory: Xy) -> PyResult<String> {
    parsing::serialize_response(reasoning, &Trajectory::from_xy(&trajectory)).map_err(value_err)
}

#[pyfunction]
fn ade(pred: Xy, gt: Xy) -> PyResult<f64> {
    rewards::ade(&Trajectory::from_xy(&pred), &Trajectory::from_xy(&gt)).map_err(value_err)
}

#[pyfunction]
fn fde(pred: Xy, gt: Xy) -> PyResult<f64> {
    rewards::fde(&Trajectory::from_xy(&pred), &Trajectory::from_xy(&gt)).map_err(value_err)
}

#[pyfunction]
fn planning_reward(pred: Xy, gt: Xy) -> PyResult<f64> {
    rewards::planning_reward(&Trajectory::from_xy(&pred), &Trajectory::from_xy(&gt)).map_err(value_err)
}

#[pyfunction]
fn floor_penalty() -> f64 {
    rewards::floor_penalty()
}

/// Format + planning reward of a response against a pixel-space ground truth.
#[pyfunction]
#[pyo3(signature = (response, gt, width, height, pixel_space = false, require_reasoning = true))]
fn total_reward<'py>(
    py: Python<'py>,
    response: &str,
    gt: Xy,
    width: f64,
    height: f64,
    pixel_space: bool,
    require_reasoning: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RewardConfig {
        space: if pixel_space { CoordinateSpace::Pixel } else { CoordinateSpace::Normalized },
        require_reasoning,
    };
    let r = rewards::total_reward(response, &Trajectory::from_xy(&gt), Resolution::new(width, height), &cfg);
    let d = PyDict::new(py);
    d.set_item("r_total", r.r_total)?;
    d.set_item("r_format", r.r_format)?;
    d.set_item("r_planning", r.r_planning)?;
    d.set_item("ade", r.ade)?;
    d.set_item("fde", r.fde)?;
    d.set_item("failure", r.failure.map(|f| f.to_string()))?;
    Ok(d)
}

/// Box is `(x_min, y_min, x_max, y_max)`.
#[pyfunction]
fn intersects(polyline_xy: Xy, bbox: (f64, f64, f64, f64)) -> PyResult<bool> {
    Ok(lab::geometry::intersects(&polyline(&polyline_xy)?, &aabox(bbox)?))
}

#[pyfunction]
fn clip_length(polyline_xy: Xy, bbox: (f64, f64, f64, f64)) -> PyResult<f64> {
    Ok(lab::geometry::clip_length(&polyline(&polyline_xy)?, &aabox(bbox)?))
}

#[pyfunction]
#[pyo3(signature = (rewards, std_floor = 1e-8))]
fn group_advantages(rewards: Vec<f64>, std_floor: f64) -> Vec<f64> {
    trainer::group_advantages(&rewards, std_floor)
}

#[pyfunction]
fn kl_per_token(logp_theta: f64, logp_ref: f64) -> f64 {
    trainer::kl_per_token(logp_theta, logp_ref)
}

#[pyfunction]
fn x_variance(trajectory: Xy) -> f64 {
    lab::datakit::x_variance(&Trajectory::from_xy(&trajectory))
}

/// Preset weight schemes as `{name: (w_f, w_c, w_p)}`.
#[pyfunction]
fn weight_presets<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for s in WeightScheme::presets() {
        d.set_item(s.name, (s.w_f, s.w_c, s.w_p))?;
    }
    Ok(d)
}

/// `models` is a list of `(name, fail_rate, collision_count,
/// penetration_length)`; returns `{model: {scheme: score}}` over the presets.
#[pyfunction]
fn safety_scores<'py>(py: Python<'py>, models: Vec<(String, f64, f64, f64)>) -> PyResult<Bound<'py, PyDict>> {
    let table: Vec<(String, SafetyMetrics)> = models
        .into_iter()
        .map(|(n, f, c, p)| {
            (
                n,
                SafetyMetrics {
                    fail_rate: f,
                    collision_count: c,
                    penetration_length: p,
                },
            )
        })
        .collect();
    let scores = lab::evaluator::safety_scores(&table, &WeightScheme::presets()).map_err(value_err)?;
    let out = PyDict::new(py);
    for row in scores.rows {
        let d = PyDict::new(py);
        for (name, v) in scores.schemes.iter().zip(row.scores) {
            d.set_item(name, v)?;
        }
        out.set_item(row.model, d)?;
    }
    Ok(out)
}

/// Autoregressive trajectory policy.
#[pyclass(name = "Policy", module = "planlab")]
struct PyPolicy {
    params: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (context_dim, hidden = 48, grid_size = 16, n_waypoints = 20, seed = 0))]
    fn new(context_dim: usize, hidden: usize, grid_size: usize, n_waypoints: usize, seed: u64) -> PyResult<Self> {
        let vocab = TokenVocab::with_default_lexicon(grid_size, n_waypoints).map_err(value_err)?;
        let shape = PolicyShape::new(context_dim, hidden, vocab).map_err(value_err)?;
        Ok(Self {
            params: PolicyParams::init(shape, seed),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            params: PolicyParams::load(&path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.params.save(&path).map_err(value_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.len()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.params.shape().vocab_size()
    }

    /// Greedy response text for one scene.
    #[pyo3(signature = (context, width, height, max_len = 64))]
    fn greedy(&self, context: Vec<f64>, width: f64, height: f64, max_len: usize) -> PyResult<String> {
        let seq = self.params.greedy_sequence(&SceneContext(context), max_len).map_err(value_err)?;
        Ok(self.params.vocab().render(&seq.tokens, Resolution::new(width, height)))
    }

    /// Sampled response: `(text, tokens, logprobs)`.
    #[pyo3(signature = (context, width, height, seed = 0, temperature = 1.2, top_p = 0.95, repetition_penalty = 1.2, max_len = 64))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        context: Vec<f64>,
        width: f64,
        height: f64,
        seed: u64,
        temperature: f64,
        top_p: f64,
        repetition_penalty: f64,
        max_len: usize,
    ) -> PyResult<(String, Vec<usize>, Vec<f64>)> {
        let cfg = SamplingConfig {
            temperature,
            top_p,
            repetition_penalty,
            max_len,
            seed,
            corruption_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = self.params.sample_sequence(&SceneContext(context), &cfg, &mut rng).map_err(value_err)?;
        let text = self.params.vocab().render(&seq.tokens, Resolution::new(width, height));
        Ok((text, seq.tokens, seq.logprobs))
    }

    fn sequence_logprobs(&self, context: Vec<f64>, tokens: Vec<usize>) -> PyResult<Vec<f64>> {
        self.params.sequence_logprobs(&SceneContext(context), &tokens).map_err(value_err)
    }
}

/// File-backed pipeline stages over one working directory.
#[pyclass(name = "Experiment", module = "planlab")]
struct PyExperiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    /// `config_json` overrides defaults; `workdir` and `seed` override both.
    #[new]
    #[pyo3(signature = (workdir, config_json = None, seed = None))]
    fn new(workdir: PathBuf, config_json: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match config_json {
            Some(text) => ExperimentConfig::from_json(text).map_err(runtime_err)?,
            None => ExperimentConfig::default(),
        };
        cfg.workdir = workdir;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate().map_err(runtime_err)?;
        Ok(Self { cfg })
    }

    fn config_json(&self) -> String {
        self.cfg.to_json()
    }

    fn generate(&self, py: Python<'_>) -> PyResult<String> {
        let cfg = self.cfg.clone();
        summary(py.detach(move || experiment::stage_generate(&cfg)))
    }

    fn split(&self, py: Python<'_>) -> PyResult<String> {
        let cfg = self.cfg.clone();
        summary(py.detach(move || experiment::stage_split(&cfg)))
    }

    #[pyo3(signature = (label = "sft"))]
    fn sft(&self, py: Python<'_>, label: &str) -> PyResult<String> {
        let (cfg, label) = (self.cfg.clone(), label.to_string());
        summary(py.detach(move || experiment::stage_sft(&cfg, &label)))
    }

    #[pyo3(signature = (source = "sft", label = "rft"))]
    fn rft(&self, py: Python<'_>, source: &str, label: &str) -> PyResult<String> {
        let (cfg, source, label) = (self.cfg.clone(), source.to_string(), label.to_string());
        summary(py.detach(move || experiment::stage_rft(&cfg, &source, &label, None)))
    }

    fn eval(&self, py: Python<'_>, label: &str) -> PyResult<String> {
        let (cfg, label) = (self.cfg.clone(), label.to_string());
        summary(py.detach(move || experiment::stage_eval(&cfg, &label)))
    }

    fn ood(&self, py: Python<'_>, label: &str) -> PyResult<String> {
        let (cfg, label) = (self.cfg.clone(), label.to_string());
        summary(py.detach(move || experiment::stage_ood(&cfg, &label)))
    }

    /// Writes report.md / report.json and returns the markdown.
    fn report(&self) -> PyResult<String> {
        experiment::stage_report(&self.cfg).map(|r| r.to_markdown()).map_err(runtime_err)
    }
}

fn summary(r: Result<experiment::Manifest, ExperimentError>) -> PyResult<String> {
    r.map(|m| m.summary.to_string()).map_err(runtime_err)
}

#[pymodule]
fn planlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_response, m)?)?;
    m.add_function(wrap_pyfunction!(ade, m)?)?;
    m.add_function(wrap_pyfunction!(fde, m)?)?;
    m.add_function(wrap_pyfunction!(planning_reward, m)?)?;
    m.add_function(wrap_pyfunction!(floor_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(total_reward, m)?)?;
    m.add_function(wrap_pyfunction!(intersects, m)?)?;
    m.add_function(wrap_pyfunction!(clip_length, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(kl_per_token, m)?)?;
    m.add_function(wrap_pyfunction!(x_variance, m)?)?;
    m.add_function(wrap_pyfunction!(weight_presets, m)?)?;
    m.add_function(wrap_pyfunction!(safety_scores, m)?)?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyExperiment>()?;
    Ok(())
}
