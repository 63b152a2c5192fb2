//! Python bindings for the fused LLM-DiT trainer: configuration, model
//! construction, training steps, sampling, checkpointing, and the
//! accounting/gradient-check utilities.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fusedit::accountant;
use fusedit::checkpoint::{checkpoint_load, checkpoint_save};
use fusedit::config::{preset as rust_preset, RunConfig};
use fusedit::data;
use fusedit::flow::{train_step, TrainState};
use fusedit::fusion::FusedModel;
use fusedit::harness;
use fusedit::llm;
use fusedit::sampler::{build_text_kv_cache, euler_sample, write_ppm, SamplerConfig};

fn err(e: fusedit::FuseError) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A run configuration, held as its canonical text form.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Parse a `key = value` config (defaults fill missing keys).
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: RunConfig::parse(text).map_err(err)? })
    }

    /// Load a named preset: baseline, final-recipe, smoke, gemma2b.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: rust_preset(name).map_err(err)? })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Override one `key = value` entry.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut text = self.inner.to_text();
        text.push_str(&format!("{key} = {value}\n"));
        self.inner = RunConfig::parse(&text).map_err(err)?;
        Ok(())
    }

    /// Trainable-parameter breakdown as a dict.
    fn count_params<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = &self.inner;
        let b = accountant::count_params(
            &c.llm, &c.dit, c.variant, c.conditioning, c.patch, c.channels, c.freq_dim,
        );
        let d = PyDict::new(py);
        d.set_item("attention", b.attention)?;
        d.set_item("ffn", b.ffn)?;
        d.set_item("norms", b.norms)?;
        d.set_item("conditioning", b.conditioning)?;
        d.set_item("adapters", b.adapters)?;
        d.set_item("input_output", b.input_output)?;
        d.set_item("total", b.total)?;
        Ok(d)
    }

    /// Sampling-cost estimate (matmul FLOPs and KV-cache bytes) as a dict.
    #[pyo3(signature = (text_len, cfg = true))]
    fn estimate_cost<'py>(&self, py: Python<'py>, text_len: usize, cfg: bool) -> PyResult<Bound<'py, PyDict>> {
        let c = &self.inner;
        let n_img = (c.image_size / c.patch) * (c.image_size / c.patch);
        let cost = accountant::estimate_cost(
            &c.llm, &c.dit, c.variant, c.conditioning, c.patch, c.channels, c.freq_dim,
            text_len, n_img, c.sample_steps, cfg,
        )
        .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("text_flops", cost.text_flops)?;
        d.set_item("dit_flops_per_call", cost.dit_flops_per_call)?;
        d.set_item("calls", cost.calls)?;
        d.set_item("total_flops", cost.total_flops)?;
        d.set_item("kv_cache_bytes", cost.kv_cache_bytes)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(variant={}, conditioning={}, positional={})",
            self.inner.variant.name(),
            self.inner.conditioning.name(),
            self.inner.positional.name()
        )
    }
}

/// A fused model plus its optimizer/EMA state.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    cfg: RunConfig,
    model: FusedModel,
    state: TrainState,
    data_rng: ChaCha8Rng,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let model = harness::build_model(&cfg).map_err(err)?;
        let state = TrainState::new(&model);
        let data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        Ok(PyModel { cfg, model, state, data_rng })
    }

    fn num_trainable_params(&self) -> usize {
        self.model.num_trainable_params()
    }

    fn step(&self) -> u64 {
        self.state.step
    }

    /// Run `n` training steps on the seeded synthetic stream; returns one
    /// metrics dict per step.
    fn train<'py>(&mut self, py: Python<'py>, n: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let opts = fusedit::flow::AdamOpts {
            lr: self.cfg.lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            weight_decay: self.cfg.weight_decay,
            clip: self.cfg.clip,
            eps: 1e-8,
        };
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let batch = data::make_batch(
                &mut self.data_rng,
                self.cfg.batch,
                self.cfg.image_size,
                self.cfg.text_max_len,
                self.cfg.dropout_p,
            )
            .map_err(err)?;
            let m = train_step(&self.model, &batch, &mut self.state, &opts).map_err(err)?;
            let d = PyDict::new(py);
            d.set_item("step", m.step)?;
            d.set_item("loss", m.loss)?;
            d.set_item("grad_norm", m.grad_norm)?;
            d.set_item("ema_applied", m.ema_applied)?;
            out.push(d);
        }
        Ok(out)
    }

    /// Conditional rf_loss on a fresh held-out batch.
    fn held_out_loss(&self, n: usize, seed: u64) -> PyResult<f64> {
        let batch = harness::held_out_batch(&self.cfg, n, seed).map_err(err)?;
        harness::eval_loss(&self.model, &batch).map_err(err)
    }

    /// Sample an image for a prompt; returns the binary PPM bytes.
    #[pyo3(signature = (prompt, seed = None))]
    fn sample(&self, prompt: &str, seed: Option<u64>) -> PyResult<Vec<u8>> {
        let cache = build_text_kv_cache(&self.model, prompt, self.cfg.text_max_len).map_err(err)?;
        let sc = SamplerConfig {
            steps: self.cfg.sample_steps,
            guidance_scale: self.cfg.guidance_scale,
            seed: seed.unwrap_or(self.cfg.sample_seed),
            use_ema: self.cfg.use_ema,
        };
        let img = euler_sample(
            &self.model,
            &cache,
            &sc,
            Some(&self.state),
            self.cfg.channels,
            self.cfg.image_size,
            self.cfg.image_size,
        )
        .map_err(err)?;
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).map_err(err)?;
        Ok(buf)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint_save(&path, &self.model, Some(&self.state)).map_err(err)
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        checkpoint_load(&path, &self.model, Some(&mut self.state)).map_err(err)
    }
}

/// Byte-level tokenization: returns (padded ids, real length).
#[pyfunction]
fn tokenize(text: &str, max_len: usize) -> (Vec<usize>, usize) {
    llm::tokenize(text, max_len)
}

#[pyfunction]
fn detokenize(ids: Vec<usize>) -> String {
    llm::detokenize(&ids)
}

/// Deterministic synthetic scene: returns (caption, [c][h][w] pixels).
#[pyfunction]
fn generate_scene(seed: u64, res: usize) -> PyResult<(String, Vec<Vec<Vec<f64>>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (scene, img) = data::generate_scene(&mut rng, res).map_err(err)?;
    let flat = img.data.to_vec();
    let mut px = vec![vec![vec![0.0; res]; res]; 3];
    for c in 0..3 {
        for y in 0..res {
            for x in 0..res {
                px[c][y][x] = flat[c * res * res + y * res + x];
            }
        }
    }
    Ok((scene.caption(), px))
}

/// Caption grammar inverse: list of (color, shape) names.
#[pyfunction]
fn parse_caption(caption: &str) -> PyResult<Vec<(String, String)>> {
    data::parse_caption(caption)
        .map(|v| {
            v.into_iter()
                .map(|(c, s)| (c.name().to_string(), s.name().to_string()))
                .collect()
        })
        .ok_or_else(|| PyValueError::new_err("caption does not match the template grammar"))
}

/// Finite-difference results for every registered tensor op.
#[pyfunction]
fn gradcheck_ops<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (name, e) in harness::gradcheck_ops().map_err(err)? {
        d.set_item(name, e)?;
    }
    Ok(d)
}

#[pymodule]
fn fusedit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(parse_caption, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_ops, m)?)?;
    Ok(())
}
