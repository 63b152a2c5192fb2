//! Operational glue: model construction from a [`RunConfig`], the training
//! loop with metrics/checkpoint output, sampling to PPM, the alignment
//! eval, finite-difference suites, and the ablation runner.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{checkpoint_load, checkpoint_save};
use crate::config::{ablate_grid, RunConfig};
use crate::data::{make_batch, toy_alignment_eval};
use crate::dit::DitParams;
use crate::error::{FuseError, Result};
use crate::flow::{rf_loss, train_step, AdamOpts, FlowBatch, StepMetrics, TrainState};
use crate::fusion::{FusedModel, FusionVariant};
use crate::llm::LlmParams;
use crate::sampler::{build_text_kv_cache, euler_sample, write_ppm, SamplerConfig};
use crate::tensor::fd::{finite_diff_check, finite_diff_check_param};
use crate::tensor::{ops, Tensor};

/// Seeded model construction: config + seed fixes every parameter.
pub fn build_model(cfg: &RunConfig) -> Result<FusedModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let llm = LlmParams::new(&mut rng, cfg.llm.clone())?;
    let dit = DitParams::new(
        &mut rng,
        cfg.dit.clone(),
        cfg.patch,
        cfg.channels,
        cfg.conditioning,
        cfg.freq_dim,
    )?;
    FusedModel::new(&mut rng, llm, dit, cfg.variant, cfg.positional.clone())
}

fn adam_opts(cfg: &RunConfig) -> AdamOpts {
    AdamOpts {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        weight_decay: cfg.weight_decay,
        clip: cfg.clip,
        eps: 1e-8,
    }
}

/// A fixed held-out batch stream, disjoint from training by seed offset.
pub fn held_out_batch(cfg: &RunConfig, n: usize, seed: u64) -> Result<FlowBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // held-out data never drops captions: we measure the conditional loss
    make_batch(&mut rng, n, cfg.image_size, cfg.text_max_len, 0.0)
}

/// Mean rf_loss of a model on a batch, without touching gradients.
pub fn eval_loss(model: &FusedModel, batch: &FlowBatch) -> Result<f64> {
    Ok(rf_loss(model, batch)?.item())
}

pub struct TrainOutcome {
    pub model: FusedModel,
    pub state: TrainState,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// The training loop: seeded data stream, per-step metrics.jsonl lines,
/// checkpoints every `checkpoint_every` steps and at the end. With
/// `steps = 0` this still writes the initial checkpoint and a step-0 loss
/// line (which, with the zero-initialized output head, equals the
/// closed-form zero-model loss).
pub fn run_training(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let model = build_model(cfg)?;
    let mut state = TrainState::new(&model);
    let opts = adam_opts(cfg);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let ckpt_path = out_dir.join("checkpoint.fdtk");

    let first = make_batch(&mut data_rng, cfg.batch, cfg.image_size, cfg.text_max_len, cfg.dropout_p)?;
    let initial_loss = eval_loss(&model, &first)?;
    let line = StepMetrics { step: 0, loss: initial_loss, grad_norm: 0.0, lr: cfg.lr, ema_applied: false };
    writeln!(metrics, "{}", serde_json::to_string(&line)?)?;
    checkpoint_save(&ckpt_path, &model, Some(&state))?;

    let mut final_loss = initial_loss;
    for step in 0..cfg.steps {
        let batch = if step == 0 {
            first.clone()
        } else {
            make_batch(&mut data_rng, cfg.batch, cfg.image_size, cfg.text_max_len, cfg.dropout_p)?
        };
        let m = train_step(&model, &batch, &mut state, &opts)?;
        final_loss = m.loss;
        writeln!(metrics, "{}", serde_json::to_string(&m)?)?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            metrics.flush()?;
            checkpoint_save(&ckpt_path, &model, Some(&state))?;
        }
    }
    metrics.flush()?;
    checkpoint_save(&ckpt_path, &model, Some(&state))?;
    Ok(TrainOutcome { model, state, initial_loss, final_loss, checkpoint: ckpt_path, metrics: metrics_path })
}

fn sampler_config(cfg: &RunConfig) -> SamplerConfig {
    SamplerConfig {
        steps: cfg.sample_steps,
        guidance_scale: cfg.guidance_scale,
        seed: cfg.sample_seed,
        use_ema: cfg.use_ema,
    }
}

/// Load (or freshly build) a model+state pair for inference.
pub fn load_for_inference(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<(FusedModel, TrainState)> {
    let model = build_model(cfg)?;
    let mut state = TrainState::new(&model);
    if let Some(path) = ckpt {
        checkpoint_load(path, &model, Some(&mut state))?;
    }
    Ok((model, state))
}

/// Sample one image for a prompt and write it as binary PPM.
pub fn run_sampling(cfg: &RunConfig, ckpt: Option<&Path>, prompt: &str, out_path: &Path) -> Result<()> {
    let (model, state) = load_for_inference(cfg, ckpt)?;
    let cache = build_text_kv_cache(&model, prompt, cfg.text_max_len)?;
    let img = euler_sample(
        &model,
        &cache,
        &sampler_config(cfg),
        Some(&state),
        cfg.channels,
        cfg.image_size,
        cfg.image_size,
    )?;
    let mut w = BufWriter::new(File::create(out_path)?);
    write_ppm(&mut w, &img)?;
    w.flush()?;
    Ok(())
}

/// Template-matching alignment accuracy over held-out prompts.
pub fn run_eval(cfg: &RunConfig, ckpt: Option<&Path>, n_prompts: usize, seed: u64) -> Result<f64> {
    let (model, state) = load_for_inference(cfg, ckpt)?;
    let base = sampler_config(cfg);
    let mut i = 0u64;
    toy_alignment_eval(
        |prompt, _| {
            let cache = build_text_kv_cache(&model, prompt, cfg.text_max_len)?;
            let mut sc = base.clone();
            sc.seed = base.seed.wrapping_add(i);
            i += 1;
            euler_sample(&model, &cache, &sc, Some(&state), cfg.channels, cfg.image_size, cfg.image_size)
        },
        n_prompts,
        seed,
    )
}

// ---------------------------------------------------------------------------
// Finite-difference suites
// ---------------------------------------------------------------------------

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Max finite-difference relative error per registered tensor op.
pub fn gradcheck_ops() -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let eps = 1e-5;
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut check = |name: &str, f: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor| -> Result<()> {
        let err = finite_diff_check(|x| ops::sum_all(&f(x)?), x, eps)?;
        out.push((name.to_string(), err));
        Ok(())
    };

    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 4], 0.5, 1.5); // safe divisor
    check("add", &|x| ops::add(x, &b), &a)?;
    check("sub", &|x| ops::sub(x, &b), &a)?;
    check("mul", &|x| ops::mul(x, &b), &a)?;
    check("div", &|x| ops::div(x, &b), &a)?;
    check("add_scalar", &|x| ops::add_scalar(x, 0.7), &a)?;
    check("mul_scalar", &|x| ops::mul_scalar(x, -1.3), &a)?;
    check("exp", &|x| ops::exp(x), &a)?;
    let pos = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
    check("sqrt", &|x| ops::sqrt(x), &pos)?;
    check("sigmoid", &|x| ops::sigmoid(x), &a)?;
    check("gelu", &|x| ops::gelu(x), &a)?;
    check("silu", &|x| ops::silu(x), &a)?;
    let m = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    check("matmul", &|x| ops::matmul(x, &m), &a)?;
    let ba = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let bb = rand_tensor(&mut rng, &[2, 4, 5], -1.0, 1.0);
    check("bmm", &|x| ops::bmm(x, &bb), &ba)?;
    check("transpose", &|x| ops::transpose(x, 1, 2), &ba)?;
    check("reshape", &|x| ops::reshape(x, &[6, 4]), &ba)?;
    let c = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    check("concat", &|x| ops::concat(&[x, &c], 0), &a)?;
    check("slice", &|x| ops::slice(x, 1, 1, 3), &a)?;
    check("sum_all", &|x| ops::sum_all(x), &a)?;
    check("sum_axes", &|x| ops::sum_axes(x, &[1], false), &a)?;
    check("mean_axes", &|x| ops::mean_axes(x, &[0], true), &a)?;
    check("mean_all", &|x| ops::mean_all(x), &a)?;
    // plain sum of softmax is constant (rows sum to 1), so weight it to get
    // a non-degenerate gradient
    let w = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    check("softmax_last", &|x| ops::mul(&ops::softmax_last(x)?, &w), &a)?;
    check("gather_rows", &|x| ops::gather_rows(x, &[2, 0, 2]), &a)?;
    check("scatter_rows", &|x| ops::scatter_rows(x, &[1, 3, 1], 5), &a)?;
    // broadcasting path
    let row = rand_tensor(&mut rng, &[1, 4], -1.0, 1.0);
    check("add_broadcast", &|x| ops::add(x, &row), &a)?;
    check("mul_broadcast", &|x| ops::mul(x, &row), &a)?;
    Ok(out)
}

/// End-to-end rf_loss finite-difference error for each fusion variant on a
/// 2-layer toy config: max over a handful of representative parameters and
/// coordinates.
pub fn gradcheck_models() -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for variant in [
        FusionVariant::DeepFusionShared,
        FusionVariant::ShallowSelfAttn,
        FusionVariant::ShallowCrossAttn,
        FusionVariant::DeepFusionCross,
    ] {
        let mut cfg = RunConfig::default();
        cfg.llm.num_layers = 2;
        cfg.llm.hidden = 16;
        cfg.llm.num_heads = 2;
        cfg.llm.num_kv_heads = 1;
        cfg.llm.head_dim = 8;
        cfg.llm.ffn_dim = 32;
        cfg.llm.embedding_scale = 4.0;
        cfg.dit = cfg.llm.clone();
        cfg.dit.embedding_scale = 1.0;
        cfg.variant = variant;
        cfg.image_size = 8;
        cfg.text_max_len = 8;
        cfg.freq_dim = 8;
        cfg.batch = 2;
        cfg.seed = 17;
        let model = build_model(&cfg)?;
        // randomize the zero-initialized heads so their gradients are
        // exercised in a non-degenerate regime
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for (name, t) in model.trainable_params() {
            if t.to_vec().iter().all(|&v| v == 0.0) {
                let vals: Vec<f64> =
                    (0..t.numel()).map(|_| rng.random_range(-0.05..0.05)).collect();
                t.set_data(&vals);
                let _ = name;
            }
        }
        let batch = held_out_batch(&cfg, 2, 77)?;
        let params = model.trainable_params();
        let mut max_err: f64 = 0.0;
        // probe a spread of parameter tensors across the stack
        let stride = (params.len() / 6).max(1);
        for (name, p) in params.iter().step_by(stride) {
            let err = finite_diff_check_param(|| rf_loss(&model, &batch), p, 1e-4, Some(3))?;
            max_err = max_err.max(err);
            let _ = name;
        }
        out.push((variant.name().to_string(), max_err));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

/// Instantiate every studied configuration and run one training step,
/// writing a metrics line per run. Errors carry the run name.
pub fn run_ablate(out_dir: &Path) -> Result<Vec<(String, StepMetrics)>> {
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("ablate.jsonl");
    let mut w = BufWriter::new(File::create(&metrics_path)?);
    let mut results = Vec::new();
    for (name, cfg) in ablate_grid() {
        let run = || -> Result<StepMetrics> {
            let model = build_model(&cfg)?;
            let mut state = TrainState::new(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
            let batch = make_batch(&mut rng, cfg.batch, cfg.image_size, cfg.text_max_len, cfg.dropout_p)?;
            train_step(&model, &batch, &mut state, &adam_opts(&cfg))
        };
        let m = run().map_err(|e| FuseError::Config(format!("ablation {name}: {e}")))?;
        writeln!(w, "{{\"run\":\"{name}\",{}}}", serde_json::to_string(&m)?.trim_start_matches('{'))?;
        results.push((name, m));
    }
    w.flush()?;
    Ok(results)
}

/// Closed-form zero-model loss for a batch: mean ||x1 - x0||^2.
pub fn zero_model_loss(batch: &FlowBatch) -> f64 {
    let mut total = 0.0;
    for i in 0..batch.len() {
        let a = batch.x1[i].data.to_vec();
        let b = batch.x0[i].data.to_vec();
        let mse: f64 =
            a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        total += mse;
    }
    total / batch.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, smoke};

    fn tiny_cfg() -> RunConfig {
        let mut cfg = smoke();
        cfg.llm.num_layers = 2;
        cfg.dit.num_layers = 2;
        cfg.image_size = 8;
        cfg.text_max_len = 8;
        cfg.batch = 2;
        cfg.steps = 2;
        cfg.checkpoint_every = 1;
        cfg.sample_steps = 2;
        cfg
    }

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("fusedit-harness-tests").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn training_writes_metrics_and_checkpoint() {
        let cfg = tiny_cfg();
        let dir = tmp_dir("train");
        let out = run_training(&cfg, &dir).unwrap();
        assert!(out.checkpoint.exists());
        let lines: Vec<String> = fs::read_to_string(&out.metrics)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        assert_eq!(lines.len(), 1 + cfg.steps);
        let first: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
        assert_eq!(first["step"], 0);
        assert!(first["loss"].as_f64().unwrap().is_finite());
        let last: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
        assert_eq!(last["step"], cfg.steps as u64);
    }

    #[test]
    fn zero_steps_loss_line_equals_closed_form() {
        let mut cfg = tiny_cfg();
        cfg.steps = 0;
        let dir = tmp_dir("zero-steps");
        let out = run_training(&cfg, &dir).unwrap();
        // reproduce the first training batch
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let batch = make_batch(&mut rng, cfg.batch, cfg.image_size, cfg.text_max_len, cfg.dropout_p).unwrap();
        let closed = zero_model_loss(&batch);
        assert!((out.initial_loss - closed).abs() < 1e-12, "{} vs {closed}", out.initial_loss);
        assert!(out.checkpoint.exists());
    }

    #[test]
    fn sampling_is_byte_deterministic() {
        let cfg = tiny_cfg();
        let dir = tmp_dir("sample");
        let p1 = dir.join("a.ppm");
        let p2 = dir.join("b.ppm");
        run_sampling(&cfg, None, "a red circle", &p1).unwrap();
        run_sampling(&cfg, None, "a red circle", &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let head = fs::read(&p1).unwrap();
        assert!(head.starts_with(b"P6\n8 8\n255\n"));
    }

    #[test]
    fn eval_runs_on_untrained_model() {
        let cfg = tiny_cfg();
        let acc = run_eval(&cfg, None, 2, 3).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn gradcheck_ops_all_small() {
        for (name, err) in gradcheck_ops().unwrap() {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn presets_build_models() {
        for name in ["baseline", "final-recipe", "smoke"] {
            let cfg = preset(name).unwrap();
            build_model(&cfg).unwrap();
        }
    }
}
