//! Command-line surface: train, sample, count, eval, gradcheck, ablate.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fusedit::accountant::{count_params, estimate_cost, rel_err};
use fusedit::config::{preset, RunConfig};
use fusedit::fusion::FusionVariant;
use fusedit::harness::{
    gradcheck_models, gradcheck_ops, run_ablate, run_eval, run_sampling, run_training,
};
use fusedit::nn::ConditioningKind;
use fusedit::Result;

#[derive(Parser)]
#[command(name = "fusedit", about = "Fused LLM-DiT rectified-flow trainer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigSource {
    /// Path to a key = value config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset: baseline, final-recipe, smoke, gemma2b.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<RunConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::parse(&std::fs::read_to_string(path)?),
            (None, Some(name)) => preset(name),
            (None, None) => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop, writing metrics.jsonl and checkpoints.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Sample an image from a prompt and write a binary PPM.
    Sample {
        #[command(flatten)]
        source: ConfigSource,
        /// Checkpoint to load; omitted = freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "a red circle")]
        prompt: String,
        /// Override the sampling seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "sample.ppm")]
        out: PathBuf,
    },
    /// Print parameter and FLOP accounting tables.
    Count {
        #[command(flatten)]
        source: ConfigSource,
        /// Override the fusion variant (deep, shallow-self, shallow-cross,
        /// deep-cross).
        #[arg(long)]
        variant: Option<String>,
        /// Override the conditioning (adaln-zero, adaln-single, addition,
        /// none).
        #[arg(long)]
        conditioning: Option<String>,
        /// Check the published totals and orderings instead of printing a
        /// table.
        #[arg(long)]
        paper_regression: bool,
    },
    /// Alignment accuracy over held-out prompts.
    Eval {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        n_prompts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient suites (ops + end-to-end variants).
    Gradcheck,
    /// Run every studied configuration for one step.
    Ablate {
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
}

fn cmd_count(
    source: &ConfigSource,
    variant: Option<&str>,
    conditioning: Option<&str>,
    paper_regression: bool,
) -> Result<()> {
    let mut cfg = source.load()?;
    if let Some(v) = variant {
        cfg.variant = FusionVariant::parse(v)?;
    }
    if let Some(c) = conditioning {
        cfg.conditioning = ConditioningKind::parse(c)?;
    }
    if paper_regression {
        return paper_regression_checks(&cfg);
    }
    let b = count_params(
        &cfg.llm, &cfg.dit, cfg.variant, cfg.conditioning, cfg.patch, cfg.channels, cfg.freq_dim,
    );
    println!("variant: {}  conditioning: {}", cfg.variant.name(), cfg.conditioning.name());
    println!("  attention    {:>14}", b.attention);
    println!("  ffn          {:>14}", b.ffn);
    println!("  norms        {:>14}", b.norms);
    println!("  conditioning {:>14}", b.conditioning);
    println!("  adapters     {:>14}", b.adapters);
    println!("  input/output {:>14}", b.input_output);
    println!("  total        {:>14}", b.total);
    let n_img = (cfg.image_size / cfg.patch).pow(2);
    let cost = estimate_cost(
        &cfg.llm,
        &cfg.dit,
        cfg.variant,
        cfg.conditioning,
        cfg.patch,
        cfg.channels,
        cfg.freq_dim,
        cfg.text_max_len,
        n_img,
        cfg.sample_steps,
        true,
    )?;
    println!("cost for {} text tokens, {} image tokens, {} steps with CFG:", cfg.text_max_len, n_img, cfg.sample_steps);
    println!("  text flops (per branch) {:>18}", cost.text_flops);
    println!("  dit flops per call      {:>18}", cost.dit_flops_per_call);
    println!("  velocity calls          {:>18}", cost.calls);
    println!("  total flops             {:>18}", cost.total_flops);
    println!("  kv-cache bytes          {:>18}", cost.kv_cache_bytes);
    Ok(())
}

fn paper_regression_checks(cfg: &RunConfig) -> Result<()> {
    let count = |dit: &fusedit::llm::StreamConfig, variant, cond| {
        count_params(&cfg.llm, dit, variant, cond, cfg.patch, cfg.channels, cfg.freq_dim).total
    };
    fn check(label: &str, total: usize, target: f64) -> bool {
        let e = rel_err(total, target);
        let pass = e < 0.03;
        println!(
            "{}: {} vs {:.2e} (err {:.2}%) ... {}",
            label,
            total,
            target,
            e * 100.0,
            if pass { "pass" } else { "FAIL" }
        );
        pass
    }
    let mut ok = true;
    let deep = FusionVariant::DeepFusionShared;
    let zero = count(&cfg.dit, deep, ConditioningKind::AdaLnZero);
    let none = count(&cfg.dit, deep, ConditioningKind::None);
    ok &= check("adaln-zero total", zero, 2.47e9);
    ok &= check("adaln-single total", count(&cfg.dit, deep, ConditioningKind::AdaLnSingle), 2.01e9);
    ok &= check("addition total", count(&cfg.dit, deep, ConditioningKind::Addition), 1.99e9);
    ok &= check("none total", none, 1.98e9);
    let delta = zero - none;
    let delta_ok = rel_err(delta, 0.49e9) < 0.03 || rel_err(delta, 0.47e9) < 0.03;
    ok &= delta_ok;
    println!(
        "adaln delta: {} vs 0.47e9/0.49e9 ... {}",
        delta,
        if delta_ok { "pass" } else { "FAIL" }
    );
    for (hidden, target) in [(2048usize, 2.5e9), (1792, 2.1e9), (1536, 1.8e9), (1280, 1.4e9)] {
        let mut dit = cfg.dit.clone();
        dit.hidden = hidden;
        ok &= check(&format!("hidden {hidden}"), count(&dit, deep, ConditioningKind::AdaLnZero), target);
    }
    for (layers, target) in [(18usize, 2.5e9), (14, 1.9e9), (10, 1.4e9)] {
        let mut dit = cfg.dit.clone();
        dit.num_layers = layers;
        ok &= check(&format!("layers {layers}"), count(&dit, deep, ConditioningKind::AdaLnZero), target);
    }
    let ss = count(&cfg.dit, FusionVariant::ShallowSelfAttn, ConditioningKind::AdaLnZero);
    let sc = count(&cfg.dit, FusionVariant::ShallowCrossAttn, ConditioningKind::AdaLnZero);
    let order_ok = sc > ss && ss > zero;
    ok &= order_ok;
    println!(
        "ordering shallow-cross {} > shallow-self {} > deep {} ... {}",
        sc,
        ss,
        zero,
        if order_ok { "pass" } else { "FAIL" }
    );
    if ok {
        Ok(())
    } else {
        Err(fusedit::FuseError::Config("paper regression failed".into()))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { source, steps, seed, out } => {
            let mut cfg = source.load()?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = run_training(&cfg, &out)?;
            println!(
                "trained {} steps: loss {:.6} -> {:.6}",
                cfg.steps, outcome.initial_loss, outcome.final_loss
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("metrics: {}", outcome.metrics.display());
        }
        Command::Sample { source, checkpoint, prompt, seed, out } => {
            let mut cfg = source.load()?;
            if let Some(s) = seed {
                cfg.sample_seed = s;
            }
            run_sampling(&cfg, checkpoint.as_deref(), &prompt, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Count { source, variant, conditioning, paper_regression } => {
            cmd_count(&source, variant.as_deref(), conditioning.as_deref(), paper_regression)?;
        }
        Command::Eval { source, checkpoint, n_prompts, seed } => {
            let cfg = source.load()?;
            let acc = run_eval(&cfg, checkpoint.as_deref(), n_prompts, seed)?;
            println!("alignment accuracy: {acc:.4} over {n_prompts} prompts");
        }
        Command::Gradcheck => {
            let mut worst: f64 = 0.0;
            for (name, err) in gradcheck_ops()? {
                println!("op {name}: max rel err {err:.3e}");
                worst = worst.max(err);
            }
            if worst >= 1e-4 {
                return Err(fusedit::FuseError::Config(format!(
                    "op gradient check failed: max rel err {worst:.3e}"
                )));
            }
            let mut worst: f64 = 0.0;
            for (name, err) in gradcheck_models()? {
                println!("variant {name}: max rel err {err:.3e}");
                worst = worst.max(err);
            }
            if worst >= 1e-3 {
                return Err(fusedit::FuseError::Config(format!(
                    "model gradient check failed: max rel err {worst:.3e}"
                )));
            }
            println!("all gradient checks passed");
        }
        Command::Ablate { out } => {
            let results = run_ablate(&out)?;
            for (name, m) in &results {
                println!("{name}: loss {:.6} grad_norm {:.4}", m.loss, m.grad_norm);
            }
            println!("{} runs completed; metrics in {}", results.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
