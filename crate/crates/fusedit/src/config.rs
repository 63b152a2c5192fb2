//! Run configuration: a flat `key = value` text format with `#` comments,
//! paper-recipe defaults, named presets, and the ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{FuseError, Result};
use crate::fusion::FusionVariant;
use crate::llm::{StreamConfig, VOCAB};
use crate::nn::{ConditioningKind, PositionalScheme};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub llm: StreamConfig,
    pub dit: StreamConfig,
    pub variant: FusionVariant,
    pub conditioning: ConditioningKind,
    pub positional: PositionalScheme,
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub freq_dim: usize,
    pub text_max_len: usize,
    // trainer
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip: f64,
    pub batch: usize,
    pub steps: usize,
    pub dropout_p: f64,
    pub ema_decay: f64,
    pub ema_every: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    // sampler
    pub sample_steps: usize,
    pub guidance_scale: f64,
    pub sample_seed: u64,
    pub use_ema: bool,
}

fn desk_stream() -> StreamConfig {
    StreamConfig {
        num_layers: 4,
        hidden: 64,
        num_heads: 4,
        num_kv_heads: 1,
        head_dim: 16,
        ffn_dim: 256,
        vocab_size: VOCAB,
        embedding_scale: 8.0,
    }
}

impl Default for RunConfig {
    /// The baseline recipe at desk scale: deep fusion with adaLN-Zero and
    /// 1D rope + absolute embeddings, trained with the paper's optimizer
    /// settings (AdamW lr 1e-4, wd 1e-4, clip 1.0, caption dropout 0.1,
    /// EMA 0.99 every 100 steps) and sampled with 25 Euler steps at CFG 6.
    fn default() -> RunConfig {
        let mut dit = desk_stream();
        dit.embedding_scale = 1.0;
        RunConfig {
            llm: desk_stream(),
            dit,
            variant: FusionVariant::DeepFusionShared,
            conditioning: ConditioningKind::AdaLnZero,
            positional: PositionalScheme::Rope1dPlusApe,
            image_size: 32,
            patch: 2,
            channels: 3,
            freq_dim: 64,
            text_max_len: 32,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            clip: 1.0,
            batch: 32,
            steps: 2000,
            dropout_p: 0.1,
            ema_decay: 0.99,
            ema_every: 100,
            seed: 0,
            checkpoint_every: 500,
            sample_steps: 25,
            guidance_scale: 6.0,
            sample_seed: 0,
            use_ema: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.llm.validate()?;
        self.dit.validate()?;
        let err = |m: &str| Err(FuseError::Config(m.to_string()));
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return err("image_size must be divisible by patch");
        }
        if self.channels == 0 || self.text_max_len == 0 || self.batch == 0 {
            return err("channels, text_max_len and batch must be positive");
        }
        if self.variant.is_deep()
            && (self.llm.num_heads, self.llm.num_kv_heads, self.llm.head_dim)
                != (self.dit.num_heads, self.dit.num_kv_heads, self.dit.head_dim)
        {
            return err("deep fusion requires matching attention dimensions");
        }
        if self.dit.num_layers > self.llm.num_layers {
            return err("dit cannot have more layers than the llm");
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.clip > 0.0) {
            return err("lr and clip must be positive, weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return err("dropout_p must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.ema_every == 0 {
            return err("ema_decay must lie in [0, 1) and ema_every be positive");
        }
        if self.sample_steps == 0 {
            return err("sample_steps must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# fusedit run configuration");
        for (prefix, c) in [("llm", &self.llm), ("dit", &self.dit)] {
            let _ = writeln!(s, "{prefix}.num_layers = {}", c.num_layers);
            let _ = writeln!(s, "{prefix}.hidden = {}", c.hidden);
            let _ = writeln!(s, "{prefix}.num_heads = {}", c.num_heads);
            let _ = writeln!(s, "{prefix}.num_kv_heads = {}", c.num_kv_heads);
            let _ = writeln!(s, "{prefix}.head_dim = {}", c.head_dim);
            let _ = writeln!(s, "{prefix}.ffn_dim = {}", c.ffn_dim);
            let _ = writeln!(s, "{prefix}.vocab_size = {}", c.vocab_size);
            let _ = writeln!(s, "{prefix}.embedding_scale = {}", c.embedding_scale);
        }
        let _ = writeln!(s, "fusion.variant = {}", self.variant.name());
        let _ = writeln!(s, "fusion.conditioning = {}", self.conditioning.name());
        let _ = writeln!(s, "fusion.positional = {}", self.positional.name());
        let _ = writeln!(s, "image.size = {}", self.image_size);
        let _ = writeln!(s, "image.patch = {}", self.patch);
        let _ = writeln!(s, "image.channels = {}", self.channels);
        let _ = writeln!(s, "image.freq_dim = {}", self.freq_dim);
        let _ = writeln!(s, "text.max_len = {}", self.text_max_len);
        let _ = writeln!(s, "train.lr = {}", self.lr);
        let _ = writeln!(s, "train.weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "train.beta1 = {}", self.beta1);
        let _ = writeln!(s, "train.beta2 = {}", self.beta2);
        let _ = writeln!(s, "train.clip = {}", self.clip);
        let _ = writeln!(s, "train.batch = {}", self.batch);
        let _ = writeln!(s, "train.steps = {}", self.steps);
        let _ = writeln!(s, "train.dropout_p = {}", self.dropout_p);
        let _ = writeln!(s, "train.ema_decay = {}", self.ema_decay);
        let _ = writeln!(s, "train.ema_every = {}", self.ema_every);
        let _ = writeln!(s, "train.seed = {}", self.seed);
        let _ = writeln!(s, "train.checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "sample.steps = {}", self.sample_steps);
        let _ = writeln!(s, "sample.guidance = {}", self.guidance_scale);
        let _ = writeln!(s, "sample.seed = {}", self.sample_seed);
        let _ = writeln!(s, "sample.use_ema = {}", self.use_ema);
        s
    }

    /// Parse `key = value` lines over paper-recipe defaults. Unknown keys
    /// and malformed values are errors; the result is validated.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                FuseError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = RunConfig::default();
        let mut positional_name: Option<String> = None;
        for (k, v) in &map {
            let bad = || FuseError::Config(format!("bad value for {k}: {v}"));
            let usize_of = || v.parse::<usize>().map_err(|_| bad());
            match k.as_str() {
                "llm.num_layers" => cfg.llm.num_layers = usize_of()?,
                "llm.hidden" => cfg.llm.hidden = usize_of()?,
                "llm.num_heads" => cfg.llm.num_heads = usize_of()?,
                "llm.num_kv_heads" => cfg.llm.num_kv_heads = usize_of()?,
                "llm.head_dim" => cfg.llm.head_dim = usize_of()?,
                "llm.ffn_dim" => cfg.llm.ffn_dim = usize_of()?,
                "llm.vocab_size" => cfg.llm.vocab_size = usize_of()?,
                "llm.embedding_scale" => cfg.llm.embedding_scale = v.parse().map_err(|_| bad())?,
                "dit.num_layers" => cfg.dit.num_layers = usize_of()?,
                "dit.hidden" => cfg.dit.hidden = usize_of()?,
                "dit.num_heads" => cfg.dit.num_heads = usize_of()?,
                "dit.num_kv_heads" => cfg.dit.num_kv_heads = usize_of()?,
                "dit.head_dim" => cfg.dit.head_dim = usize_of()?,
                "dit.ffn_dim" => cfg.dit.ffn_dim = usize_of()?,
                "dit.vocab_size" => cfg.dit.vocab_size = usize_of()?,
                "dit.embedding_scale" => cfg.dit.embedding_scale = v.parse().map_err(|_| bad())?,
                "fusion.variant" => cfg.variant = FusionVariant::parse(v)?,
                "fusion.conditioning" => cfg.conditioning = ConditioningKind::parse(v)?,
                "fusion.positional" => positional_name = Some(v.clone()),
                "image.size" => cfg.image_size = usize_of()?,
                "image.patch" => cfg.patch = usize_of()?,
                "image.channels" => cfg.channels = usize_of()?,
                "image.freq_dim" => cfg.freq_dim = usize_of()?,
                "text.max_len" => cfg.text_max_len = usize_of()?,
                "train.lr" => cfg.lr = v.parse().map_err(|_| bad())?,
                "train.weight_decay" => cfg.weight_decay = v.parse().map_err(|_| bad())?,
                "train.beta1" => cfg.beta1 = v.parse().map_err(|_| bad())?,
                "train.beta2" => cfg.beta2 = v.parse().map_err(|_| bad())?,
                "train.clip" => cfg.clip = v.parse().map_err(|_| bad())?,
                "train.batch" => cfg.batch = usize_of()?,
                "train.steps" => cfg.steps = usize_of()?,
                "train.dropout_p" => cfg.dropout_p = v.parse().map_err(|_| bad())?,
                "train.ema_decay" => cfg.ema_decay = v.parse().map_err(|_| bad())?,
                "train.ema_every" => cfg.ema_every = usize_of()?,
                "train.seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "train.checkpoint_every" => cfg.checkpoint_every = usize_of()?,
                "sample.steps" => cfg.sample_steps = usize_of()?,
                "sample.guidance" => cfg.guidance_scale = v.parse().map_err(|_| bad())?,
                "sample.seed" => cfg.sample_seed = v.parse().map_err(|_| bad())?,
                "sample.use_ema" => cfg.use_ema = v.parse().map_err(|_| bad())?,
                _ => return Err(FuseError::Config(format!("unknown key: {k}"))),
            }
        }
        // mrope chunk sizes derive from the (possibly overridden) head_dim
        if let Some(name) = positional_name {
            cfg.positional = PositionalScheme::parse(&name, cfg.dit.head_dim)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Named preset lookup: baseline, final-recipe, smoke, gemma2b.
pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "baseline" => Ok(RunConfig::default()),
        "final-recipe" => Ok(final_recipe()),
        "smoke" => Ok(smoke()),
        "gemma2b" => Ok(gemma2b()),
        other => Err(FuseError::Config(format!("unknown preset: {other}"))),
    }
}

/// The ablation outcome applied to the baseline: exactly three deltas —
/// drop the adaLN modules, switch to 1D + 2D rope, and upgrade the text
/// stream (a deeper/wider random-init stand-in).
pub fn final_recipe() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.conditioning = ConditioningKind::None;
    cfg.positional = PositionalScheme::Rope1dPlus2d;
    // deeper/wider, same attention geometry so deep fusion still aligns
    cfg.llm = StreamConfig {
        num_layers: 6,
        hidden: 96,
        num_heads: 4,
        num_kv_heads: 1,
        head_dim: 16,
        ffn_dim: 384,
        vocab_size: VOCAB,
        embedding_scale: 96f64.sqrt(),
    };
    cfg
}

/// A minutes-scale config sized for the 2000-step learning smoke test on
/// one core.
pub fn smoke() -> RunConfig {
    let stream = StreamConfig {
        num_layers: 2,
        hidden: 32,
        num_heads: 4,
        num_kv_heads: 1,
        head_dim: 8,
        ffn_dim: 128,
        vocab_size: VOCAB,
        embedding_scale: 32f64.sqrt(),
    };
    let mut dit = stream.clone();
    dit.embedding_scale = 1.0;
    RunConfig {
        llm: stream,
        dit,
        variant: FusionVariant::DeepFusionShared,
        conditioning: ConditioningKind::AdaLnZero,
        positional: PositionalScheme::Rope1dPlusApe,
        image_size: 16,
        patch: 2,
        channels: 3,
        freq_dim: 32,
        text_max_len: 16,
        lr: 1e-3,
        batch: 8,
        steps: 2000,
        checkpoint_every: 1000,
        sample_steps: 25,
        ..RunConfig::default()
    }
}

/// Paper-scale shapes for parameter counting; not meant to be trained here.
pub fn gemma2b() -> RunConfig {
    let llm = crate::accountant::gemma2b_config();
    let mut dit = llm.clone();
    dit.embedding_scale = 1.0;
    RunConfig {
        llm,
        dit,
        image_size: 32,
        patch: crate::accountant::GEMMA2B_PATCH,
        channels: crate::accountant::GEMMA2B_CHANNELS,
        freq_dim: crate::accountant::GEMMA2B_FREQ,
        text_max_len: 128,
        ..RunConfig::default()
    }
}

/// The studied ablation axes: every fusion variant x conditioning x
/// positional scheme, plus layer-alignment sweeps, on one-smoke-step-sized
/// configs.
pub fn ablate_grid() -> Vec<(String, RunConfig)> {
    let variants = [
        FusionVariant::DeepFusionShared,
        FusionVariant::ShallowSelfAttn,
        FusionVariant::ShallowCrossAttn,
        FusionVariant::DeepFusionCross,
    ];
    let conds = [
        ConditioningKind::AdaLnZero,
        ConditioningKind::AdaLnSingle,
        ConditioningKind::Addition,
        ConditioningKind::None,
    ];
    let positionals = ["rope1d+ape", "rope1d", "rope1d+2d", "mrope"];
    let mut grid = Vec::new();
    let base = {
        let stream = StreamConfig {
            num_layers: 2,
            hidden: 16,
            num_heads: 2,
            num_kv_heads: 1,
            head_dim: 8,
            ffn_dim: 32,
            vocab_size: VOCAB,
            embedding_scale: 4.0,
        };
        let mut dit = stream.clone();
        dit.embedding_scale = 1.0;
        RunConfig {
            llm: stream,
            dit,
            image_size: 8,
            patch: 2,
            channels: 3,
            freq_dim: 8,
            text_max_len: 8,
            batch: 1,
            steps: 1,
            sample_steps: 2,
            ..RunConfig::default()
        }
    };
    for variant in variants {
        for cond in conds {
            for pos in positionals {
                // alignment sweep: 1:1 layer map and a centered sparse map
                for dit_layers in [2usize, 1] {
                    let mut cfg = base.clone();
                    cfg.variant = variant;
                    cfg.conditioning = cond;
                    cfg.positional = PositionalScheme::parse(pos, cfg.dit.head_dim).unwrap();
                    cfg.dit.num_layers = dit_layers;
                    let name = format!("{}-{}-{}-d{}", variant.name(), cond.name(), pos, dit_layers);
                    grid.push((name, cfg));
                }
            }
        }
    }
    grid
}
