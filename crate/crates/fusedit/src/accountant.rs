//! Closed-form parameter counting and matmul-FLOP estimates.
//!
//! The counting formulas mirror the instantiated modules term by term, so
//! they must agree with an instantiate-and-enumerate pass exactly — the
//! tests sweep every variant and conditioning to enforce that.

use crate::error::{FuseError, Result};
use crate::fusion::FusionVariant;
use crate::llm::{StreamConfig, VOCAB};
use crate::nn::ConditioningKind;

#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct ParamBreakdown {
    pub attention: usize,
    pub ffn: usize,
    pub norms: usize,
    pub conditioning: usize,
    pub adapters: usize,
    /// Patch embedding and output head.
    pub input_output: usize,
    pub total: usize,
}

impl ParamBreakdown {
    fn finish(mut self) -> ParamBreakdown {
        self.total = self.attention + self.ffn + self.norms + self.conditioning
            + self.adapters
            + self.input_output;
        self
    }
}

/// Trainable parameters of a fused model: DiT trunk + fusion extras,
/// excluding the frozen LLM (mirroring the paper's per-method Params
/// columns).
pub fn count_params(
    llm: &StreamConfig,
    dit: &StreamConfig,
    variant: FusionVariant,
    cond: ConditioningKind,
    patch: usize,
    channels: usize,
    freq_dim: usize,
) -> ParamBreakdown {
    let h = dit.hidden;
    let l = dit.num_layers;
    let qd = dit.num_heads * dit.head_dim;
    let kvd = dit.num_kv_heads * dit.head_dim;
    let tok = patch * patch * channels;

    let mut b = ParamBreakdown::default();
    // per-layer self-attention: q, k, v, o (no biases) + QK-norm gains
    b.attention = l * (h * qd + 2 * h * kvd + qd * h + qd + kvd);
    // GeGLU: gate, up, down
    b.ffn = l * 3 * h * dit.ffn_dim;
    // two pre-norms per layer + final norm
    b.norms = l * 2 * h + h;
    b.input_output = (tok * h + h) + (h * tok + tok);
    b.conditioning = match cond {
        ConditioningKind::AdaLnZero => {
            l * (h * 6 * h + 6 * h) + (h * 2 * h + 2 * h) + timestep_mlp_params(freq_dim, h)
        }
        ConditioningKind::AdaLnSingle => {
            (h * 6 * h + 6 * h) + l * 6 * h + 2 * h + timestep_mlp_params(freq_dim, h)
        }
        ConditioningKind::Addition => timestep_mlp_params(freq_dim, h),
        ConditioningKind::None => 0,
    };
    b.adapters = match variant {
        FusionVariant::DeepFusionShared => 0,
        FusionVariant::ShallowSelfAttn => shallow_adapter_params(llm, h) + l * 2 * h * kvd,
        FusionVariant::ShallowCrossAttn => {
            shallow_adapter_params(llm, h) + l * 2 * h * kvd + l * cross_block_params(h, qd)
        }
        FusionVariant::DeepFusionCross => l * cross_block_params(h, qd),
    };
    b.finish()
}

fn timestep_mlp_params(freq_dim: usize, h: usize) -> usize {
    (freq_dim * h + h) + (h * h + h)
}

fn shallow_adapter_params(llm: &StreamConfig, dit_hidden: usize) -> usize {
    llm.hidden + (llm.hidden * dit_hidden + dit_hidden)
}

fn cross_block_params(h: usize, qd: usize) -> usize {
    h + h * qd + qd * h
}

/// Frozen text-stream parameters.
pub fn count_llm_params(llm: &StreamConfig) -> usize {
    let h = llm.hidden;
    let qd = llm.num_heads * llm.head_dim;
    let kvd = llm.num_kv_heads * llm.head_dim;
    let per_layer = (h * qd + 2 * h * kvd + qd * h + qd + kvd) + 3 * h * llm.ffn_dim + 2 * h;
    llm.vocab_size * h + llm.num_layers * per_layer + h
}

// ---------------------------------------------------------------------------
// FLOP estimates
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CostEstimate {
    /// Text pathway, run once per prompt branch (LLM pass + shallow
    /// adapter/KV projections where the variant has them).
    pub text_flops: u64,
    /// One DiT velocity evaluation.
    pub dit_flops_per_call: u64,
    /// steps x branches velocity evaluations.
    pub calls: u64,
    pub total_flops: u64,
    pub flops_per_image_token: u64,
    pub flops_per_text_token: u64,
    /// Cached K/V bytes per prompt (conditional + unconditional branches,
    /// f64 storage).
    pub kv_cache_bytes: u64,
}

/// Matmul-dominant FLOPs (2*m*k*n per matmul) for one full sampling run.
/// `cfg` doubles the velocity calls and text branches for classifier-free
/// guidance. Mirrors the executed forward trace matmul for matmul.
pub fn estimate_cost(
    llm: &StreamConfig,
    dit: &StreamConfig,
    variant: FusionVariant,
    cond: ConditioningKind,
    patch: usize,
    channels: usize,
    freq_dim: usize,
    text_len: usize,
    image_len: usize,
    steps: usize,
    cfg: bool,
) -> Result<CostEstimate> {
    if image_len == 0 || steps == 0 {
        return Err(FuseError::Config("estimate_cost needs positive lengths".into()));
    }
    let branches: u64 = if cfg { 2 } else { 1 };
    let text_flops = llm_pass_flops(llm, text_len)
        + match variant {
            FusionVariant::ShallowSelfAttn | FusionVariant::ShallowCrossAttn => {
                shallow_ctx_flops(llm, dit, text_len)
            }
            _ => 0,
        };
    let dit_flops_per_call = dit_call_flops(dit, variant, cond, patch, channels, freq_dim, text_len, image_len);
    let calls = steps as u64 * branches;
    let total_flops = branches * text_flops + calls * dit_flops_per_call;
    let kvd = dit.num_kv_heads * dit.head_dim;
    let kv_cache_bytes = branches * dit.num_layers as u64 * 2 * (text_len as u64) * kvd as u64 * 8;
    Ok(CostEstimate {
        text_flops,
        dit_flops_per_call,
        calls,
        total_flops,
        flops_per_image_token: dit_flops_per_call / image_len as u64,
        flops_per_text_token: if text_len > 0 { text_flops / text_len as u64 } else { 0 },
        kv_cache_bytes,
    })
}

fn llm_pass_flops(llm: &StreamConfig, n: usize) -> u64 {
    if n == 0 {
        return 0;
    }
    let (n, h) = (n as u64, llm.hidden as u64);
    let qd = (llm.num_heads * llm.head_dim) as u64;
    let kvd = (llm.num_kv_heads * llm.head_dim) as u64;
    let hq = llm.num_heads as u64;
    let d = llm.head_dim as u64;
    let f = llm.ffn_dim as u64;
    let per_layer = 2 * n * h * qd      // q
        + 4 * n * h * kvd               // k, v
        + 4 * hq * n * n * d            // scores + values
        + 2 * n * qd * h                // o
        + 6 * n * h * f; // gate, up, down
    llm.num_layers as u64 * per_layer
}

fn shallow_ctx_flops(llm: &StreamConfig, dit: &StreamConfig, n: usize) -> u64 {
    let (n, h) = (n as u64, dit.hidden as u64);
    let kvd = (dit.num_kv_heads * dit.head_dim) as u64;
    2 * n * llm.hidden as u64 * h + dit.num_layers as u64 * 4 * n * h * kvd
}

fn dit_call_flops(
    dit: &StreamConfig,
    variant: FusionVariant,
    cond: ConditioningKind,
    patch: usize,
    channels: usize,
    freq_dim: usize,
    text_len: usize,
    image_len: usize,
) -> u64 {
    let ni = image_len as u64;
    let nt = text_len as u64;
    let h = dit.hidden as u64;
    let qd = (dit.num_heads * dit.head_dim) as u64;
    let kvd = (dit.num_kv_heads * dit.head_dim) as u64;
    let hq = dit.num_heads as u64;
    let d = dit.head_dim as u64;
    let f = dit.ffn_dim as u64;
    let l = dit.num_layers as u64;
    let tok = (patch * patch * channels) as u64;

    let self_keys = if variant.is_cross() { ni } else { ni + nt };
    let mut per_layer = 2 * ni * h * qd
        + 4 * ni * h * kvd
        + 4 * hq * ni * self_keys * d
        + 2 * ni * qd * h
        + 6 * ni * h * f;
    if variant.is_cross() && nt > 0 {
        per_layer += 2 * ni * h * qd + 4 * hq * ni * nt * d + 2 * ni * qd * h;
    }
    // conditioning heads run once per layer on the [1, h] embedding
    per_layer += match cond {
        ConditioningKind::AdaLnZero | ConditioningKind::AdaLnSingle => 2 * h * 6 * h,
        _ => 0,
    };

    let mut flops = 2 * ni * tok * h + l * per_layer + 2 * ni * h * tok;
    flops += match cond {
        ConditioningKind::None => 0,
        _ => 2 * freq_dim as u64 * h + 2 * h * h, // timestep MLP
    };
    if cond == ConditioningKind::AdaLnZero {
        flops += 2 * h * 2 * h; // final modulation head
    }
    flops
}

/// The paper-scale preset: Gemma-2B layout with a 16-channel latent.
pub fn gemma2b_config() -> StreamConfig {
    StreamConfig {
        num_layers: 18,
        hidden: 2048,
        num_heads: 8,
        num_kv_heads: 1,
        head_dim: 256,
        ffn_dim: 16384,
        vocab_size: VOCAB,
        embedding_scale: 2048f64.sqrt(),
    }
}

pub const GEMMA2B_PATCH: usize = 2;
pub const GEMMA2B_CHANNELS: usize = 16;
pub const GEMMA2B_FREQ: usize = 256;

/// Relative deviation from a published total.
pub fn rel_err(count: usize, target: f64) -> f64 {
    (count as f64 - target).abs() / target
}
