//! The frozen decoder-only text stream.
//!
//! A small Gemma-style transformer over a byte-level vocabulary: pre-norm
//! blocks, grouped-query attention with per-head QK normalization, 1D rotary
//! positions, GeGLU FFN, embeddings scaled by sqrt(hidden). The forward pass
//! exports per-layer post-rotary keys/values and the post-final-norm hidden
//! states; those are the only things the fused model ever reads from it.

use rand::Rng;

use crate::error::{FuseError, Result};
use crate::nn::{
    attention, geglu_ffn, qk_normalize, rmsnorm, rope_1d, AttentionParams, AttnMask, FfnParams,
    ROPE_BASE,
};
use crate::tensor::{ops, Tensor};

pub const BOS: usize = 256;
pub const PAD: usize = 257;
pub const VOCAB: usize = 258;

/// Architecture of one transformer stream (shared by the text and image
/// sides, which may differ only in their instantiation).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StreamConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Multiplier on the input embeddings (sqrt(hidden) for the text stream,
    /// 1.0 for the image stream).
    pub embedding_scale: f64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(FuseError::Config(format!("vocab_size {} < 2", self.vocab_size)));
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return Err(FuseError::Config(format!(
                "{} heads not divisible by {} kv heads",
                self.num_heads, self.num_kv_heads
            )));
        }
        if self.head_dim % 4 != 0 {
            return Err(FuseError::Config(format!(
                "head_dim {} must be divisible by 4",
                self.head_dim
            )));
        }
        if self.num_layers == 0 || self.hidden == 0 || self.ffn_dim == 0 {
            return Err(FuseError::Config("stream dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Byte tokenizer: BOS followed by the UTF-8 bytes, truncated and padded to
/// `max_len`. Returns (ids, real length before padding).
pub fn tokenize(text: &str, max_len: usize) -> (Vec<usize>, usize) {
    assert!(max_len >= 1, "max_len must fit at least BOS");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    for &b in text.as_bytes() {
        if ids.len() == max_len {
            break;
        }
        ids.push(b as usize);
    }
    let len = ids.len();
    ids.resize(max_len, PAD);
    (ids, len)
}

/// Inverse of [`tokenize`] ignoring BOS/PAD markers.
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub struct LlmLayer {
    pub attn_norm: Tensor,
    pub attn: AttentionParams,
    pub ffn_norm: Tensor,
    pub ffn: FfnParams,
}

pub struct LlmParams {
    pub config: StreamConfig,
    /// [VOCAB, hidden]
    pub embed: Tensor,
    pub layers: Vec<LlmLayer>,
    pub final_norm: Tensor,
}

impl LlmParams {
    pub fn new<R: Rng>(rng: &mut R, config: StreamConfig) -> Result<LlmParams> {
        config.validate()?;
        let std = 0.02;
        let h = config.hidden;
        let embed_data: Vec<f64> =
            (0..config.vocab_size * h).map(|_| crate::nn::trunc_normal(rng, std)).collect();
        let layers = (0..config.num_layers)
            .map(|_| LlmLayer {
                attn_norm: Tensor::param(vec![1.0; h], &[h]).unwrap(),
                attn: AttentionParams::new(
                    rng,
                    h,
                    config.num_heads,
                    config.num_kv_heads,
                    config.head_dim,
                    std,
                ),
                ffn_norm: Tensor::param(vec![1.0; h], &[h]).unwrap(),
                ffn: FfnParams::new(rng, h, config.ffn_dim, std),
            })
            .collect();
        let vocab = config.vocab_size;
        let params = LlmParams {
            config,
            embed: Tensor::param(embed_data, &[vocab, h])?,
            layers,
            final_norm: Tensor::param(vec![1.0; h], &[h])?,
        };
        params.freeze();
        Ok(params)
    }

    /// The text stream never trains: clear requires_grad everywhere.
    pub fn freeze(&self) {
        for (_, t) in self.params() {
            t.set_requires_grad(false);
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embed".to_string(), self.embed.clone())];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer.{i}.attn_norm"), layer.attn_norm.clone()));
            for (name, t) in layer.attn.params() {
                out.push((format!("layer.{i}.attn.{name}"), t));
            }
            out.push((format!("layer.{i}.ffn_norm"), layer.ffn_norm.clone()));
            for (name, t) in layer.ffn.params() {
                out.push((format!("layer.{i}.ffn.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), self.final_norm.clone()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter, in declaration
    /// order. Training must leave this untouched.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.params() {
            for v in t.to_vec() {
                for b in v.to_bits().to_le_bytes() {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        hash
    }
}

/// Everything the image stream may consume from a text forward pass.
pub struct TextEncoding {
    pub ids: Vec<usize>,
    /// Real token count; ids at and beyond this index are PAD.
    pub len: usize,
    /// Hidden states after each block: [n, hidden].
    pub per_layer_hidden: Vec<Tensor>,
    /// Post-QK-norm, post-rotary keys per layer: [n, Hkv, d].
    pub per_layer_k: Vec<Tensor>,
    /// Values per layer: [n, Hkv, d].
    pub per_layer_v: Vec<Tensor>,
    /// Post-final-norm hidden states: [n, hidden].
    pub last_hidden: Tensor,
}

/// Lower-triangular causal mask.
pub fn causal_mask(n: usize) -> AttnMask {
    AttnMask::causal(n)
}

/// Causal mask with PAD keys removed: query i may attend to j iff j <= i and
/// j < len.
pub fn text_mask(n: usize, len: usize) -> AttnMask {
    let mut m = AttnMask::causal(n);
    for i in 0..n {
        for j in len..=i.min(n - 1) {
            if j <= i {
                m.set(i, j, false);
            }
        }
    }
    m
}

/// Run the frozen stream over one padded prompt.
pub fn llm_forward(params: &LlmParams, ids: &[usize], len: usize) -> Result<TextEncoding> {
    let cfg = &params.config;
    let n = ids.len();
    if len == 0 || len > n {
        return Err(FuseError::Config(format!("prompt length {len} out of range for {n} ids")));
    }
    for &id in ids {
        if id >= cfg.vocab_size {
            return Err(FuseError::IndexOutOfRange {
                op: "llm_forward".into(),
                index: id,
                limit: cfg.vocab_size,
            });
        }
    }
    let positions: Vec<usize> = (0..n).collect();
    let mask = text_mask(n, len);

    let mut x = ops::gather_rows(&params.embed, ids)?;
    x = ops::mul_scalar(&x, cfg.embedding_scale)?;

    let mut per_layer_hidden = Vec::with_capacity(cfg.num_layers);
    let mut per_layer_k = Vec::with_capacity(cfg.num_layers);
    let mut per_layer_v = Vec::with_capacity(cfg.num_layers);

    for layer in &params.layers {
        let h = rmsnorm(&x, &layer.attn_norm)?;
        let q = ops::reshape(&layer.attn.q_proj.forward(&h)?, &[n, cfg.num_heads, cfg.head_dim])?;
        let k = ops::reshape(&layer.attn.k_proj.forward(&h)?, &[n, cfg.num_kv_heads, cfg.head_dim])?;
        let v = ops::reshape(&layer.attn.v_proj.forward(&h)?, &[n, cfg.num_kv_heads, cfg.head_dim])?;
        let q = qk_normalize(&q, &layer.attn.q_gains)?;
        let k = qk_normalize(&k, &layer.attn.k_gains)?;
        let q = rope_1d(&q, &positions, ROPE_BASE)?;
        let k = rope_1d(&k, &positions, ROPE_BASE)?;
        per_layer_k.push(k.clone());
        per_layer_v.push(v.clone());

        let attn_out = attention(&q, &k, &v, &mask)?;
        let attn_out = layer.attn.o_proj.forward(&attn_out)?;
        x = ops::add(&x, &attn_out)?;

        let h2 = rmsnorm(&x, &layer.ffn_norm)?;
        let ffn_out = geglu_ffn(&h2, &layer.ffn)?;
        x = ops::add(&x, &ffn_out)?;
        per_layer_hidden.push(x.clone());
    }

    let last_hidden = rmsnorm(&x, &params.final_norm)?;
    Ok(TextEncoding {
        ids: ids.to_vec(),
        len,
        per_layer_hidden,
        per_layer_k,
        per_layer_v,
        last_hidden,
    })
}

/// The spec's desk-scale text stream.
pub fn toy_llm_config() -> StreamConfig {
    StreamConfig {
        num_layers: 4,
        hidden: 64,
        num_heads: 4,
        num_kv_heads: 1,
        head_dim: 16,
        ffn_dim: 256,
        vocab_size: VOCAB,
        embedding_scale: (64f64).sqrt(),
    }
}
