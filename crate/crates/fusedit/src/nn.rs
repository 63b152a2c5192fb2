//! Transformer sub-layers shared by both streams: masked grouped-query
//! attention, RMS normalization, QK normalization, gated GELU FFN, timestep
//! embedding plus the four conditioning strategies, and the rotary /
//! absolute positional schemes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FuseError, Result};
use crate::tensor::{ops, Tensor};

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Truncated normal (resampled beyond 2 sigma), ViT-style.
pub fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

#[derive(Clone)]
pub struct Linear {
    /// [in_dim, out_dim]
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize, std: f64, bias: bool) -> Linear {
        let data: Vec<f64> = (0..in_dim * out_dim).map(|_| trunc_normal(rng, std)).collect();
        Linear {
            w: Tensor::param(data, &[in_dim, out_dim]).unwrap(),
            b: bias.then(|| Tensor::param(vec![0.0; out_dim], &[out_dim]).unwrap()),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Linear {
        Linear {
            w: Tensor::param(vec![0.0; in_dim * out_dim], &[in_dim, out_dim]).unwrap(),
            b: bias.then(|| Tensor::param(vec![0.0; out_dim], &[out_dim]).unwrap()),
        }
    }

    /// x: [n, in_dim] -> [n, out_dim]
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::matmul(x, &self.w)?;
        match &self.b {
            Some(b) => ops::add(&y, b),
            None => Ok(y),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.w.numel() + self.b.as_ref().map_or(0, |b| b.numel())
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("w".to_string(), self.w.clone())];
        if let Some(b) = &self.b {
            out.push(("b".to_string(), b.clone()));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Boolean attention mask, `true` = the query row may attend to the key
/// column.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub n_q: usize,
    pub n_k: usize,
    bits: Vec<bool>,
}

impl AttnMask {
    pub fn new(n_q: usize, n_k: usize, bits: Vec<bool>) -> Result<AttnMask> {
        if bits.len() != n_q * n_k {
            return Err(FuseError::shape(
                "mask",
                format!("{}x{} mask needs {} bits, got {}", n_q, n_k, n_q * n_k, bits.len()),
            ));
        }
        Ok(AttnMask { n_q, n_k, bits })
    }

    pub fn all_true(n_q: usize, n_k: usize) -> AttnMask {
        AttnMask {
            n_q,
            n_k,
            bits: vec![true; n_q * n_k],
        }
    }

    /// Lower-triangular causal mask.
    pub fn causal(n: usize) -> AttnMask {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                bits[i * n + j] = true;
            }
        }
        AttnMask { n_q: n, n_k: n, bits }
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.n_k + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.bits[q * self.n_k + k] = v;
    }

    /// Error if some query row has no permitted key (softmax would be NaN).
    pub fn validate_rows(&self) -> Result<()> {
        for q in 0..self.n_q {
            if !self.bits[q * self.n_k..(q + 1) * self.n_k].iter().any(|&b| b) {
                return Err(FuseError::FullyMaskedRow { row: q });
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct AttentionParams {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub o_proj: Linear,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    /// Per-head QK-norm gains: [num_heads, head_dim] and [num_kv_heads, head_dim].
    pub q_gains: Tensor,
    pub k_gains: Tensor,
}

impl AttentionParams {
    pub fn new<R: Rng>(
        rng: &mut R,
        hidden: usize,
        num_heads: usize,
        num_kv_heads: usize,
        head_dim: usize,
        std: f64,
    ) -> AttentionParams {
        assert!(num_heads % num_kv_heads == 0, "heads must be a multiple of kv heads");
        AttentionParams {
            q_proj: Linear::new(rng, hidden, num_heads * head_dim, std, false),
            k_proj: Linear::new(rng, hidden, num_kv_heads * head_dim, std, false),
            v_proj: Linear::new(rng, hidden, num_kv_heads * head_dim, std, false),
            o_proj: Linear::new(rng, num_heads * head_dim, hidden, std, false),
            num_heads,
            num_kv_heads,
            head_dim,
            q_gains: Tensor::param(vec![1.0; num_heads * head_dim], &[num_heads, head_dim]).unwrap(),
            k_gains: Tensor::param(vec![1.0; num_kv_heads * head_dim], &[num_kv_heads, head_dim])
                .unwrap(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.q_proj.num_params()
            + self.k_proj.num_params()
            + self.v_proj.num_params()
            + self.o_proj.num_params()
            + self.q_gains.numel()
            + self.k_gains.numel()
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (tag, lin) in [
            ("q", &self.q_proj),
            ("k", &self.k_proj),
            ("v", &self.v_proj),
            ("o", &self.o_proj),
        ] {
            for (name, t) in lin.params() {
                out.push((format!("{tag}.{name}"), t));
            }
        }
        out.push(("q_gains".into(), self.q_gains.clone()));
        out.push(("k_gains".into(), self.k_gains.clone()));
        out
    }
}

/// Scaled dot-product attention over per-head tensors.
///
/// q: [n_q, Hq, d], k/v: [n_k, Hkv, d] with Hq a multiple of Hkv (KV heads
/// broadcast across query-head groups). Returns merged heads [n_q, Hq*d];
/// the output projection is applied by the caller.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttnMask) -> Result<Tensor> {
    let qs = q.shape();
    let ks = k.shape();
    let vs = v.shape();
    if qs.len() != 3 || ks.len() != 3 || vs != ks || qs[2] != ks[2] {
        return Err(FuseError::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", qs, ks, vs),
        ));
    }
    let (n_q, hq, d) = (qs[0], qs[1], qs[2]);
    let (n_k, hkv) = (ks[0], ks[1]);
    if hq % hkv != 0 {
        return Err(FuseError::shape(
            "attention",
            format!("{hq} query heads not a multiple of {hkv} kv heads"),
        ));
    }
    if mask.n_q != n_q || mask.n_k != n_k {
        return Err(FuseError::shape(
            "attention",
            format!("mask {}x{} vs sequence {}x{}", mask.n_q, mask.n_k, n_q, n_k),
        ));
    }
    mask.validate_rows()?;
    let g = hq / hkv;

    // [n_q, Hq, d] -> [Hkv, g*n_q, d]
    let q_r = ops::reshape(q, &[n_q, hkv, g, d])?;
    let q_r = ops::transpose(&q_r, 0, 1)?; // [Hkv, n_q, g, d]
    let q_r = ops::transpose(&q_r, 1, 2)?; // [Hkv, g, n_q, d]
    let q_r = ops::reshape(&q_r, &[hkv, g * n_q, d])?;

    let k_t = ops::transpose(k, 0, 1)?; // [Hkv, n_k, d]
    let v_t = ops::transpose(v, 0, 1)?;
    let k_tt = ops::transpose(&k_t, 1, 2)?; // [Hkv, d, n_k]

    let mut scores = ops::bmm(&q_r, &k_tt)?; // [Hkv, g*n_q, n_k]
    scores = ops::mul_scalar(&scores, 1.0 / (d as f64).sqrt())?;

    // Additive mask bias, tiled over query-head groups.
    let mut bias = vec![0.0; g * n_q * n_k];
    for j in 0..g {
        for i in 0..n_q {
            for kk in 0..n_k {
                if !mask.get(i, kk) {
                    bias[(j * n_q + i) * n_k + kk] = f64::NEG_INFINITY;
                }
            }
        }
    }
    let bias = Tensor::from_vec(bias, &[g * n_q, n_k])?;
    scores = ops::add(&scores, &bias)?;

    let probs = ops::softmax_last(&scores)?;
    let out = ops::bmm(&probs, &v_t)?; // [Hkv, g*n_q, d]

    let out = ops::reshape(&out, &[hkv, g, n_q, d])?;
    let out = ops::transpose(&out, 1, 2)?; // [Hkv, n_q, g, d]
    let out = ops::transpose(&out, 0, 1)?; // [n_q, Hkv, g, d]
    ops::reshape(&out, &[n_q, hq * d])
}

// ---------------------------------------------------------------------------
// Norms and FFN
// ---------------------------------------------------------------------------

/// RMS norm over the last axis: x / sqrt(mean(x^2)+eps) * gain.
pub fn rmsnorm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    let last = *shape.last().ok_or_else(|| FuseError::shape("rmsnorm", "rank-0 input"))?;
    if gain.numel() != last {
        return Err(FuseError::shape(
            "rmsnorm",
            format!("gain length {} vs last axis {}", gain.numel(), last),
        ));
    }
    let sq = ops::mul(x, x)?;
    let ms = ops::mean_axes(&sq, &[shape.len() - 1], true)?;
    let denom = ops::sqrt(&ops::add_scalar(&ms, RMS_EPS)?)?;
    let normed = ops::div(x, &denom)?;
    ops::mul(&normed, gain)
}

/// Per-head RMS norm over head_dim with learned gains, applied to Q or K
/// before rotary. x: [n, H, d], gains: [H, d].
pub fn qk_normalize(x: &Tensor, gains: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 || gains.shape() != shape[1..] {
        return Err(FuseError::shape(
            "qk_normalize",
            format!("x {:?}, gains {:?}", shape, gains.shape()),
        ));
    }
    let sq = ops::mul(x, x)?;
    let ms = ops::mean_axes(&sq, &[2], true)?;
    let denom = ops::sqrt(&ops::add_scalar(&ms, RMS_EPS)?)?;
    let normed = ops::div(x, &denom)?;
    ops::mul(&normed, gains)
}

#[derive(Clone)]
pub struct FfnParams {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl FfnParams {
    pub fn new<R: Rng>(rng: &mut R, hidden: usize, ffn_dim: usize, std: f64) -> FfnParams {
        FfnParams {
            gate: Linear::new(rng, hidden, ffn_dim, std, false),
            up: Linear::new(rng, hidden, ffn_dim, std, false),
            down: Linear::new(rng, ffn_dim, hidden, std, false),
        }
    }

    pub fn num_params(&self) -> usize {
        self.gate.num_params() + self.up.num_params() + self.down.num_params()
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (tag, lin) in [("gate", &self.gate), ("up", &self.up), ("down", &self.down)] {
            for (name, t) in lin.params() {
                out.push((format!("{tag}.{name}"), t));
            }
        }
        out
    }
}

/// down( GELU(x @ gate) * (x @ up) )
pub fn geglu_ffn(x: &Tensor, ffn: &FfnParams) -> Result<Tensor> {
    let g = ops::gelu(&ffn.gate.forward(x)?)?;
    let u = ffn.up.forward(x)?;
    ffn.down.forward(&ops::mul(&g, &u)?)
}

// ---------------------------------------------------------------------------
// Timestep embedding and conditioning
// ---------------------------------------------------------------------------

/// Sinusoidal features for t in [0,1]: [sin(t*w_i) | cos(t*w_i)] with w_i
/// log-spaced over [1, 10^4].
pub fn sinusoidal_features(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 || dim == 0 {
        return Err(FuseError::shape("timestep_embedding", format!("dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let w = 10_000f64.powf(exponent);
        out[i] = (t * w).sin();
        out[half + i] = (t * w).cos();
    }
    Ok(out)
}

#[derive(Clone)]
pub struct TimestepEmbedder {
    pub freq_dim: usize,
    pub lin1: Linear,
    pub lin2: Linear,
}

impl TimestepEmbedder {
    pub fn new<R: Rng>(rng: &mut R, freq_dim: usize, hidden: usize, std: f64) -> TimestepEmbedder {
        TimestepEmbedder {
            freq_dim,
            lin1: Linear::new(rng, freq_dim, hidden, std, true),
            lin2: Linear::new(rng, hidden, hidden, std, true),
        }
    }

    /// -> [1, hidden]
    pub fn forward(&self, t: f64) -> Result<Tensor> {
        let feats = sinusoidal_features(t, self.freq_dim)?;
        let x = Tensor::from_vec(feats, &[1, self.freq_dim])?;
        let h = ops::silu(&self.lin1.forward(&x)?)?;
        self.lin2.forward(&h)
    }

    pub fn num_params(&self) -> usize {
        self.lin1.num_params() + self.lin2.num_params()
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (tag, lin) in [("lin1", &self.lin1), ("lin2", &self.lin2)] {
            for (name, t) in lin.params() {
                out.push((format!("{tag}.{name}"), t));
            }
        }
        out
    }
}

/// Which timestep-conditioning strategy a DiT instance uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ConditioningKind {
    AdaLnZero,
    AdaLnSingle,
    Addition,
    None,
}

impl ConditioningKind {
    pub fn parse(s: &str) -> Result<ConditioningKind> {
        match s {
            "adaln-zero" => Ok(ConditioningKind::AdaLnZero),
            "adaln-single" => Ok(ConditioningKind::AdaLnSingle),
            "addition" => Ok(ConditioningKind::Addition),
            "none" => Ok(ConditioningKind::None),
            _ => Err(FuseError::Config(format!("unknown conditioning '{s}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConditioningKind::AdaLnZero => "adaln-zero",
            ConditioningKind::AdaLnSingle => "adaln-single",
            ConditioningKind::Addition => "addition",
            ConditioningKind::None => "none",
        }
    }
}

/// Per-layer modulation set for the attention and FFN branches.
pub struct LayerMod {
    pub shift_attn: Tensor,
    pub scale_attn: Tensor,
    pub gate_attn: Tensor,
    pub shift_ffn: Tensor,
    pub scale_ffn: Tensor,
    pub gate_ffn: Tensor,
}

fn split_six(mods: &Tensor, hidden: usize) -> Result<LayerMod> {
    // mods: [1, 6*hidden]
    let part = |i: usize| ops::slice(mods, 1, i * hidden, (i + 1) * hidden);
    Ok(LayerMod {
        shift_attn: part(0)?,
        scale_attn: part(1)?,
        gate_attn: part(2)?,
        shift_ffn: part(3)?,
        scale_ffn: part(4)?,
        gate_ffn: part(5)?,
    })
}

/// Parameters for one of the four conditioning strategies. The `None`
/// variant owns zero timestep parameters.
#[derive(Clone)]
pub enum Conditioning {
    AdaLnZero {
        /// Per-layer zero-initialized heads: hidden -> 6*hidden.
        heads: Vec<Linear>,
        /// Final-norm head: hidden -> 2*hidden (shift, scale), zero-init.
        final_head: Linear,
    },
    AdaLnSingle {
        /// One global head: hidden -> 6*hidden, zero-init.
        global: Linear,
        /// Per-layer learnable embeddings [6*hidden], zero-init.
        per_layer: Vec<Tensor>,
        /// Final-norm learnable (shift, scale) table [2*hidden], zero-init.
        final_table: Tensor,
    },
    Addition,
    None,
}

impl Conditioning {
    pub fn new(kind: ConditioningKind, num_layers: usize, hidden: usize) -> Conditioning {
        match kind {
            ConditioningKind::AdaLnZero => Conditioning::AdaLnZero {
                heads: (0..num_layers).map(|_| Linear::zeros(hidden, 6 * hidden, true)).collect(),
                final_head: Linear::zeros(hidden, 2 * hidden, true),
            },
            ConditioningKind::AdaLnSingle => Conditioning::AdaLnSingle {
                global: Linear::zeros(hidden, 6 * hidden, true),
                per_layer: (0..num_layers)
                    .map(|_| Tensor::param(vec![0.0; 6 * hidden], &[1, 6 * hidden]).unwrap())
                    .collect(),
                final_table: Tensor::param(vec![0.0; 2 * hidden], &[1, 2 * hidden]).unwrap(),
            },
            ConditioningKind::Addition => Conditioning::Addition,
            ConditioningKind::None => Conditioning::None,
        }
    }

    pub fn kind(&self) -> ConditioningKind {
        match self {
            Conditioning::AdaLnZero { .. } => ConditioningKind::AdaLnZero,
            Conditioning::AdaLnSingle { .. } => ConditioningKind::AdaLnSingle,
            Conditioning::Addition => ConditioningKind::Addition,
            Conditioning::None => ConditioningKind::None,
        }
    }

    pub fn num_layers(&self) -> Option<usize> {
        match self {
            Conditioning::AdaLnZero { heads, .. } => Some(heads.len()),
            Conditioning::AdaLnSingle { per_layer, .. } => Some(per_layer.len()),
            _ => None,
        }
    }

    /// Modulation vectors for one layer, or `None` when the strategy has no
    /// per-layer modulation (Addition / None).
    pub fn layer_modulation(&self, t_emb: Option<&Tensor>, layer: usize, hidden: usize) -> Result<Option<LayerMod>> {
        if let Some(n) = self.num_layers() {
            if layer >= n {
                return Err(FuseError::IndexOutOfRange {
                    op: "layer_modulation".into(),
                    index: layer,
                    limit: n,
                });
            }
        }
        match self {
            Conditioning::AdaLnZero { heads, .. } => {
                let t = t_emb.ok_or_else(|| FuseError::Config("adaLN-Zero needs a timestep embedding".into()))?;
                let mods = heads[layer].forward(&ops::silu(t)?)?;
                Ok(Some(split_six(&mods, hidden)?))
            }
            Conditioning::AdaLnSingle { global, per_layer, .. } => {
                let t = t_emb.ok_or_else(|| FuseError::Config("adaLN-Single needs a timestep embedding".into()))?;
                let global_mods = global.forward(&ops::silu(t)?)?;
                let mods = ops::add(&global_mods, &per_layer[layer])?;
                Ok(Some(split_six(&mods, hidden)?))
            }
            Conditioning::Addition | Conditioning::None => Ok(None),
        }
    }

    /// (shift, scale) for the final norm, or `None`.
    pub fn final_modulation(&self, t_emb: Option<&Tensor>, hidden: usize) -> Result<Option<(Tensor, Tensor)>> {
        match self {
            Conditioning::AdaLnZero { final_head, .. } => {
                let t = t_emb.ok_or_else(|| FuseError::Config("adaLN-Zero needs a timestep embedding".into()))?;
                let mods = final_head.forward(&ops::silu(t)?)?;
                let shift = ops::slice(&mods, 1, 0, hidden)?;
                let scale = ops::slice(&mods, 1, hidden, 2 * hidden)?;
                Ok(Some((shift, scale)))
            }
            Conditioning::AdaLnSingle { final_table, .. } => {
                let shift = ops::slice(final_table, 1, 0, hidden)?;
                let scale = ops::slice(final_table, 1, hidden, 2 * hidden)?;
                Ok(Some((shift, scale)))
            }
            _ => Ok(None),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Conditioning::AdaLnZero { heads, final_head } => {
                heads.iter().map(Linear::num_params).sum::<usize>() + final_head.num_params()
            }
            Conditioning::AdaLnSingle { global, per_layer, final_table } => {
                global.num_params()
                    + per_layer.iter().map(Tensor::numel).sum::<usize>()
                    + final_table.numel()
            }
            Conditioning::Addition | Conditioning::None => 0,
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match self {
            Conditioning::AdaLnZero { heads, final_head } => {
                for (i, h) in heads.iter().enumerate() {
                    for (name, t) in h.params() {
                        out.push((format!("cond.head.{i}.{name}"), t));
                    }
                }
                for (name, t) in final_head.params() {
                    out.push((format!("cond.final.{name}"), t));
                }
            }
            Conditioning::AdaLnSingle { global, per_layer, final_table } => {
                for (name, t) in global.params() {
                    out.push((format!("cond.global.{name}"), t));
                }
                for (i, t) in per_layer.iter().enumerate() {
                    out.push((format!("cond.layer_emb.{i}"), t.clone()));
                }
                out.push(("cond.final_table".into(), final_table.clone()));
            }
            Conditioning::Addition | Conditioning::None => {}
        }
        out
    }
}

/// x * (1 + scale) + shift, with [1,h] modulation broadcast over rows.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let scaled = ops::mul(x, &ops::add_scalar(scale, 1.0)?)?;
    ops::add(&scaled, shift)
}

// ---------------------------------------------------------------------------
// Positional encodings
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PositionalScheme {
    Rope1dPlusApe,
    Rope1d,
    Rope1dPlus2d,
    MRope { chunks: (usize, usize) },
}

impl PositionalScheme {
    pub fn parse(s: &str, head_dim: usize) -> Result<PositionalScheme> {
        match s {
            "rope1d+ape" => Ok(PositionalScheme::Rope1dPlusApe),
            "rope1d" => Ok(PositionalScheme::Rope1d),
            "rope1d+2d" => Ok(PositionalScheme::Rope1dPlus2d),
            "mrope" => Ok(PositionalScheme::MRope {
                chunks: (head_dim / 4, head_dim / 2 - head_dim / 4),
            }),
            _ => Err(FuseError::Config(format!("unknown positional scheme '{s}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PositionalScheme::Rope1dPlusApe => "rope1d+ape",
            PositionalScheme::Rope1d => "rope1d",
            PositionalScheme::Rope1dPlus2d => "rope1d+2d",
            PositionalScheme::MRope { .. } => "mrope",
        }
    }

    pub fn uses_ape(&self) -> bool {
        matches!(self, PositionalScheme::Rope1dPlusApe)
    }
}

/// Pair frequencies of the rotary ladder on a head of size d:
/// f_i = base^(-2i/d) for pair i in 0..d/2.
fn pair_freqs(d: usize, base: f64) -> Vec<f64> {
    (0..d / 2).map(|i| base.powf(-2.0 * i as f64 / d as f64)).collect()
}

/// Rotate consecutive pairs of x [n, H, d] by per-token per-pair angles
/// (angles: [n, d/2], row-major).
fn rope_apply(x: &Tensor, angles: &[f64]) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] % 2 != 0 {
        return Err(FuseError::shape("rope", format!("expected [n, H, even d], got {:?}", shape)));
    }
    let (n, h, d) = (shape[0], shape[1], shape[2]);
    if angles.len() != n * d / 2 {
        return Err(FuseError::shape(
            "rope",
            format!("angle table {} vs {} tokens x {} pairs", angles.len(), n, d / 2),
        ));
    }
    // cos/sin tables, duplicated per pair channel, broadcast over heads.
    let mut cos = vec![0.0; n * d];
    let mut sin = vec![0.0; n * d];
    for t in 0..n {
        for i in 0..d / 2 {
            let a = angles[t * d / 2 + i];
            cos[t * d + 2 * i] = a.cos();
            cos[t * d + 2 * i + 1] = a.cos();
            sin[t * d + 2 * i] = a.sin();
            sin[t * d + 2 * i + 1] = a.sin();
        }
    }
    let cos = Tensor::from_vec(cos, &[n, 1, d])?;
    let sin = Tensor::from_vec(sin, &[n, 1, d])?;

    // rotate_pairs(x): (x0, x1) -> (-x1, x0)
    let xp = ops::reshape(x, &[n, h, d / 2, 2])?;
    let even = ops::slice(&xp, 3, 0, 1)?;
    let odd = ops::slice(&xp, 3, 1, 2)?;
    let neg_odd = ops::mul_scalar(&odd, -1.0)?;
    let rot = ops::concat(&[&neg_odd, &even], 3)?;
    let rot = ops::reshape(&rot, &[n, h, d])?;

    ops::add(&ops::mul(x, &cos)?, &ops::mul(&rot, &sin)?)
}

/// Standard 1D rotary embedding at integer positions.
pub fn rope_1d(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(FuseError::shape("rope_1d", format!("expected rank 3, got {:?}", shape)));
    }
    let d = shape[2];
    if positions.len() != shape[0] {
        return Err(FuseError::shape(
            "rope_1d",
            format!("{} positions vs {} tokens", positions.len(), shape[0]),
        ));
    }
    let freqs = pair_freqs(d, base);
    let mut angles = vec![0.0; shape[0] * d / 2];
    for (t, &p) in positions.iter().enumerate() {
        for (i, &f) in freqs.iter().enumerate() {
            angles[t * d / 2 + i] = p as f64 * f;
        }
    }
    rope_apply(x, &angles)
}

/// 2D axial rotary: the first half of the frequency-pair ladder is rotated
/// by the row index, the second half by the column index.
pub fn rope_2d(x: &Tensor, grid_pos: &[(usize, usize)], base: f64) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] % 4 != 0 {
        return Err(FuseError::shape(
            "rope_2d",
            format!("head_dim must be divisible by 4, got {:?}", shape),
        ));
    }
    let d = shape[2];
    let half = d / 4;
    mrope(x, grid_pos, (half, d / 2 - half), base)
}

/// Multi-axis rotary: the frequency-pair ladder is split into two chunks;
/// chunk j is rotated using coordinate j of the token's position id. Text
/// tokens carry (p, p), collapsing to plain 1D rotary.
pub fn mrope(x: &Tensor, ids: &[(usize, usize)], chunks: (usize, usize), base: f64) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] % 2 != 0 {
        return Err(FuseError::shape("mrope", format!("expected [n, H, even d], got {:?}", shape)));
    }
    let d = shape[2];
    if chunks.0 + chunks.1 != d / 2 {
        return Err(FuseError::shape(
            "mrope",
            format!("chunks {:?} must sum to head_dim/2 = {}", chunks, d / 2),
        ));
    }
    if ids.len() != shape[0] {
        return Err(FuseError::shape(
            "mrope",
            format!("{} ids vs {} tokens", ids.len(), shape[0]),
        ));
    }
    let freqs = pair_freqs(d, base);
    let mut angles = vec![0.0; shape[0] * d / 2];
    for (t, &(p1, p2)) in ids.iter().enumerate() {
        for (i, &f) in freqs.iter().enumerate() {
            let coord = if i < chunks.0 { p1 } else { p2 };
            angles[t * d / 2 + i] = coord as f64 * f;
        }
    }
    rope_apply(x, &angles)
}

/// 2D sinusoidal absolute positional table [rows*cols, dim]; the first half
/// of the channels encodes the row, the second half the column.
pub fn ape_2d(rows: usize, cols: usize, dim: usize) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(FuseError::shape("ape_2d", format!("dim {dim} must be divisible by 4")));
    }
    let axis_dim = dim / 2;
    let quarter = axis_dim / 2;
    let axis_emb = |pos: usize| -> Vec<f64> {
        let mut out = vec![0.0; axis_dim];
        for i in 0..quarter {
            let w = 10_000f64.powf(-(2.0 * i as f64) / axis_dim as f64);
            out[i] = (pos as f64 * w).sin();
            out[quarter + i] = (pos as f64 * w).cos();
        }
        out
    };
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        let row_half = axis_emb(r);
        for c in 0..cols {
            data.extend_from_slice(&row_half);
            data.extend_from_slice(&axis_emb(c));
        }
    }
    Tensor::from_vec(data, &[rows * cols, dim])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd::finite_diff_check;
    use crate::tensor::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    /// Dense per-head reference attention computed with scalar loops.
    fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttnMask) -> Vec<f64> {
        let (n_q, hq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let (n_k, hkv) = (k.shape()[0], k.shape()[1]);
        let g = hq / hkv;
        let qd = q.to_vec();
        let kd = k.to_vec();
        let vd = v.to_vec();
        let mut out = vec![0.0; n_q * hq * d];
        for i in 0..n_q {
            for h in 0..hq {
                let kvh = h / g;
                let mut scores = vec![f64::NEG_INFINITY; n_k];
                for j in 0..n_k {
                    if mask.get(i, j) {
                        let mut dot = 0.0;
                        for c in 0..d {
                            dot += qd[(i * hq + h) * d + c] * kd[(j * hkv + kvh) * d + c];
                        }
                        scores[j] = dot / (d as f64).sqrt();
                    }
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..n_k {
                    let p = exps[j] / z;
                    for c in 0..d {
                        out[i * hq * d + h * d + c] += p * vd[(j * hkv + kvh) * d + c];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_dense_oracle_mha() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, h, d) = (5, 3, 4);
        let q = randn(&mut rng, &[n, h, d]);
        let k = randn(&mut rng, &[n, h, d]);
        let v = randn(&mut rng, &[n, h, d]);
        let mask = AttnMask::causal(n);
        let got = attention(&q, &k, &v, &mask).unwrap();
        let want = attention_oracle(&q, &k, &v, &mask);
        for (a, b) in got.to_vec().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_matches_dense_oracle_gqa() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // 6 query heads sharing 2 kv heads, rectangular mask.
        let (n_q, n_k, hq, hkv, d) = (4, 7, 6, 2, 4);
        let q = randn(&mut rng, &[n_q, hq, d]);
        let k = randn(&mut rng, &[n_k, hkv, d]);
        let v = randn(&mut rng, &[n_k, hkv, d]);
        let mut bits = vec![true; n_q * n_k];
        bits[3] = false;
        bits[n_k + 2] = false;
        let mask = AttnMask::new(n_q, n_k, bits).unwrap();
        let got = attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(got.shape(), vec![n_q, hq * d]);
        let want = attention_oracle(&q, &k, &v, &mask);
        for (a, b) in got.to_vec().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_fully_masked_row_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = randn(&mut rng, &[2, 1, 4]);
        let k = randn(&mut rng, &[3, 1, 4]);
        let v = randn(&mut rng, &[3, 1, 4]);
        let mask = AttnMask::new(2, 3, vec![true, false, true, false, false, false]).unwrap();
        match attention(&q, &k, &v, &mask) {
            Err(FuseError::FullyMaskedRow { row }) => assert_eq!(row, 1),
            other => panic!("expected FullyMaskedRow, got {other:?}"),
        }
    }

    #[test]
    fn attention_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = randn(&mut rng, &[3, 1, 3]);
        let v = randn(&mut rng, &[3, 1, 3]);
        let q0 = randn(&mut rng, &[2, 2, 3]);
        let mask = AttnMask::all_true(2, 3);
        let err = finite_diff_check(
            |q| {
                let o = attention(q, &k, &v, &mask)?;
                ops::sum_all(&ops::mul(&o, &o)?)
            },
            &q0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn rmsnorm_matches_manual_and_grads() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0, 0.5, 0.1, -0.7], &[2, 3]).unwrap();
        let gain = Tensor::from_vec(vec![1.5, 0.5, 2.0], &[3]).unwrap();
        let y = rmsnorm(&x, &gain).unwrap();
        let xd = x.to_vec();
        let gd = gain.to_vec();
        for r in 0..2 {
            let row = &xd[r * 3..(r + 1) * 3];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / 3.0;
            let denom = (ms + RMS_EPS).sqrt();
            for c in 0..3 {
                let want = row[c] / denom * gd[c];
                assert!((y.to_vec()[r * 3 + c] - want).abs() < 1e-12);
            }
        }
        let err = finite_diff_check(
            |x| ops::sum_all(&ops::mul(&rmsnorm(x, &gain)?, &rmsnorm(x, &gain)?)?),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn qk_normalize_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[3, 2, 4]);
        let gains = Tensor::from_vec((1..=8).map(|v| v as f64 * 0.25).collect(), &[2, 4]).unwrap();
        let y = qk_normalize(&x, &gains).unwrap();
        let xd = x.to_vec();
        let gd = gains.to_vec();
        for t in 0..3 {
            for h in 0..2 {
                let s = (t * 2 + h) * 4;
                let ms = xd[s..s + 4].iter().map(|v| v * v).sum::<f64>() / 4.0;
                let denom = (ms + RMS_EPS).sqrt();
                for c in 0..4 {
                    let want = xd[s + c] / denom * gd[h * 4 + c];
                    assert!((y.to_vec()[s + c] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn geglu_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ffn = FfnParams::new(&mut rng, 4, 6, 0.2);
        let x = randn(&mut rng, &[2, 4]);
        let y = geglu_ffn(&x, &ffn).unwrap();
        let g = ops::gelu(&ops::matmul(&x, &ffn.gate.w).unwrap()).unwrap();
        let u = ops::matmul(&x, &ffn.up.w).unwrap();
        let want = ops::matmul(&ops::mul(&g, &u).unwrap(), &ffn.down.w).unwrap();
        for (a, b) in y.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoidal_features_span_frequencies() {
        let f = sinusoidal_features(0.0, 8).unwrap();
        // sin(0)=0 for the first half, cos(0)=1 for the second.
        assert!(f[..4].iter().all(|&v| v == 0.0));
        assert!(f[4..].iter().all(|&v| v == 1.0));
        let f = sinusoidal_features(0.5, 8).unwrap();
        assert!((f[0] - 0.5f64.sin()).abs() < 1e-12); // w_0 = 1
        assert!((f[3] - (0.5f64 * 1e4).sin()).abs() < 1e-9); // w_last = 1e4
        assert!(sinusoidal_features(0.5, 7).is_err());
    }

    #[test]
    fn adaln_zero_is_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 6;
        let cond = Conditioning::new(ConditioningKind::AdaLnZero, 2, h);
        let emb = TimestepEmbedder::new(&mut rng, 8, h, 0.02);
        let t = emb.forward(0.37).unwrap();
        let m = cond.layer_modulation(Some(&t), 0, h).unwrap().unwrap();
        assert!(m.shift_attn.to_vec().iter().all(|&v| v == 0.0));
        assert!(m.scale_attn.to_vec().iter().all(|&v| v == 0.0));
        assert!(m.gate_attn.to_vec().iter().all(|&v| v == 0.0));
        assert!(m.gate_ffn.to_vec().iter().all(|&v| v == 0.0));
        // modulate with zero shift/scale is identity
        let x = randn(&mut rng, &[3, h]);
        let y = modulate(&x, &m.shift_attn, &m.scale_attn).unwrap();
        assert_eq!(x.to_vec(), y.to_vec());
        let (fs, fsc) = cond.final_modulation(Some(&t), h).unwrap().unwrap();
        assert!(fs.to_vec().iter().all(|&v| v == 0.0));
        assert!(fsc.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditioning_param_counts() {
        let (layers, h) = (3, 8);
        let zero = Conditioning::new(ConditioningKind::AdaLnZero, layers, h);
        assert_eq!(zero.num_params(), layers * (h * 6 * h + 6 * h) + h * 2 * h + 2 * h);
        let single = Conditioning::new(ConditioningKind::AdaLnSingle, layers, h);
        assert_eq!(single.num_params(), h * 6 * h + 6 * h + layers * 6 * h + 2 * h);
        assert_eq!(Conditioning::new(ConditioningKind::Addition, layers, h).num_params(), 0);
        assert_eq!(Conditioning::new(ConditioningKind::None, layers, h).num_params(), 0);
    }

    #[test]
    fn adaln_single_layers_differ_after_update() {
        let h = 4;
        let cond = Conditioning::new(ConditioningKind::AdaLnSingle, 2, h);
        if let Conditioning::AdaLnSingle { per_layer, .. } = &cond {
            let mut v = vec![0.0; 6 * h];
            v[0] = 1.0;
            per_layer[1].set_data(&v);
        }
        let t = Tensor::from_vec(vec![0.1; h], &[1, h]).unwrap();
        let m0 = cond.layer_modulation(Some(&t), 0, h).unwrap().unwrap();
        let m1 = cond.layer_modulation(Some(&t), 1, h).unwrap().unwrap();
        assert_eq!(m0.shift_attn.to_vec()[0] + 1.0, m1.shift_attn.to_vec()[0]);
    }

    // --- positional encodings ---

    #[test]
    fn rope_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[5, 2, 8]);
        let y = rope_1d(&x, &[0, 3, 7, 11, 40], ROPE_BASE).unwrap();
        let xn: f64 = x.to_vec().iter().map(|v| v * v).sum();
        let yn: f64 = y.to_vec().iter().map(|v| v * v).sum();
        assert!((xn - yn).abs() < 1e-9);
        // position 0 is the identity
        for c in 0..16 {
            assert!((x.to_vec()[c] - y.to_vec()[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_dot_products_are_relative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = randn(&mut rng, &[1, 1, 8]);
        let k = randn(&mut rng, &[1, 1, 8]);
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| x * y).sum()
        };
        let d1 = dot(
            &rope_1d(&q, &[7], ROPE_BASE).unwrap(),
            &rope_1d(&k, &[3], ROPE_BASE).unwrap(),
        );
        let d2 = dot(
            &rope_1d(&q, &[21], ROPE_BASE).unwrap(),
            &rope_1d(&k, &[17], ROPE_BASE).unwrap(),
        );
        assert!((d1 - d2).abs() < 1e-9, "{d1} vs {d2}");
    }

    #[test]
    fn mrope_equal_coords_is_rope_1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, &[4, 2, 8]);
        let pos = [2usize, 5, 9, 13];
        let ids: Vec<(usize, usize)> = pos.iter().map(|&p| (p, p)).collect();
        let a = rope_1d(&x, &pos, ROPE_BASE).unwrap();
        let b = mrope(&x, &ids, (3, 1), ROPE_BASE).unwrap();
        for (u, v) in a.to_vec().iter().zip(b.to_vec()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_2d_is_mrope_with_equal_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[4, 1, 8]);
        let ids = [(0usize, 0usize), (0, 1), (1, 0), (2, 3)];
        let a = rope_2d(&x, &ids, ROPE_BASE).unwrap();
        let b = mrope(&x, &ids, (2, 2), ROPE_BASE).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn rope_2d_axes_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&mut rng, &[1, 1, 8]);
        // changing only the column leaves the row-chunk channels unchanged
        let a = rope_2d(&x, &[(3, 0)], ROPE_BASE).unwrap();
        let b = rope_2d(&x, &[(3, 5)], ROPE_BASE).unwrap();
        for c in 0..4 {
            assert!((a.to_vec()[c] - b.to_vec()[c]).abs() < 1e-12);
        }
        assert!((0..8).any(|c| (a.to_vec()[c] - b.to_vec()[c]).abs() > 1e-6));
    }

    #[test]
    fn mrope_bad_chunks_error() {
        let x = Tensor::zeros(&[1, 1, 8]);
        assert!(mrope(&x, &[(0, 0)], (3, 2), ROPE_BASE).is_err());
    }

    #[test]
    fn rope_gradient_flows() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = randn(&mut rng, &[2, 1, 4]);
        let err = finite_diff_check(
            |x| {
                let y = rope_1d(x, &[1, 4], ROPE_BASE)?;
                ops::sum_all(&ops::mul(&y, &y)?)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn ape_2d_layout() {
        let t = ape_2d(2, 3, 8).unwrap();
        assert_eq!(t.shape(), vec![6, 8]);
        let d = t.to_vec();
        // same row, different column: row half (first 4 channels) identical
        for c in 0..4 {
            assert_eq!(d[c], d[8 + c]);
        }
        // same column, different row: column half identical
        for c in 4..8 {
            assert_eq!(d[c], d[3 * 8 + c]);
        }
        assert!(d.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn timestep_embedder_shapes_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let emb = TimestepEmbedder::new(&mut rng, 16, 8, 0.02);
        let y = emb.forward(0.25).unwrap();
        assert_eq!(y.shape(), vec![1, 8]);
        assert_eq!(emb.num_params(), 16 * 8 + 8 + 8 * 8 + 8);
        // distinct timesteps give distinct embeddings
        let y2 = emb.forward(0.75).unwrap();
        assert!(y.to_vec() != y2.to_vec());
    }

    #[test]
    fn linear_zeros_and_counts() {
        let lin = Linear::zeros(3, 5, true);
        assert_eq!(lin.num_params(), 3 * 5 + 5);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        assert!(lin.forward(&x).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_shapes_validate() {
        assert!(AttnMask::new(2, 2, vec![true; 3]).is_err());
        let m = AttnMask::causal(3);
        assert!(m.get(2, 0) && !m.get(0, 2));
        assert!(m.validate_rows().is_ok());
    }
}
