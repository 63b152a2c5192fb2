//! Wiring the frozen text stream into the trainable image stream.
//!
//! Four variants:
//! - `DeepFusionShared`: every DiT layer's self-attention reads the K/V of
//!   an aligned LLM layer alongside its own image K/V (shared self-attention
//!   under the joint mask),
//! - `ShallowSelfAttn`: last-layer LLM hiddens go through a norm + adapter,
//!   then per-DiT-layer K/V projections; concatenated into self-attention,
//! - `ShallowCrossAttn`: same text pathway, but consumed by a dedicated
//!   cross-attention sub-layer after each self-attention,
//! - `DeepFusionCross`: cross-attention whose K/V are the aligned LLM
//!   layers' own K/V, no adapter.
//!
//! The joint mask keeps text causal, forbids text->image attention entirely,
//! and lets image tokens attend to every non-PAD text token.

use rand::Rng;

use crate::dit::{grid_positions, patchify, token_grid, unpatchify, DitParams, LatentImage};
use crate::error::{FuseError, Result};
use crate::llm::{llm_forward, LlmParams, StreamConfig, TextEncoding};
use crate::nn::{
    attention, geglu_ffn, modulate, mrope, qk_normalize, rmsnorm, rope_1d, rope_2d, ape_2d,
    AttnMask, ConditioningKind, Linear, PositionalScheme, ROPE_BASE,
};
use crate::tensor::{ops, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FusionVariant {
    DeepFusionShared,
    ShallowSelfAttn,
    ShallowCrossAttn,
    DeepFusionCross,
}

impl FusionVariant {
    pub fn parse(s: &str) -> Result<FusionVariant> {
        match s {
            "deep" => Ok(FusionVariant::DeepFusionShared),
            "shallow-self" => Ok(FusionVariant::ShallowSelfAttn),
            "shallow-cross" => Ok(FusionVariant::ShallowCrossAttn),
            "deep-cross" => Ok(FusionVariant::DeepFusionCross),
            _ => Err(FuseError::Config(format!("unknown fusion variant '{s}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionVariant::DeepFusionShared => "deep",
            FusionVariant::ShallowSelfAttn => "shallow-self",
            FusionVariant::ShallowCrossAttn => "shallow-cross",
            FusionVariant::DeepFusionCross => "deep-cross",
        }
    }

    pub fn is_deep(&self) -> bool {
        matches!(self, FusionVariant::DeepFusionShared | FusionVariant::DeepFusionCross)
    }

    pub fn is_cross(&self) -> bool {
        matches!(self, FusionVariant::ShallowCrossAttn | FusionVariant::DeepFusionCross)
    }
}

/// Map from DiT layer index to the LLM layer whose K/V it reads.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerAlignment {
    pub map: Vec<usize>,
}

impl LayerAlignment {
    pub fn validate(&self, llm_layers: usize) -> Result<()> {
        if self.map.windows(2).any(|w| w[0] > w[1]) {
            return Err(FuseError::Config("layer alignment must be monotone".into()));
        }
        if self.map.iter().any(|&l| l >= llm_layers) {
            return Err(FuseError::Config(format!(
                "layer alignment {:?} exceeds {llm_layers} LLM layers",
                self.map
            )));
        }
        Ok(())
    }
}

/// Center the DiT's layers on the middle of the LLM stack:
/// start = floor((llm_layers - dit_layers)/2), map(l) = start + l.
pub fn align_layers(llm_layers: usize, dit_layers: usize) -> Result<LayerAlignment> {
    if dit_layers > llm_layers {
        return Err(FuseError::Config(format!(
            "{dit_layers} DiT layers cannot align onto {llm_layers} LLM layers"
        )));
    }
    let start = (llm_layers - dit_layers) / 2;
    Ok(LayerAlignment {
        map: (0..dit_layers).map(|l| start + l).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionSpec {
    pub variant: FusionVariant,
    pub conditioning: ConditioningKind,
    pub positional: PositionalScheme,
    pub alignment: LayerAlignment,
    /// True when the DiT hidden size differs from the LLM's, so the shared
    /// attention operates in LLM attention dimensions via the DiT's own
    /// projections.
    pub needs_projection: bool,
}

/// Text pathway of the shallow variants: rmsnorm + linear adapter over the
/// LLM's final hidden states.
pub struct ShallowAdapter {
    pub norm: Tensor,
    /// llm_hidden -> dit_hidden
    pub proj: Linear,
}

/// Cross-attention sub-layer (ShallowCrossAttn / DeepFusionCross).
pub struct CrossBlock {
    pub norm: Tensor,
    /// dit_hidden -> n_heads*head_dim (text K/V dims of the variant).
    pub q_proj: Linear,
    /// Zero-initialized so the cross branch is silent at init.
    pub out_proj: Linear,
}

/// Variant-specific trainable parameters beyond the DiT trunk.
pub struct FusionExtras {
    pub adapter: Option<ShallowAdapter>,
    /// Per DiT layer: (k_proj, v_proj), dit_hidden -> num_kv_heads*head_dim.
    pub text_kv: Vec<(Linear, Linear)>,
    pub cross: Vec<CrossBlock>,
}

impl FusionExtras {
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(a) = &self.adapter {
            out.push(("fusion.adapter.norm".into(), a.norm.clone()));
            for (name, t) in a.proj.params() {
                out.push((format!("fusion.adapter.proj.{name}"), t));
            }
        }
        for (i, (k, v)) in self.text_kv.iter().enumerate() {
            for (name, t) in k.params() {
                out.push((format!("fusion.text_kv.{i}.k.{name}"), t));
            }
            for (name, t) in v.params() {
                out.push((format!("fusion.text_kv.{i}.v.{name}"), t));
            }
        }
        for (i, c) in self.cross.iter().enumerate() {
            out.push((format!("fusion.cross.{i}.norm"), c.norm.clone()));
            for (name, t) in c.q_proj.params() {
                out.push((format!("fusion.cross.{i}.q.{name}"), t));
            }
            for (name, t) in c.out_proj.params() {
                out.push((format!("fusion.cross.{i}.out.{name}"), t));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Frozen LLM + trainable DiT + the fusion wiring between them.
pub struct FusedModel {
    pub spec: FusionSpec,
    pub llm: LlmParams,
    pub dit: DitParams,
    pub extras: FusionExtras,
}

impl FusedModel {
    pub fn new<R: Rng>(
        rng: &mut R,
        llm: LlmParams,
        dit: DitParams,
        variant: FusionVariant,
        positional: PositionalScheme,
    ) -> Result<FusedModel> {
        let alignment = align_layers(llm.config.num_layers, dit.config.num_layers)?;
        let spec = FusionSpec {
            variant,
            conditioning: dit.cond.kind(),
            positional,
            alignment,
            needs_projection: dit.config.hidden != llm.config.hidden,
        };
        let extras = build_extras(rng, &spec, &llm.config, &dit.config);
        let model = FusedModel { spec, llm, dit, extras };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let lc = &self.llm.config;
        let dc = &self.dit.config;
        self.spec.alignment.validate(lc.num_layers)?;
        if self.spec.alignment.map.len() != dc.num_layers {
            return Err(FuseError::Config(format!(
                "alignment maps {} layers but DiT has {}",
                self.spec.alignment.map.len(),
                dc.num_layers
            )));
        }
        if self.spec.conditioning != self.dit.cond.kind() {
            return Err(FuseError::Config("spec/DiT conditioning mismatch".into()));
        }
        // Deep variants consume LLM K/V directly, so the DiT attention must
        // operate in the LLM's attention dimensions.
        if self.spec.variant.is_deep()
            && (dc.num_heads != lc.num_heads
                || dc.num_kv_heads != lc.num_kv_heads
                || dc.head_dim != lc.head_dim)
        {
            return Err(FuseError::Config(format!(
                "deep fusion needs matching attention dims: DiT {}x{}kv x{} vs LLM {}x{}kv x{}",
                dc.num_heads, dc.num_kv_heads, dc.head_dim, lc.num_heads, lc.num_kv_heads,
                lc.head_dim
            )));
        }
        if let PositionalScheme::MRope { chunks } = &self.spec.positional {
            if chunks.0 + chunks.1 != dc.head_dim / 2 {
                return Err(FuseError::Config(format!(
                    "mrope chunks {:?} must sum to head_dim/2 = {}",
                    chunks,
                    dc.head_dim / 2
                )));
            }
        }
        Ok(())
    }

    /// Every trainable parameter: the DiT trunk plus fusion extras. The
    /// frozen LLM is excluded.
    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.dit.params().into_iter().map(|(n, t)| (format!("dit.{n}"), t)).collect();
        for (n, t) in self.extras.params() {
            out.push((format!("dit.{n}"), t));
        }
        out
    }

    pub fn all_params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.llm.params().into_iter().map(|(n, t)| (format!("llm.{n}"), t)).collect();
        out.extend(self.trainable_params());
        out
    }

    pub fn num_trainable_params(&self) -> usize {
        self.trainable_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn build_extras<R: Rng>(
    rng: &mut R,
    spec: &FusionSpec,
    llm: &StreamConfig,
    dit: &StreamConfig,
) -> FusionExtras {
    let std = 0.02;
    let shallow = !spec.variant.is_deep();
    let adapter = shallow.then(|| ShallowAdapter {
        norm: Tensor::param(vec![1.0; llm.hidden], &[llm.hidden]).unwrap(),
        proj: Linear::new(rng, llm.hidden, dit.hidden, std, true),
    });
    let text_kv = if shallow {
        (0..dit.num_layers)
            .map(|_| {
                (
                    Linear::new(rng, dit.hidden, dit.num_kv_heads * dit.head_dim, std, false),
                    Linear::new(rng, dit.hidden, dit.num_kv_heads * dit.head_dim, std, false),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let cross = if spec.variant.is_cross() {
        (0..dit.num_layers)
            .map(|_| CrossBlock {
                norm: Tensor::param(vec![1.0; dit.hidden], &[dit.hidden]).unwrap(),
                q_proj: Linear::new(rng, dit.hidden, dit.num_heads * dit.head_dim, std, false),
                out_proj: Linear::zeros(dit.num_heads * dit.head_dim, dit.hidden, false),
            })
            .collect()
    } else {
        Vec::new()
    };
    FusionExtras { adapter, text_kv, cross }
}

// ---------------------------------------------------------------------------
// Joint mask
// ---------------------------------------------------------------------------

/// The square joint mask over [text || image]: text->text causal,
/// text->image false, image->text true at non-PAD columns, image->image
/// true.
pub fn build_joint_mask(text_len: usize, image_len: usize, pad_from: usize) -> Result<AttnMask> {
    if text_len == 0 || image_len == 0 {
        return Err(FuseError::shape(
            "joint_mask",
            format!("lengths must be >= 1, got text {text_len}, image {image_len}"),
        ));
    }
    let n = text_len + image_len;
    let mut m = AttnMask::new(n, n, vec![false; n * n])?;
    for i in 0..text_len {
        for j in 0..=i {
            m.set(i, j, true);
        }
    }
    for i in text_len..n {
        for j in 0..pad_from.min(text_len) {
            m.set(i, j, true);
        }
        for j in text_len..n {
            m.set(i, j, true);
        }
    }
    Ok(m)
}

/// Image-query rows of the joint mask: [image_len, text_len + image_len].
fn image_rows_mask(text_len: usize, image_len: usize, pad_from: usize) -> AttnMask {
    let n_k = text_len + image_len;
    let mut m = AttnMask::new(image_len, n_k, vec![false; image_len * n_k]).unwrap();
    for i in 0..image_len {
        for j in 0..pad_from.min(text_len) {
            m.set(i, j, true);
        }
        for j in text_len..n_k {
            m.set(i, j, true);
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Text context
// ---------------------------------------------------------------------------

/// Per-DiT-layer text keys/values ready for fusion; also the content of the
/// sampler's text-KV cache.
pub struct TextCtx {
    /// [n_text, Hkv, d] per DiT layer (LLM dims for deep variants, DiT dims
    /// for shallow).
    pub per_layer_k: Vec<Tensor>,
    pub per_layer_v: Vec<Tensor>,
    /// Padded text length.
    pub n_text: usize,
    /// Attendable prefix; columns at and beyond this index are masked.
    pub len: usize,
}

/// Run the text pathway of the active variant over one padded prompt.
pub fn build_text_ctx(model: &FusedModel, ids: &[usize], len: usize) -> Result<TextCtx> {
    let enc = llm_forward(&model.llm, ids, len)?;
    build_text_ctx_from_encoding(model, &enc)
}

/// Same, from an existing [`TextEncoding`] (lets the sampler reuse one LLM
/// pass for everything).
pub fn build_text_ctx_from_encoding(model: &FusedModel, enc: &TextEncoding) -> Result<TextCtx> {
    let n_text = enc.ids.len();
    let (per_layer_k, per_layer_v) = if model.spec.variant.is_deep() {
        let k = model.spec.alignment.map.iter().map(|&l| enc.per_layer_k[l].clone()).collect();
        let v = model.spec.alignment.map.iter().map(|&l| enc.per_layer_v[l].clone()).collect();
        (k, v)
    } else {
        let adapter = model
            .extras
            .adapter
            .as_ref()
            .ok_or_else(|| FuseError::Config("shallow variant missing adapter".into()))?;
        let h = rmsnorm(&enc.last_hidden, &adapter.norm)?;
        let a = adapter.proj.forward(&h)?; // [n_text, dit_hidden]
        let dc = &model.dit.config;
        let positions: Vec<usize> = (0..n_text).collect();
        let mut ks = Vec::with_capacity(model.extras.text_kv.len());
        let mut vs = Vec::with_capacity(model.extras.text_kv.len());
        for (k_proj, v_proj) in &model.extras.text_kv {
            let k = ops::reshape(&k_proj.forward(&a)?, &[n_text, dc.num_kv_heads, dc.head_dim])?;
            // Keys joining a self-attention sequence get text positions so
            // relative offsets against roped image queries are meaningful;
            // cross-attention consumes them as-is.
            let k = if model.spec.variant == FusionVariant::ShallowSelfAttn {
                rope_1d(&k, &positions, ROPE_BASE)?
            } else {
                k
            };
            let v = ops::reshape(&v_proj.forward(&a)?, &[n_text, dc.num_kv_heads, dc.head_dim])?;
            ks.push(k);
            vs.push(v);
        }
        (ks, vs)
    };
    Ok(TextCtx {
        per_layer_k,
        per_layer_v,
        n_text,
        len: enc.len,
    })
}

// ---------------------------------------------------------------------------
// Fused forward
// ---------------------------------------------------------------------------

/// Image-token rotary per the active scheme. 1D schemes continue after the
/// padded text; 2D schemes use the token's grid coordinates.
fn rope_image(
    scheme: &PositionalScheme,
    x: &Tensor,
    n_text: usize,
    grid: &[(usize, usize)],
) -> Result<Tensor> {
    match scheme {
        PositionalScheme::Rope1dPlusApe | PositionalScheme::Rope1d => {
            let positions: Vec<usize> = (0..grid.len()).map(|i| n_text + i).collect();
            rope_1d(x, &positions, ROPE_BASE)
        }
        PositionalScheme::Rope1dPlus2d => rope_2d(x, grid, ROPE_BASE),
        PositionalScheme::MRope { chunks } => mrope(x, grid, *chunks, ROPE_BASE),
    }
}

/// Velocity prediction in token space: [n_img, p*p*c]. `text: None` runs the
/// image stream unconditioned (no text columns at all).
pub fn forward_velocity_tokens(
    model: &FusedModel,
    text: Option<&TextCtx>,
    noisy: &LatentImage,
    t: f64,
) -> Result<Tensor> {
    let dit = &model.dit;
    let dc = &dit.config;
    if noisy.channels != dit.channels {
        return Err(FuseError::shape(
            "forward_velocity",
            format!("latent has {} channels, model expects {}", noisy.channels, dit.channels),
        ));
    }
    if let Some(ctx) = text {
        if ctx.per_layer_k.len() != dc.num_layers {
            return Err(FuseError::Config(format!(
                "text context has {} layers, DiT has {}",
                ctx.per_layer_k.len(),
                dc.num_layers
            )));
        }
    }
    let (rows, cols) = token_grid(noisy.height, noisy.width, dit.patch)?;
    let n_img = rows * cols;
    let grid = grid_positions(noisy.height, noisy.width, dit.patch)?;

    let raw = patchify(&noisy.data, dit.channels, noisy.height, noisy.width, dit.patch)?;
    let mut x = dit.in_proj.forward(&raw)?;
    if model.spec.positional.uses_ape() {
        x = ops::add(&x, &ape_2d(rows, cols, dc.hidden)?)?;
    }

    let t_emb = match &dit.t_embedder {
        Some(emb) => Some(emb.forward(t)?),
        None => None,
    };
    if dit.cond.kind() == ConditioningKind::Addition {
        if let Some(te) = &t_emb {
            x = ops::add(&x, te)?;
        }
    }

    let (n_text, text_len) = match text {
        Some(ctx) => (ctx.n_text, ctx.len),
        None => (0, 0),
    };
    let self_mask = if model.spec.variant.is_cross() || text.is_none() {
        AttnMask::all_true(n_img, n_img)
    } else {
        image_rows_mask(n_text, n_img, text_len)
    };
    // Cross-attention over text only; PAD columns masked.
    let cross_mask = text.map(|ctx| {
        let mut m = AttnMask::new(n_img, ctx.n_text, vec![false; n_img * ctx.n_text]).unwrap();
        for i in 0..n_img {
            for j in 0..ctx.len.min(ctx.n_text) {
                m.set(i, j, true);
            }
        }
        m
    });

    for (l, layer) in dit.layers.iter().enumerate() {
        let mods = dit.cond.layer_modulation(t_emb.as_ref(), l, dc.hidden)?;

        // self-attention branch
        let mut h = rmsnorm(&x, &layer.attn_norm)?;
        if let Some(m) = &mods {
            h = modulate(&h, &m.shift_attn, &m.scale_attn)?;
        }
        let q = ops::reshape(&layer.attn.q_proj.forward(&h)?, &[n_img, dc.num_heads, dc.head_dim])?;
        let k = ops::reshape(&layer.attn.k_proj.forward(&h)?, &[n_img, dc.num_kv_heads, dc.head_dim])?;
        let v = ops::reshape(&layer.attn.v_proj.forward(&h)?, &[n_img, dc.num_kv_heads, dc.head_dim])?;
        let q = qk_normalize(&q, &layer.attn.q_gains)?;
        let k = qk_normalize(&k, &layer.attn.k_gains)?;
        let q = rope_image(&model.spec.positional, &q, n_text, &grid)?;
        let k = rope_image(&model.spec.positional, &k, n_text, &grid)?;

        let attn_out = match text {
            Some(ctx) if !model.spec.variant.is_cross() => {
                let k_all = ops::concat(&[&ctx.per_layer_k[l], &k], 0)?;
                let v_all = ops::concat(&[&ctx.per_layer_v[l], &v], 0)?;
                attention(&q, &k_all, &v_all, &self_mask)?
            }
            _ => attention(&q, &k, &v, &self_mask)?,
        };
        let attn_out = layer.attn.o_proj.forward(&attn_out)?;
        x = match &mods {
            Some(m) => ops::add(&x, &ops::mul(&attn_out, &m.gate_attn)?)?,
            None => ops::add(&x, &attn_out)?,
        };

        // cross-attention branch
        if model.spec.variant.is_cross() {
            if let Some(ctx) = text {
                let cb = &model.extras.cross[l];
                let hc = rmsnorm(&x, &cb.norm)?;
                let qc =
                    ops::reshape(&cb.q_proj.forward(&hc)?, &[n_img, dc.num_heads, dc.head_dim])?;
                let co = attention(
                    &qc,
                    &ctx.per_layer_k[l],
                    &ctx.per_layer_v[l],
                    cross_mask.as_ref().unwrap(),
                )?;
                let co = cb.out_proj.forward(&co)?;
                x = ops::add(&x, &co)?;
            }
        }

        // FFN branch
        let mut h2 = rmsnorm(&x, &layer.ffn_norm)?;
        if let Some(m) = &mods {
            h2 = modulate(&h2, &m.shift_ffn, &m.scale_ffn)?;
        }
        let f = geglu_ffn(&h2, &layer.ffn)?;
        x = match &mods {
            Some(m) => ops::add(&x, &ops::mul(&f, &m.gate_ffn)?)?,
            None => ops::add(&x, &f)?,
        };
    }

    let mut y = rmsnorm(&x, &dit.out_norm)?;
    if let Some((shift, scale)) = dit.cond.final_modulation(t_emb.as_ref(), dc.hidden)? {
        y = modulate(&y, &shift, &scale)?;
    }
    dit.out_proj.forward(&y)
}

/// Velocity prediction as a latent image.
pub fn forward_velocity(
    model: &FusedModel,
    text: Option<&TextCtx>,
    noisy: &LatentImage,
    t: f64,
) -> Result<LatentImage> {
    let tokens = forward_velocity_tokens(model, text, noisy, t)?;
    let data = unpatchify(&tokens, noisy.channels, noisy.height, noisy.width, model.dit.patch)?;
    LatentImage::new(noisy.channels, noisy.height, noisy.width, data)
}
