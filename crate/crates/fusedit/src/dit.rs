//! The trainable image stream: patch embedding, transformer trunk
//! parameters, and the zero-initialized velocity head.
//!
//! The actual block-by-block forward lives in [`crate::fusion`], because
//! every attention call mixes in text conditioning; this module owns the
//! parameters and the (un)patchification layout.

use rand::Rng;

use crate::error::{FuseError, Result};
use crate::llm::StreamConfig;
use crate::nn::{
    AttentionParams, Conditioning, ConditioningKind, FfnParams, Linear, TimestepEmbedder,
};
use crate::tensor::Tensor;

/// A latent image: [channels, height, width], row-major.
#[derive(Clone, Debug)]
pub struct LatentImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Tensor,
}

impl LatentImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Tensor) -> Result<LatentImage> {
        if data.shape() != [channels, height, width] {
            return Err(FuseError::shape(
                "latent_image",
                format!("expected [{channels}, {height}, {width}], got {:?}", data.shape()),
            ));
        }
        Ok(LatentImage { channels, height, width, data })
    }
}

/// Tokens per side and total for a given image/patch size.
pub fn token_grid(height: usize, width: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(FuseError::shape(
            "patchify",
            format!("{height}x{width} image not divisible by patch {patch}"),
        ));
    }
    Ok((height / patch, width / patch))
}

/// Grid coordinates (row, col) of each image token, in token order.
pub fn grid_positions(height: usize, width: usize, patch: usize) -> Result<Vec<(usize, usize)>> {
    let (rows, cols) = token_grid(height, width, patch)?;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push((r, c));
        }
    }
    Ok(out)
}

/// [c, h, w] -> [n_tokens, p*p*c]. Token t = row-major patch index; within a
/// token, channel index = (py*p + px)*c + ch.
pub fn patchify(x: &Tensor, channels: usize, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    if x.shape() != [channels, height, width] {
        return Err(FuseError::shape(
            "patchify",
            format!("expected [{channels}, {height}, {width}], got {:?}", x.shape()),
        ));
    }
    let (rows, cols) = token_grid(height, width, patch)?;
    let src = x.to_vec();
    let tok_dim = patch * patch * channels;
    let mut out = vec![0.0; rows * cols * tok_dim];
    for pr in 0..rows {
        for pc in 0..cols {
            let t = pr * cols + pc;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..channels {
                        let sy = pr * patch + py;
                        let sx = pc * patch + px;
                        out[t * tok_dim + (py * patch + px) * channels + ch] =
                            src[ch * height * width + sy * width + sx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(out, &[rows * cols, tok_dim])
}

/// Inverse of [`patchify`]. Pure index shuffle; no autodiff is recorded, so
/// compute losses in token space and only unpatchify for output.
pub fn unpatchify(tokens: &Tensor, channels: usize, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    let (rows, cols) = token_grid(height, width, patch)?;
    let tok_dim = patch * patch * channels;
    if tokens.shape() != [rows * cols, tok_dim] {
        return Err(FuseError::shape(
            "unpatchify",
            format!("expected [{}, {}], got {:?}", rows * cols, tok_dim, tokens.shape()),
        ));
    }
    let src = tokens.to_vec();
    let mut out = vec![0.0; channels * height * width];
    for pr in 0..rows {
        for pc in 0..cols {
            let t = pr * cols + pc;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..channels {
                        let sy = pr * patch + py;
                        let sx = pc * patch + px;
                        out[ch * height * width + sy * width + sx] =
                            src[t * tok_dim + (py * patch + px) * channels + ch];
                    }
                }
            }
        }
    }
    Tensor::from_vec(out, &[channels, height, width])
}

pub struct DitLayer {
    pub attn_norm: Tensor,
    pub attn: AttentionParams,
    pub ffn_norm: Tensor,
    pub ffn: FfnParams,
}

pub struct DitParams {
    pub config: StreamConfig,
    pub patch: usize,
    pub channels: usize,
    /// p*p*c -> hidden
    pub in_proj: Linear,
    pub layers: Vec<DitLayer>,
    pub out_norm: Tensor,
    /// hidden -> p*p*c, zero-initialized so the model predicts zero velocity
    /// at step 0.
    pub out_proj: Linear,
    pub cond: Conditioning,
    /// Present unless conditioning is `None`.
    pub t_embedder: Option<TimestepEmbedder>,
}

impl DitParams {
    pub fn new<R: Rng>(
        rng: &mut R,
        config: StreamConfig,
        patch: usize,
        channels: usize,
        cond_kind: ConditioningKind,
        freq_dim: usize,
    ) -> Result<DitParams> {
        config.validate()?;
        let std = 0.02;
        let h = config.hidden;
        let tok_dim = patch * patch * channels;
        let layers = (0..config.num_layers)
            .map(|_| DitLayer {
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
        let t_embedder = match cond_kind {
            ConditioningKind::None => None,
            _ => Some(TimestepEmbedder::new(rng, freq_dim, h, std)),
        };
        Ok(DitParams {
            config: config.clone(),
            patch,
            channels,
            in_proj: Linear::new(rng, tok_dim, h, std, true),
            layers,
            out_norm: Tensor::param(vec![1.0; h], &[h])?,
            out_proj: Linear::zeros(h, tok_dim, true),
            cond: Conditioning::new(cond_kind, config.num_layers, h),
            t_embedder,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, t) in self.in_proj.params() {
            out.push((format!("in_proj.{name}"), t));
        }
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
        out.push(("out_norm".to_string(), self.out_norm.clone()));
        for (name, t) in self.out_proj.params() {
            out.push((format!("out_proj.{name}"), t));
        }
        for (name, t) in self.cond.params() {
            out.push((name, t));
        }
        if let Some(emb) = &self.t_embedder {
            for (name, t) in emb.params() {
                out.push((format!("t_embedder.{name}"), t));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patchify_matches_index_oracle() {
        let (c, h, w, p) = (3, 4, 6, 2);
        let data: Vec<f64> = (0..c * h * w).map(|i| i as f64).collect();
        let x = Tensor::from_vec(data.clone(), &[c, h, w]).unwrap();
        let tokens = patchify(&x, c, h, w, p).unwrap();
        assert_eq!(tokens.shape(), vec![(h / p) * (w / p), p * p * c]);
        let td = tokens.to_vec();
        // independent index walk
        for t in 0..(h / p) * (w / p) {
            let (pr, pc) = (t / (w / p), t % (w / p));
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        let want = data[ch * h * w + (pr * p + py) * w + (pc * p + px)];
                        let got = td[t * p * p * c + (py * p + px) * c + ch];
                        assert_eq!(got, want, "token {t} py {py} px {px} ch {ch}");
                    }
                }
            }
        }
    }

    #[test]
    fn patchify_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::Rng as _;
        let (c, h, w, p) = (3, 8, 8, 2);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.random::<f64>()).collect();
        let x = Tensor::from_vec(data.clone(), &[c, h, w]).unwrap();
        let back = unpatchify(&patchify(&x, c, h, w, p).unwrap(), c, h, w, p).unwrap();
        assert_eq!(back.to_vec(), data);
    }

    #[test]
    fn patchify_rejects_misaligned() {
        let x = Tensor::zeros(&[3, 5, 6]);
        assert!(patchify(&x, 3, 5, 6, 2).is_err());
        assert!(token_grid(5, 6, 0).is_err());
    }

    #[test]
    fn grid_positions_row_major() {
        let g = grid_positions(4, 6, 2).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], (0, 0));
        assert_eq!(g[2], (0, 2));
        assert_eq!(g[3], (1, 0));
    }

    #[test]
    fn out_head_zero_initialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = StreamConfig {
            num_layers: 2,
            hidden: 16,
            num_heads: 2,
            num_kv_heads: 1,
            head_dim: 8,
            ffn_dim: 32,
            vocab_size: crate::llm::VOCAB,
            embedding_scale: 1.0,
        };
        let dit = DitParams::new(&mut rng, cfg, 2, 3, ConditioningKind::AdaLnZero, 8).unwrap();
        assert!(dit.out_proj.w.to_vec().iter().all(|&v| v == 0.0));
        assert!(dit.out_proj.b.as_ref().unwrap().to_vec().iter().all(|&v| v == 0.0));
        // all parameters trainable, uniquely named
        let params = dit.params();
        assert!(params.iter().all(|(_, t)| t.requires_grad()));
        let mut names: Vec<&String> = params.iter().map(|(n, _)| n).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(before, names.len());
    }

    #[test]
    fn none_conditioning_has_no_timestep_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = StreamConfig {
            num_layers: 2,
            hidden: 16,
            num_heads: 2,
            num_kv_heads: 1,
            head_dim: 8,
            ffn_dim: 32,
            vocab_size: crate::llm::VOCAB,
            embedding_scale: 1.0,
        };
        let none = DitParams::new(&mut rng, cfg.clone(), 2, 3, ConditioningKind::None, 8).unwrap();
        assert!(none.t_embedder.is_none());
        let add = DitParams::new(&mut rng, cfg, 2, 3, ConditioningKind::Addition, 8).unwrap();
        let emb = add.t_embedder.as_ref().unwrap();
        assert_eq!(add.num_params(), none.num_params() + emb.num_params());
    }
}
