//! Euler ODE sampling with classifier-free guidance.
//!
//! The text pathway is run exactly twice per prompt (conditional + empty
//! prompt) and cached; every sampling step reuses the cached per-layer K/V.
//! Sampling can read either the live weights or the EMA shadows.

use std::io::Write;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::dit::LatentImage;
use crate::error::{FuseError, Result};
use crate::flow::TrainState;
use crate::fusion::{build_text_ctx, forward_velocity, FusedModel, TextCtx};
use crate::llm::tokenize;
use crate::tensor::{ops, Tensor};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub use_ema: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 25,
            guidance_scale: 6.0,
            seed: 0,
            use_ema: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(FuseError::Config("sampler needs at least 1 step".into()));
        }
        if self.guidance_scale < 0.0 {
            return Err(FuseError::Config("guidance scale must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Frozen text conditioning for one prompt: conditional branch plus the
/// empty-prompt branch used by CFG. Built once, reused at every step.
pub struct TextKvCache {
    pub cond: TextCtx,
    pub uncond: TextCtx,
}

/// Run the text pathway once for the prompt and once for the empty prompt.
pub fn build_text_kv_cache(model: &FusedModel, prompt: &str, max_len: usize) -> Result<TextKvCache> {
    let (ids, len) = tokenize(prompt, max_len);
    let (empty_ids, empty_len) = tokenize("", max_len);
    Ok(TextKvCache {
        cond: build_text_ctx(model, &ids, len)?,
        uncond: build_text_ctx(model, &empty_ids, empty_len)?,
    })
}

/// v_uncond + s * (v_cond - v_uncond).
pub fn cfg_combine(v_uncond: &Tensor, v_cond: &Tensor, s: f64) -> Result<Tensor> {
    let diff = ops::sub(v_cond, v_uncond)?;
    ops::add(v_uncond, &ops::mul_scalar(&diff, s)?)
}

/// Standard-normal initial latent from a seed.
pub fn sample_noise(seed: u64, channels: usize, height: usize, width: usize) -> LatentImage {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..channels * height * width)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    LatentImage::new(channels, height, width, Tensor::from_vec(data, &[channels, height, width]).unwrap())
        .unwrap()
}

/// Euler integration of dz/dt = velocity(z, t) from t=0 to t=1 on the
/// uniform grid t_k = k/steps. Returns the unclamped final state.
pub fn euler_integrate<F>(mut velocity: F, z0: &LatentImage, steps: usize) -> Result<LatentImage>
where
    F: FnMut(&LatentImage, f64) -> Result<LatentImage>,
{
    if steps < 1 {
        return Err(FuseError::Config("sampler needs at least 1 step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z0.data.clone();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let state = LatentImage::new(z0.channels, z0.height, z0.width, z.clone())?;
        let v = velocity(&state, t)?;
        z = ops::add(&z, &ops::mul_scalar(&v.data, dt)?)?;
        if z.to_vec().iter().any(|x| !x.is_finite()) {
            return Err(FuseError::NonFinite {
                context: format!("euler_sample at step {k} (t = {t})"),
            });
        }
    }
    LatentImage::new(z0.channels, z0.height, z0.width, z)
}

/// Swap the EMA shadows into the live parameter tensors; restores the live
/// values on drop.
pub struct EmaSwapGuard {
    params: Vec<Tensor>,
    saved: Vec<Vec<f64>>,
}

impl EmaSwapGuard {
    pub fn swap_in(model: &FusedModel, state: &TrainState) -> Result<EmaSwapGuard> {
        if !state.matches(model) {
            return Err(FuseError::Config("EMA state does not match model parameters".into()));
        }
        let params: Vec<Tensor> = model.trainable_params().into_iter().map(|(_, t)| t).collect();
        let saved: Vec<Vec<f64>> = params.iter().map(|t| t.to_vec()).collect();
        for (p, shadow) in params.iter().zip(&state.ema) {
            p.set_data(shadow);
        }
        Ok(EmaSwapGuard { params, saved })
    }
}

impl Drop for EmaSwapGuard {
    fn drop(&mut self) {
        for (p, saved) in self.params.iter().zip(&self.saved) {
            p.set_data(saved);
        }
    }
}

/// Full guided sampling loop: z0 from the config seed, CFG at every step
/// using the cached text K/V, output clamped to [-1, 1].
pub fn euler_sample(
    model: &FusedModel,
    cache: &TextKvCache,
    config: &SamplerConfig,
    state: Option<&TrainState>,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<LatentImage> {
    config.validate()?;
    let _guard = match (config.use_ema, state) {
        (true, Some(st)) => Some(EmaSwapGuard::swap_in(model, st)?),
        _ => None,
    };
    let z0 = sample_noise(config.seed, channels, height, width);
    let s = config.guidance_scale;
    let out = euler_integrate(
        |z, t| {
            let v_c = forward_velocity(model, Some(&cache.cond), z, t)?;
            let v_u = forward_velocity(model, Some(&cache.uncond), z, t)?;
            let v = cfg_combine(&v_u.data, &v_c.data, s)?;
            LatentImage::new(z.channels, z.height, z.width, v)
        },
        &z0,
        config.steps,
    )?;
    let clamped: Vec<f64> = out.data.to_vec().iter().map(|x| x.clamp(-1.0, 1.0)).collect();
    LatentImage::new(channels, height, width, Tensor::from_vec(clamped, &[channels, height, width])?)
}

/// Binary PPM (P6, max 255) mapping [-1, 1] linearly to [0, 255].
/// 1-channel latents are written as gray; 3-channel as RGB.
pub fn write_ppm<W: Write>(out: &mut W, latent: &LatentImage) -> Result<()> {
    if latent.channels != 1 && latent.channels != 3 {
        return Err(FuseError::Config(format!(
            "PPM output needs 1 or 3 channels, got {}",
            latent.channels
        )));
    }
    writeln!(out, "P6\n{} {}\n255", latent.width, latent.height)?;
    let data = latent.data.to_vec();
    let plane = latent.height * latent.width;
    let to_byte = |v: f64| ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8;
    for p in 0..plane {
        for ch in 0..3 {
            let c = if latent.channels == 1 { 0 } else { ch };
            out.write_all(&[to_byte(data[c * plane + p])])?;
        }
    }
    Ok(())
}
