//! DDPM machinery: noise schedule, forward process, epsilon-prediction loss,
//! classifier-free guidance, ancestral sampling and the latent codec.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg_err, dim_err, Result};
use crate::nn::{depth_to_space, space_to_depth};

/// Spatial block folded into channels by the codec.
pub const CODEC_BLOCK: usize = 4;
/// Latent channels: 3 colours times a 4x4 block.
pub const LATENT_CHANNELS: usize = 3 * CODEC_BLOCK * CODEC_BLOCK;
/// Power-of-two gain applied by the codec, exact in both directions. Toy
/// images (mostly dark background) then have latent std close to 1.
const CODEC_GAIN: f64 = 4.0;

/// Diffusion working representation, (B, 48, H/4, W/4).
#[derive(Clone, Debug)]
pub struct LatentImage {
    pub data: Tensor,
}

impl LatentImage {
    /// Latent values of black and white pixels.
    pub const RANGE: (f64, f64) = (0.0, CODEC_GAIN);

    pub fn dims(&self) -> &[usize] {
        self.data.dims()
    }
}

/// Space-to-depth of 4x4 blocks followed by a power-of-two gain. Because
/// the gain is a power of two, decode(encode(x)) and encode(decode(z)) are
/// both bitwise identities.
pub fn encode_latent(image: &Tensor) -> Result<LatentImage> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(dim_err!("expected 3 channels, got {c}"));
    }
    if h % CODEC_BLOCK != 0 || w % CODEC_BLOCK != 0 {
        return Err(dim_err!("{h}x{w} not divisible by {CODEC_BLOCK}"));
    }
    Ok(LatentImage {
        data: (space_to_depth(image, CODEC_BLOCK)? * CODEC_GAIN)?,
    })
}

pub fn decode_latent(latent: &LatentImage) -> Result<Tensor> {
    let (_, c, _, _) = latent.data.dims4()?;
    if c != LATENT_CHANNELS {
        return Err(dim_err!(
            "latent must have {LATENT_CHANNELS} channels, got {c}"
        ));
    }
    depth_to_space(&(&latent.data * (1.0 / CODEC_GAIN))?, CODEC_BLOCK)
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(num_train_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_train_timesteps < 2 {
            return Err(arg_err!("need at least 2 train timesteps"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(arg_err!("betas must satisfy 0 < start <= end < 1"));
        }
        let n = num_train_timesteps;
        let betas: Vec<f64> = (0..n)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    pub fn num_train_timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.num_train_timesteps() {
            return Err(arg_err!(
                "timestep {t} outside [0, {})",
                self.num_train_timesteps()
            ));
        }
        Ok(())
    }

    /// Evenly spaced inference timesteps from T-1 down to 0.
    pub fn inference_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        let n = self.num_train_timesteps();
        if num_steps == 0 || num_steps > n {
            return Err(arg_err!("sampling steps {num_steps} outside [1, {n}]"));
        }
        if num_steps == 1 {
            return Ok(vec![n - 1]);
        }
        Ok((0..num_steps)
            .rev()
            .map(|i| i * (n - 1) / (num_steps - 1))
            .collect())
    }
}

fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let b = values.len();
    Ok(Tensor::from_vec(values.to_vec(), (b, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with one timestep per sample.
pub fn q_sample(
    schedule: &NoiseSchedule,
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(dim_err!("z0 {:?} vs eps {:?}", z0.dims(), eps.dims()));
    }
    if t.len() != z0.dim(0)? {
        return Err(dim_err!("{} timesteps for batch {}", t.len(), z0.dim(0)?));
    }
    for &ti in t {
        schedule.check(ti)?;
    }
    let a: Vec<f64> = t
        .iter()
        .map(|&i| schedule.alphas_cumprod[i].sqrt())
        .collect();
    let s: Vec<f64> = t
        .iter()
        .map(|&i| (1.0 - schedule.alphas_cumprod[i]).sqrt())
        .collect();
    Ok((z0.broadcast_mul(&per_sample(&a, z0)?)? + eps.broadcast_mul(&per_sample(&s, eps)?)?)?)
}

/// A noise-prediction network. `context` is the cognitive conditioning
/// (B, T_e, C_l); every other condition is owned by the implementor.
pub trait Denoiser {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], context: &Tensor) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, &[usize], &Tensor) -> Result<Tensor>,
{
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], context: &Tensor) -> Result<Tensor> {
        self(z_t, t, context)
    }
}

/// Standard-normal tensor drawn from a seeded generator.
pub fn randn_like(rng: &mut ChaCha8Rng, dims: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Epsilon-prediction MSE at the given timesteps.
pub fn denoise_loss<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    t: &[usize],
    context: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let eps = randn_like(rng, z0.dims(), z0.dtype())?;
    let z_t = q_sample(schedule, z0, t, &eps)?;
    let pred = model.predict_noise(&z_t, t, context)?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// eps_uncond + s * (eps_cond - eps_uncond); s = 0 and s = 1 return the
/// corresponding prediction bit for bit.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_cond.dims() != eps_uncond.dims() {
        return Err(dim_err!(
            "guidance shapes {:?} vs {:?}",
            eps_cond.dims(),
            eps_uncond.dims()
        ));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * scale)?)?)
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

/// Ancestral DDPM sampling over an evenly strided timestep subset.
///
/// With `uncond` set, every step runs the model twice and combines the
/// predictions with [`cfg_combine`]; with `uncond = None` it runs the
/// conditional branch only.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    context: &Tensor,
    uncond: Option<&Tensor>,
    shape: (usize, usize, usize, usize),
    opts: &SampleOptions,
) -> Result<LatentImage> {
    let steps = schedule.inference_timesteps(opts.num_steps)?;
    let (b, c, h, w) = shape;
    if context.dim(0)? != b {
        return Err(dim_err!(
            "context batch {} vs sample batch {b}",
            context.dim(0)?
        ));
    }
    let dtype = context.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x = randn_like(&mut rng, &[b, c, h, w], dtype)?;
    let (lo, hi) = LatentImage::RANGE;
    for (i, &t) in steps.iter().enumerate() {
        let tb = vec![t; b];
        // Sampling is never differentiated; detaching keeps the autograd
        // graph of trainable weights from growing across steps.
        let eps_c = model.predict_noise(&x, &tb, context)?.detach();
        let eps = match uncond {
            Some(u) => {
                let eps_u = model.predict_noise(&x, &tb, u)?.detach();
                cfg_combine(&eps_c, &eps_u, opts.guidance_scale)?
            }
            None => eps_c,
        };
        if eps.dims() != x.dims() {
            return Err(dim_err!(
                "model output {:?} vs latent {:?}",
                eps.dims(),
                x.dims()
            ));
        }
        let ab_t = schedule.alphas_cumprod[t];
        let prev = steps.get(i + 1).copied();
        let ab_prev = prev.map(|p| schedule.alphas_cumprod[p]).unwrap_or(1.0);
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;
        let x0 = ((&x - (&eps * (1.0 - ab_t).sqrt())?)? * (1.0 / ab_t.sqrt()))?.clamp(lo, hi)?;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let mean = ((x0 * c0)? + (&x * ct)?)?;
        x = if prev.is_some() {
            let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
            let noise = randn_like(&mut rng, &[b, c, h, w], dtype)?;
            (mean + (noise * var.sqrt())?)?
        } else {
            mean
        };
    }
    Ok(LatentImage { data: x })
}
