//! Training stages.
//!
//! * stage 0: text-conditioned base diffusion model (`unet/`);
//! * stage 1: LR preprocessor and cognitive adapter (`preprocessor/`,
//!   `adapter/`) against caption supervision targets;
//! * stage 2: control encoder, AiA attention and null embedding
//!   (`control/`, `aia/`, `null/`) on top of the frozen stage-0 and
//!   stage-1 weights.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::cognitive_loss;
use crate::checkpoint::CheckpointArchive;
use crate::config::{RunConfig, StageSchedule};
use crate::diffusion::{denoise_loss, encode_latent, sample, NoiseSchedule, SampleOptions};
use crate::error::{arg_err, Error, Result};
use crate::imaging::bicubic_upscale4;
use crate::model::{
    caption_targets, drop_context, text_encoder, BaseModel, CognitiveEncoder, SrModel,
};
use crate::params::ParamStore;
use crate::toy::Dataset;

pub const BASE_PREFIXES: [&str; 1] = ["unet/"];
pub const COGNITIVE_PREFIXES: [&str; 2] = ["adapter/", "preprocessor/"];
pub const SR_PREFIXES: [&str; 4] = ["aia/", "control/", "null/", "unet/"];

/// A trained stage: its parameters, archive and per-step losses.
pub struct StageOutcome {
    pub store: ParamStore,
    pub archive: CheckpointArchive,
    pub losses: Vec<f64>,
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(AdamW::new(vars, params)?)
}

fn scalar(loss: &Tensor, step: usize) -> Result<f64> {
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("loss is {v} at step {step}")));
    }
    Ok(v)
}

fn check_schedule(s: &StageSchedule) -> Result<()> {
    if s.steps == 0 || s.batch_size == 0 {
        return Err(arg_err!(
            "training needs at least one step and one sample per batch"
        ));
    }
    Ok(())
}

fn draw_indices(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

fn index_tensor(idx: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), &Device::Cpu)?)
}

fn log_progress(stage: u8, step: usize, steps: usize, loss: f64, every: usize) {
    if every > 0 && (step % every == 0 || step + 1 == steps) {
        log::info!("stage {stage} step {step}/{steps} loss {loss:.5}");
    }
}

/// Write one `step,loss` line per step.
pub fn write_loss_log(path: &Path, losses: &[f64]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "step,loss").map_err(|e| Error::io(path, e))?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{i},{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Run `f` over `n` items in chunks and concatenate the results on dim 0.
fn chunked(
    n: usize,
    chunk: usize,
    mut f: impl FnMut(&[usize]) -> Result<Tensor>,
) -> Result<Tensor> {
    let idx: Vec<usize> = (0..n).collect();
    let parts = idx.chunks(chunk).map(&mut f).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// HR latents of every sample, (N,48,H/4,W/4).
pub fn hr_latents(data: &Dataset) -> Result<Tensor> {
    chunked(data.len(), 64, |idx| {
        let (hr, _, _) = data.batch(idx)?;
        Ok(encode_latent(&hr)?.data)
    })
}

/// Latents of the bicubically upscaled LR images, the LR condition.
pub fn lr_latents(data: &Dataset) -> Result<Tensor> {
    chunked(data.len(), 64, |idx| {
        let (_, lr, _) = data.batch(idx)?;
        Ok(encode_latent(&bicubic_upscale4(&lr)?)?.data)
    })
}

fn all_targets(data: &Dataset, cfg: &RunConfig) -> Result<Tensor> {
    data.require_captions()?;
    let text = text_encoder(cfg)?;
    let captions: Vec<Vec<u32>> = data.samples.iter().map(|s| s.tokens.clone()).collect();
    caption_targets(&text, &captions, cfg, DType::F32)
}

/// Stage 0: conditional diffusion on HR latents with caption supervision
/// targets as context; the context is replaced by the learned null
/// embedding with probability `cond_dropout`.
pub fn train_base(cfg: &RunConfig, data: &Dataset) -> Result<StageOutcome> {
    let sched = cfg.base_schedule();
    check_schedule(&sched)?;
    if data.is_empty() {
        return Err(arg_err!("empty training set"));
    }
    let store = ParamStore::new(cfg.seed, DType::F32);
    let model = BaseModel::new(&store, cfg)?;
    let noise = cfg.noise_schedule()?;
    let z_all = hr_latents(data)?;
    let ctx_all = all_targets(data, cfg)?;
    let mut opt = adam(store.trainable_vars(), sched.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB45E);
    let mut losses = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let idx = draw_indices(&mut rng, data.len(), sched.batch_size);
        let it = index_tensor(&idx)?;
        let z0 = z_all.index_select(&it, 0)?;
        let keep: Vec<bool> = idx
            .iter()
            .map(|_| rng.random::<f64>() >= cfg.cond_dropout)
            .collect();
        let ctx = drop_context(&ctx_all.index_select(&it, 0)?, &model.null, &keep)?;
        let t: Vec<usize> = idx
            .iter()
            .map(|_| rng.random_range(0..cfg.num_train_timesteps))
            .collect();
        let loss = denoise_loss(&model, &noise, &z0, &t, &ctx, &mut rng)?;
        let v = scalar(&loss, step)?;
        opt.backward_step(&loss)?;
        log_progress(0, step, sched.steps, v, cfg.log_every);
        losses.push(v);
    }
    let archive = CheckpointArchive::from_store(&store, &BASE_PREFIXES, cfg.to_toml())?;
    Ok(StageOutcome {
        store,
        archive,
        losses,
    })
}

/// Stage 1: preprocessor and adapter trained with the cognitive loss.
pub fn train_cognitive(cfg: &RunConfig, data: &Dataset) -> Result<StageOutcome> {
    let sched = cfg.cognitive_schedule();
    check_schedule(&sched)?;
    if data.is_empty() {
        return Err(arg_err!("empty training set"));
    }
    let store = ParamStore::new(cfg.seed, DType::F32);
    let enc = CognitiveEncoder::new(&store, cfg)?;
    let targets = all_targets(data, cfg)?;
    let lr_all = Tensor::stack(&data.samples.iter().map(|s| &s.lr).collect::<Vec<_>>(), 0)?;
    let mut opt = adam(store.trainable_vars(), sched.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC061);
    let mut losses = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let idx = index_tensor(&draw_indices(&mut rng, data.len(), sched.batch_size))?;
        let e = enc.embed(&lr_all.index_select(&idx, 0)?)?;
        let loss = cognitive_loss(&e, &targets.index_select(&idx, 0)?)?;
        let v = scalar(&loss, step)?;
        opt.backward_step(&loss)?;
        log_progress(1, step, sched.steps, v, cfg.log_every);
        losses.push(v);
    }
    let archive = CheckpointArchive::from_store(&store, &COGNITIVE_PREFIXES, cfg.to_toml())?;
    Ok(StageOutcome {
        store,
        archive,
        losses,
    })
}

/// Cognitive embeddings of every sample, (N,T_e,C_l), without gradients.
pub fn embed_all(enc: &CognitiveEncoder, data: &Dataset) -> Result<Tensor> {
    chunked(data.len(), 64, |idx| {
        let (_, lr, _) = data.batch(idx)?;
        Ok(enc.embed(&lr)?.data.detach())
    })
}

/// Horizontal mirror of (B,C,H,W) images.
pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let w = x.dim(3)?;
    let rev: Vec<u32> = (0..w as u32).rev().collect();
    Ok(x.index_select(&Tensor::from_vec(rev, w, x.device())?, 3)?)
}

/// Where the reference latent of a stage-2 batch comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceSource {
    None,
    /// Mirrored ground truth.
    GroundTruth,
    /// Pre-generated by the base model from the sample's cognitive embedding.
    Generated,
}

/// Everything stage 2 needs besides the data: loaded stage-0 and stage-1
/// parameters plus the frozen/trainable split.
pub struct SrTrainer {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub model: SrModel,
    pub cognitive: CognitiveEncoder,
    noise: NoiseSchedule,
    z_all: Tensor,
    lr_all: Tensor,
    e_all: Tensor,
    pool: Option<Tensor>,
    opt: AdamW,
    rng: ChaCha8Rng,
    frozen_digest: String,
    pub losses: Vec<f64>,
}

impl SrTrainer {
    pub fn new(
        cfg: &RunConfig,
        data: &Dataset,
        base: &CheckpointArchive,
        cognitive: &CheckpointArchive,
    ) -> Result<Self> {
        let sched = cfg.sr_schedule();
        check_schedule(&sched)?;
        if data.is_empty() {
            return Err(arg_err!("empty training set"));
        }
        for (archive, prefix) in [(base, "unet/"), (cognitive, "adapter/")] {
            if !archive.tensors.keys().any(|k| k.starts_with(prefix)) {
                return Err(Error::Archive(format!("archive holds no {prefix} tensors")));
            }
        }
        let store = ParamStore::new(cfg.seed, DType::F32);
        base.load_into(&store)?;
        cognitive.load_into(&store)?;
        for prefix in ["unet/", "adapter/", "preprocessor/"] {
            store.set_trainable(prefix, false);
        }
        let cog = CognitiveEncoder::new(&store, cfg)?;
        let model = SrModel::new(&store, cfg)?;
        let frozen_digest = store.frozen_digest()?;
        let opt = adam(store.trainable_vars(), sched.lr)?;
        Ok(Self {
            cfg: cfg.clone(),
            noise: cfg.noise_schedule()?,
            z_all: hr_latents(data)?,
            lr_all: lr_latents(data)?,
            e_all: embed_all(&cog, data)?,
            pool: None,
            opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5252),
            frozen_digest,
            store,
            model,
            cognitive: cog,
            losses: Vec::new(),
        })
    }

    /// Pre-generate references for the first `ref_pool` samples from their
    /// cognitive embeddings with the frozen base model.
    pub fn generate_pool(&mut self) -> Result<()> {
        let n = self.cfg.ref_pool.min(self.z_all.dim(0)?);
        if n == 0 {
            return Ok(());
        }
        let (_, c, h, w) = self.z_all.dims4()?;
        let base = &self.model.base;
        let mut parts = Vec::new();
        for (k, start) in (0..n).step_by(32).enumerate() {
            let len = 32.min(n - start);
            let e = self.e_all.narrow(0, start, len)?;
            let opts = SampleOptions {
                num_steps: self.cfg.sample_steps,
                guidance_scale: self.cfg.guidance_scale,
                seed: self.cfg.seed ^ 0x9001 ^ k as u64,
            };
            let null = base.null_context(len)?;
            let z = sample(base, &self.noise, &e, Some(&null), (len, c, h, w), &opts)?;
            parts.push(z.data.detach());
        }
        self.pool = Some(Tensor::cat(&parts, 0)?);
        Ok(())
    }

    pub fn frozen_unchanged(&self) -> Result<bool> {
        Ok(self.store.frozen_digest()? == self.frozen_digest)
    }

    /// One optimization step; returns the loss.
    pub fn step(&mut self) -> Result<f64> {
        let sched = self.cfg.sr_schedule();
        let n = self.z_all.dim(0)?;
        let pool_len = self
            .pool
            .as_ref()
            .map(|p| p.dim(0))
            .transpose()?
            .unwrap_or(0);
        let source = if self.rng.random::<f64>() < self.cfg.ref_prob {
            if pool_len > 0 && self.rng.random::<f64>() < 0.5 {
                ReferenceSource::Generated
            } else {
                ReferenceSource::GroundTruth
            }
        } else {
            ReferenceSource::None
        };
        let range = if source == ReferenceSource::Generated {
            pool_len
        } else {
            n
        };
        let idx = draw_indices(&mut self.rng, range, sched.batch_size);
        let it = index_tensor(&idx)?;
        let z0 = self.z_all.index_select(&it, 0)?;
        let refs = match source {
            ReferenceSource::None => Vec::new(),
            ReferenceSource::GroundTruth => vec![flip_horizontal(&z0)?],
            ReferenceSource::Generated => {
                vec![self
                    .pool
                    .as_ref()
                    .expect("pool exists")
                    .index_select(&it, 0)?]
            }
        };
        let keep: Vec<bool> = idx
            .iter()
            .map(|_| self.rng.random::<f64>() >= self.cfg.cond_dropout)
            .collect();
        let ctx = drop_context(&self.e_all.index_select(&it, 0)?, &self.model.null, &keep)?;
        let t: Vec<usize> = idx
            .iter()
            .map(|_| self.rng.random_range(0..self.cfg.num_train_timesteps))
            .collect();
        let den = self
            .model
            .conditioned(&self.lr_all.index_select(&it, 0)?, &refs);
        let loss = denoise_loss(&den, &self.noise, &z0, &t, &ctx, &mut self.rng)?;
        let step = self.losses.len();
        let v = scalar(&loss, step)?;
        self.opt.backward_step(&loss)?;
        log_progress(2, step, sched.steps, v, self.cfg.log_every);
        self.losses.push(v);
        Ok(v)
    }

    /// Snapshot the SR parameters; fails if any frozen tensor moved.
    pub fn archive(&self) -> Result<CheckpointArchive> {
        if !self.frozen_unchanged()? {
            return Err(Error::Archive(
                "frozen parameters changed during training".into(),
            ));
        }
        CheckpointArchive::from_store(&self.store, &SR_PREFIXES, self.cfg.to_toml())
    }
}

/// Stage 2: build the trainer, pre-generate the reference pool and run the
/// configured number of steps.
pub fn train_sr(
    cfg: &RunConfig,
    data: &Dataset,
    base: &CheckpointArchive,
    cognitive: &CheckpointArchive,
) -> Result<StageOutcome> {
    let mut trainer = SrTrainer::new(cfg, data, base, cognitive)?;
    if cfg.ref_prob > 0.0 {
        trainer.generate_pool()?;
    }
    for _ in 0..cfg.sr_schedule().steps {
        trainer.step()?;
    }
    let archive = trainer.archive()?;
    Ok(StageOutcome {
        store: trainer.store,
        archive,
        losses: trainer.losses,
    })
}
