//! Model assembly: the cognitive encoder, the base diffusion model and the
//! super-resolution model built on top of it.
//!
//! Parameter namespaces: `preprocessor/`, `adapter/` (stage 1), `unet/`
//! (stage 0, frozen afterwards), `control/`, `aia/`, `null/` (stage 2).

use candle_core::{DType, Tensor};

use crate::adapter::{supervision_target, CognitiveAdapter, CognitiveEmbedding};
use crate::config::RunConfig;
use crate::control::{share_check, ControlEncoder, ControlPaths, ControlPyramid, ControlSource};
use crate::diffusion::Denoiser;
use crate::embedding::{ImageEmbedder, ToyImageEncoder, ToyTextEncoder};
use crate::error::{dim_err, Result};
use crate::params::{Init, ParamStore};
use crate::preprocessor::LrPreprocessor;
use crate::unet::{UNet, UNetState};

/// Seeds of the fixed stand-in encoders. They play the role of frozen
/// pre-trained networks and therefore do not follow the run seed.
pub const IMAGE_ENCODER_SEED: u64 = 0x1A6E;
pub const TEXT_ENCODER_SEED: u64 = 0x7E47;

pub fn image_encoder(cfg: &RunConfig) -> Result<ToyImageEncoder> {
    ToyImageEncoder::new(IMAGE_ENCODER_SEED, cfg.patch_size, cfg.image_dim)
}

pub fn text_encoder(cfg: &RunConfig) -> Result<ToyTextEncoder> {
    ToyTextEncoder::new(TEXT_ENCODER_SEED, cfg.vocab_size, cfg.text_dim)
}

/// Supervision targets L' for a batch of captions.
pub fn caption_targets(
    text: &ToyTextEncoder,
    captions: &[Vec<u32>],
    cfg: &RunConfig,
    dtype: DType,
) -> Result<Tensor> {
    let enc = text.encode_batch(captions, cfg.text_len, dtype)?;
    supervision_target(&enc, cfg.t_e)
}

/// LR preprocessor, frozen image encoder and cognitive adapter.
#[derive(Clone, Debug)]
pub struct CognitiveEncoder {
    pub preprocessor: LrPreprocessor,
    pub image_encoder: ToyImageEncoder,
    pub adapter: CognitiveAdapter,
}

impl CognitiveEncoder {
    pub fn new(store: &ParamStore, cfg: &RunConfig) -> Result<Self> {
        let root = store.root();
        Ok(Self {
            preprocessor: LrPreprocessor::new(&root.pp("preprocessor"), cfg.preprocessor())?,
            image_encoder: image_encoder(cfg)?,
            adapter: CognitiveAdapter::new(&root.pp("adapter"), cfg.adapter())?,
        })
    }

    /// E for a batch of LR images (B,3,h,w).
    pub fn embed(&self, lr: &Tensor) -> Result<CognitiveEmbedding> {
        let restored = self.preprocessor.forward(lr)?;
        self.adapter
            .forward(&self.image_encoder.encode_image(&restored)?)
    }
}

/// Broadcast a (T_e, C_l) embedding over a batch.
pub fn batch_context(null: &Tensor, b: usize) -> Result<Tensor> {
    let (t, c) = null.dims2()?;
    Ok(null.unsqueeze(0)?.broadcast_as((b, t, c))?.contiguous()?)
}

/// Replace the context of samples whose `keep` flag is 0 by `null`.
pub fn drop_context(context: &Tensor, null: &Tensor, keep: &[bool]) -> Result<Tensor> {
    let (b, _, _) = context.dims3()?;
    if keep.len() != b {
        return Err(dim_err!("{} dropout flags for batch {b}", keep.len()));
    }
    let m: Vec<f32> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    let m = Tensor::from_vec(m, (b, 1, 1), context.device())?.to_dtype(context.dtype())?;
    let nulls = batch_context(null, b)?;
    Ok((context.broadcast_mul(&m)? + nulls.broadcast_mul(&(1.0 - m)?)?)?)
}

/// The stage-0 text-conditioned diffusion model standing in for the frozen
/// generative prior. Its null embedding lives at `unet/null`.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub unet: UNet,
    pub null: Tensor,
}

impl BaseModel {
    pub fn new(store: &ParamStore, cfg: &RunConfig) -> Result<Self> {
        let pb = store.root().pp("unet");
        Ok(Self {
            unet: UNet::new(&pb, &cfg.unet())?,
            null: pb.get("null", &[cfg.t_e, cfg.text_dim], Init::Zeros)?,
        })
    }

    pub fn null_context(&self, b: usize) -> Result<Tensor> {
        batch_context(&self.null, b)
    }
}

impl Denoiser for BaseModel {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], context: &Tensor) -> Result<Tensor> {
        let cfg = self.unet.config();
        let state = UNetState::new(z_t.clone(), t.to_vec(), cfg.num_train_timesteps)?;
        self.unet.forward(&state, context, None, &[])
    }
}

/// Base model extended with AiA blocks, a shared control encoder and its
/// own null embedding (`null/embedding`, initialized from the base one).
#[derive(Clone, Debug)]
pub struct SrModel {
    pub base: BaseModel,
    pub controls: ControlPaths,
    pub null: Tensor,
}

impl SrModel {
    /// Builds on the base parameters already present in `store` (loaded
    /// from a stage-0 archive, or freshly initialized).
    pub fn new(store: &ParamStore, cfg: &RunConfig) -> Result<Self> {
        let mut base = BaseModel::new(store, cfg)?;
        let root = store.root();
        base.unet.attach_aia(&root.pp("aia"))?;
        let control = ControlEncoder::new(&root.pp("control"), &cfg.unet(), "unet")?;
        let null =
            root.pp("null")
                .get("embedding", base.null.dims(), Init::Copy(base.null.clone()))?;
        let model = Self {
            base,
            controls: ControlPaths::shared(control),
            null,
        };
        debug_assert!(share_check(&model.controls));
        Ok(model)
    }

    pub fn null_context(&self, b: usize) -> Result<Tensor> {
        batch_context(&self.null, b)
    }

    /// Bind the LR and reference latents of one batch into a denoiser.
    pub fn conditioned<'a>(&'a self, lr_latent: &Tensor, refs: &[Tensor]) -> SrDenoiser<'a> {
        SrDenoiser {
            model: self,
            lr_latent: lr_latent.clone(),
            refs: refs.to_vec(),
        }
    }
}

/// The SR model with its spatial conditions fixed; the cognitive context
/// stays a per-call argument so guidance can swap it for the null one.
pub struct SrDenoiser<'a> {
    model: &'a SrModel,
    lr_latent: Tensor,
    refs: Vec<Tensor>,
}

impl SrDenoiser<'_> {
    pub fn pyramids(
        &self,
        z_t: &Tensor,
        t: &[usize],
        context: &Tensor,
    ) -> Result<(ControlPyramid, Vec<ControlPyramid>)> {
        let paths = &self.model.controls;
        let lr = paths
            .lr
            .encode(&self.lr_latent, z_t, context, t, ControlSource::Lr)?;
        let refs = self
            .refs
            .iter()
            .map(|r| {
                paths
                    .reference
                    .encode(r, z_t, context, t, ControlSource::Reference)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((lr, refs))
    }
}

impl Denoiser for SrDenoiser<'_> {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], context: &Tensor) -> Result<Tensor> {
        let unet = &self.model.base.unet;
        let state = UNetState::new(z_t.clone(), t.to_vec(), unet.config().num_train_timesteps)?;
        let (lr, refs) = self.pyramids(z_t, t, context)?;
        unet.forward(&state, context, Some(&lr), &refs)
    }
}
