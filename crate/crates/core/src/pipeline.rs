//! Inference: LR image to HR image through the cognitive encoder, reference
//! generation, the control encoder and guided sampling.

use candle_core::{DType, Tensor};

use crate::adapter::CognitiveEmbedding;
use crate::checkpoint::CheckpointArchive;
use crate::config::RunConfig;
use crate::diffusion::{
    decode_latent, encode_latent, sample, LatentImage, NoiseSchedule, SampleOptions,
};
use crate::error::{dim_err, Error, Result};
use crate::imaging::bicubic_upscale4;
use crate::model::{CognitiveEncoder, SrModel};
use crate::params::ParamStore;
use crate::reference::generate_reference;

/// Seed offset separating the SR sampler's noise from the references'.
const SR_SEED_SALT: u64 = 0x5EED_0000;

/// Ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SrFlags {
    /// Skip reference generation; only the LR control is used.
    pub no_reference: bool,
    /// Replace the cognitive embedding by the null embeddings everywhere.
    pub no_cognition: bool,
}

pub struct SrOutput {
    /// (B,3,4h,4w) in [0,1].
    pub hr: Tensor,
    /// One latent per reference, each batched like the input.
    pub references: Vec<LatentImage>,
    /// `None` in no-cognition mode.
    pub embedding: Option<CognitiveEmbedding>,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub cognitive: CognitiveEncoder,
    pub model: SrModel,
    pub schedule: NoiseSchedule,
}

impl Pipeline {
    /// Assemble from a stage-1 archive (cognitive encoder) and a stage-2
    /// archive (base U-Net plus SR parameters).
    pub fn load(
        cfg: &RunConfig,
        cognitive: &CheckpointArchive,
        sr: &CheckpointArchive,
    ) -> Result<Self> {
        for (archive, prefix) in [(cognitive, "adapter/"), (sr, "control/"), (sr, "unet/")] {
            if !archive.tensors.keys().any(|k| k.starts_with(prefix)) {
                return Err(Error::Archive(format!("archive holds no {prefix} tensors")));
            }
        }
        let store = ParamStore::new(cfg.seed, DType::F32);
        cognitive.load_into(&store)?;
        sr.load_into(&store)?;
        let before = store.num_params("");
        let cog = CognitiveEncoder::new(&store, cfg)?;
        let model = SrModel::new(&store, cfg)?;
        if store.num_params("") != before {
            return Err(Error::Archive(
                "archives do not cover the configured model".into(),
            ));
        }
        Ok(Self {
            cfg: cfg.clone(),
            schedule: cfg.noise_schedule()?,
            store,
            cognitive: cog,
            model,
        })
    }

    fn options(&self, seed: u64) -> SampleOptions {
        SampleOptions {
            num_steps: self.cfg.sample_steps,
            guidance_scale: self.cfg.guidance_scale,
            seed,
        }
    }

    /// Super-resolve a batch of LR images (B,3,h,w); h and w must be
    /// multiples of 8 so the latent fits the U-Net's three downsamplings.
    pub fn super_resolve(&self, lr: &Tensor, flags: SrFlags, seed: u64) -> Result<SrOutput> {
        let (b, c, h, w) = lr.dims4()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(dim_err!(
                "LR input must be RGB with sides divisible by 8, got {c}x{h}x{w}"
            ));
        }
        let embedding = if flags.no_cognition {
            None
        } else {
            Some(self.cognitive.embed(lr)?.detach())
        };
        let base = &self.model.base;
        let references = if flags.no_reference {
            Vec::new()
        } else {
            let e = match &embedding {
                Some(e) => e.clone(),
                None => CognitiveEmbedding::new(base.null_context(b)?)?,
            };
            generate_reference(
                base,
                &self.schedule,
                &e,
                self.cfg.n_refs,
                (h, w),
                &self.options(seed),
            )?
        };
        let lr_latent = encode_latent(&bicubic_upscale4(lr)?)?.data;
        let ref_data: Vec<Tensor> = references.iter().map(|r| r.data.clone()).collect();
        let den = self.model.conditioned(&lr_latent, &ref_data);
        let uncond = self.model.null_context(b)?;
        let context = match &embedding {
            Some(e) => e.data.clone(),
            None => uncond.clone(),
        };
        let shape = (b, lr_latent.dim(1)?, h, w);
        let z = sample(
            &den,
            &self.schedule,
            &context,
            Some(&uncond),
            shape,
            &self.options(seed ^ SR_SEED_SALT),
        )?;
        Ok(SrOutput {
            hr: decode_latent(&z)?.clamp(0.0, 1.0)?,
            references,
            embedding,
        })
    }
}
