//! ControlNet-style control encoder: a copy of the U-Net encoder wrapped in
//! zero convolutions, shared between the LR image and the references.

use std::sync::Arc;

use candle_core::Tensor;

use crate::error::{dim_err, Result};
use crate::nn::Conv2d;
use crate::params::ParamBuilder;
use crate::unet::{check_latent, Encoder, TransformerBlock, UNetConfig, UNetState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlSource {
    Lr,
    Reference,
}

/// Four control feature maps, finest first; each scale halves the
/// spatial size of the previous one.
#[derive(Clone, Debug)]
pub struct ControlPyramid {
    pub features: Vec<Tensor>,
    pub source: ControlSource,
}

impl ControlPyramid {
    pub fn new(features: Vec<Tensor>, source: ControlSource) -> Result<Self> {
        if features.len() != 4 {
            return Err(dim_err!(
                "control pyramid needs 4 scales, got {}",
                features.len()
            ));
        }
        for pair in features.windows(2) {
            let (_, _, h0, w0) = pair[0].dims4()?;
            let (_, _, h1, w1) = pair[1].dims4()?;
            if h1 != h0.div_ceil(2) || w1 != w0.div_ceil(2) {
                return Err(dim_err!(
                    "control scales {h0}x{w0} -> {h1}x{w1} do not halve"
                ));
            }
        }
        Ok(Self { features, source })
    }

    pub fn spatial_dims(&self) -> Vec<(usize, usize)> {
        self.features
            .iter()
            .map(|f| {
                let d = f.dims();
                (d[2], d[3])
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ControlEncoder {
    cfg: UNetConfig,
    zero_in: Conv2d,
    encoder: Encoder,
    mid_attn: TransformerBlock,
    zero_out: Vec<Conv2d>,
}

impl ControlEncoder {
    /// Builds the encoder under `pb` (usually `control/`), copying every
    /// parameter that also exists under `copy_prefix` (usually `unet`).
    pub fn new(pb: &ParamBuilder, cfg: &UNetConfig, copy_prefix: &str) -> Result<Self> {
        let mirror = pb.copy_from(copy_prefix);
        let c = cfg.latent_channels;
        let zero_out = cfg
            .scale_channels()
            .iter()
            .enumerate()
            .map(|(i, &ch)| Conv2d::zeros(&pb.pp("zero_out").pp(i), ch, ch))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            zero_in: Conv2d::zeros(&pb.pp("zero_in"), c, cfg.channels[0])?,
            encoder: Encoder::new(&mirror, cfg)?,
            mid_attn: TransformerBlock::new(&mirror.pp("mid").pp("attn"), cfg, cfg.channels[2])?,
            zero_out,
        })
    }

    /// Control features for a clean condition latent and the noisy latent
    /// `z_t` at timestep `t`, cross-attending to `context` at every
    /// attention block.
    pub fn encode(
        &self,
        latent: &Tensor,
        z_t: &Tensor,
        context: &Tensor,
        t: &[usize],
        source: ControlSource,
    ) -> Result<ControlPyramid> {
        check_latent(&self.cfg, latent)?;
        if latent.dims() != z_t.dims() {
            return Err(dim_err!(
                "condition {:?} vs noisy latent {:?}",
                latent.dims(),
                z_t.dims()
            ));
        }
        let state = UNetState::new(z_t.clone(), t.to_vec(), self.cfg.num_train_timesteps)?;
        let temb = self.encoder.time.forward(&state.t, z_t.dtype())?;
        // The zero-convolved condition joins the input-conv output of z_t.
        let cond = self.zero_in.forward(latent)?;
        let enc = self
            .encoder
            .forward(&state.z, &temb, context, Some(&cond))?;
        let mid = self.mid_attn.forward(&enc.mid, context, None)?;
        let taps = [&enc.levels[0], &enc.levels[1], &enc.levels[2], &mid];
        let features = taps
            .iter()
            .zip(&self.zero_out)
            .map(|(h, zc)| zc.forward(h))
            .collect::<Result<Vec<_>>>()?;
        ControlPyramid::new(features, source)
    }

    /// Every parameter tensor held by this encoder.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        out.push(self.zero_in.weight.clone());
        out.push(self.zero_in.bias.clone());
        for z in &self.zero_out {
            out.push(z.weight.clone());
            out.push(z.bias.clone());
        }
        out.extend(self.encoder.tensors());
        out.extend(self.mid_attn.tensors());
        out
    }
}

/// The control encoders used by the LR path and the reference path.
#[derive(Clone, Debug)]
pub struct ControlPaths {
    pub lr: Arc<ControlEncoder>,
    pub reference: Arc<ControlEncoder>,
}

impl ControlPaths {
    pub fn shared(encoder: ControlEncoder) -> Self {
        let enc = Arc::new(encoder);
        Self {
            lr: enc.clone(),
            reference: enc,
        }
    }
}

/// True when both paths reference one and the same parameter set.
pub fn share_check(paths: &ControlPaths) -> bool {
    let a = paths.lr.tensors();
    let b = paths.reference.tensors();
    a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.id() == y.id())
}
