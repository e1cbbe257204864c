//! Denoising U-Net with All-in-Attention (AiA) blocks in the middle and
//! decoder.
//!
//! Layout for a latent of spatial size r (r divisible by 8):
//!
//! ```text
//! encoder  L1 r    res + attn     -> skip, X_1 scale
//!          L2 r/2  res + attn     -> skip, X_2 scale
//!          L3 r/4  res + attn     -> skip, X_3 scale
//!          L4 r/8  res            -> skip
//! middle      r/8  res + AiA(X_4)
//! decoder  D  r/8  res
//!          C  r/4  res + AiA(X_3)
//!          B  r/2  res + AiA(X_2)
//!          A  r    res + AiA(X_1)
//! ```
//!
//! The base weights live under `unet/`. The AiA additions (LR attention and
//! one-hot reference attention) live under `aia/` so they can be trained
//! while the base stays frozen.

use candle_core::{DType, Tensor, D};

use crate::control::ControlPyramid;
use crate::error::{arg_err, dim_err, Result};
use crate::nn::{
    from_tokens, multi_head_attention, position_encoding_2d, timestep_features, to_tokens,
    Attention, Conv2d, FeedForward, GroupNorm, LayerNorm, Linear,
};
use crate::params::ParamBuilder;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    /// Widths of the three attention resolutions, finest first.
    pub channels: [usize; 3],
    pub context_dim: usize,
    pub groups: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub num_train_timesteps: usize,
}

impl UNetConfig {
    pub fn toy(context_dim: usize) -> Self {
        Self {
            latent_channels: crate::diffusion::LATENT_CHANNELS,
            channels: [32, 64, 64],
            context_dim,
            groups: 8,
            heads: 1,
            time_dim: 128,
            num_train_timesteps: 1000,
        }
    }

    /// Channel width of control scale i (0-based, finest first).
    pub fn scale_channels(&self) -> [usize; 4] {
        let [a, b, c] = self.channels;
        [a, b, c, c]
    }
}

/// Noisy latent plus its timestep, one per batch element.
#[derive(Clone, Debug)]
pub struct UNetState {
    pub z: Tensor,
    pub t: Vec<usize>,
}

impl UNetState {
    pub fn new(z: Tensor, t: Vec<usize>, num_train_timesteps: usize) -> Result<Self> {
        let b = z.dims4()?.0;
        if t.len() != b {
            return Err(dim_err!("{} timesteps for batch {b}", t.len()));
        }
        if let Some(bad) = t.iter().find(|&&ti| ti >= num_train_timesteps) {
            return Err(arg_err!(
                "timestep {bad} outside [0, {num_train_timesteps})"
            ));
        }
        Ok(Self { z, t })
    }
}

#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    feat_dim: usize,
    lin1: Linear,
    lin2: Linear,
}

impl TimeEmbedding {
    pub fn tensors(&self) -> Vec<Tensor> {
        [self.lin1.tensors(), self.lin2.tensors()].concat()
    }

    pub fn new(pb: &ParamBuilder, feat_dim: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            feat_dim,
            lin1: Linear::new(&pb.pp("lin1"), feat_dim, dim)?,
            lin2: Linear::new(&pb.pp("lin2"), dim, dim)?,
        })
    }

    pub fn forward(&self, t: &[usize], dtype: DType) -> Result<Tensor> {
        let f = timestep_features(t, self.feat_dim, dtype)?;
        self.lin2.forward(&self.lin1.forward(&f)?.silu()?)
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = [
            self.norm1.tensors(),
            self.conv1.tensors(),
            self.temb.tensors(),
            self.norm2.tensors(),
            self.conv2.tensors(),
        ]
        .concat();
        if let Some(s) = &self.skip {
            out.extend(s.tensors());
        }
        out
    }

    pub fn new(pb: &ParamBuilder, cfg: &UNetConfig, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&pb.pp("norm1"), cfg.groups, cin)?,
            conv1: Conv2d::new(&pb.pp("conv1"), cin, cout, 3, 1, 1)?,
            temb: Linear::new(&pb.pp("temb"), cfg.time_dim, cout)?,
            norm2: GroupNorm::new(&pb.pp("norm2"), cfg.groups, cout)?,
            conv2: Conv2d::new(&pb.pp("conv2"), cout, cout, 3, 1, 1)?,
            skip: if cin == cout {
                None
            } else {
                Some(Conv2d::new(&pb.pp("skip"), cin, cout, 1, 1, 0)?)
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let (b, c, _, _) = h.dims4()?;
        let t = self.temb.forward(&temb.silu()?)?.reshape((b, c, 1, 1))?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Softmax attention from U-Net tokens to LR control tokens, gated by the
/// zero-initialized output projection `attn.o` and added residually:
/// `z + o(softmax((q(zq) + g p) (k(x) + g p)^T / sqrt(d)) v(x + p))`
/// with `g = LR_POS_GAIN`.
///
/// `zq` is the (normalized) query input; the residual is taken on `z`.
/// `pos` holds position codes shared by the query and key grids and
/// requires both to have the same token count. Added after the projections
/// they make each query favour its own grid cell from the start, so the
/// LR detail arrives in place instead of as a global average. Feeding them
/// to the values too matters for training: the control taps start at zero,
/// so `v(x)` alone would leave both `o` and the taps without gradient.
/// Scale of the position codes added to LR-attention queries and keys.
pub const LR_POS_GAIN: f64 = 4.0;

pub fn lr_attention(
    z: &Tensor,
    zq: &Tensor,
    x: &Tensor,
    attn: &Attention,
    pos: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, tz, c) = z.dims3()?;
    let (bx, tx, _) = x.dims3()?;
    if zq.dims() != z.dims() || bx != b {
        return Err(dim_err!(
            "lr attention shapes z {:?} zq {:?} x {:?}",
            z.dims(),
            zq.dims(),
            x.dims()
        ));
    }
    let mut q = attn.q.forward(zq)?;
    let mut k = attn.k.forward(x)?;
    let v = match pos {
        Some(p) => {
            if tx != tz || p.dims() != [tz, c] {
                return Err(dim_err!(
                    "position codes {:?} need aligned {tz}-token grids of width {c}, x has {tx}",
                    p.dims()
                ));
            }
            let gp = (p * LR_POS_GAIN)?;
            q = q.broadcast_add(&gp)?;
            k = k.broadcast_add(&gp)?;
            attn.v.forward(&x.broadcast_add(p)?)?
        }
        None => attn.v.forward(x)?,
    };
    let out = attn
        .o
        .forward(&multi_head_attention(&q, &k, &v, attn.heads)?)?;
    Ok((z + out)?)
}

/// Pre-projection one-hot attention: each query selects its single most
/// cosine-similar key (lowest index on ties) and returns that value row
/// scaled by the similarity. No softmax.
pub fn one_hot_select(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (b, tx, c) = q.dims3()?;
    let (bk, tr, ck) = k.dims3()?;
    if bk != b || ck != c || v.dims3()? != (b, tr, c) || tr == 0 {
        return Err(dim_err!(
            "one-hot attention shapes q {:?} k {:?} v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        ));
    }
    let unit = |x: &Tensor| -> Result<Tensor> {
        // Clamping the squared norm keeps zero-norm tokens at similarity 0
        // with a finite gradient.
        let n = x
            .sqr()?
            .sum_keepdim(D::Minus1)?
            .clamp(1e-24, f64::MAX)?
            .sqrt()?;
        Ok(x.broadcast_div(&n)?)
    };
    let s = unit(q)?.matmul(&unit(k)?.t()?)?.clamp(-1.0, 1.0)?;
    let t = s.max_keepdim(D::Minus1)?;
    let dtype = q.dtype();
    let idx = Tensor::arange(0u32, tr as u32, q.device())?.to_dtype(dtype)?;
    let idx = idx.reshape((1, 1, tr))?.broadcast_as((b, tx, tr))?;
    let none = Tensor::full(tr as f64, (b, tx, tr), q.device())?.to_dtype(dtype)?;
    let hit = s.detach().broadcast_eq(&t.detach())?;
    let first = hit.where_cond(&idx, &none)?.min_keepdim(D::Minus1)?;
    let h = idx.broadcast_eq(&first)?.to_dtype(dtype)?;
    Ok(h.matmul(v)?.broadcast_mul(&t)?)
}

/// `zero_conv((H V) * T)` with H the one-hot argmax of cosine similarity
/// and T the per-query maximum similarity.
pub fn one_hot_reference_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    zero_conv: &Linear,
) -> Result<Tensor> {
    zero_conv.forward(&one_hot_select(q, k, v)?)
}

/// The trainable additions that turn a plain transformer block into an
/// AiA block. Projections start as copies of the block's self-attention.
#[derive(Clone, Debug)]
pub struct AiaExtension {
    pub lr_norm: LayerNorm,
    pub lr: Attention,
    pub reference: Attention,
}

impl AiaExtension {
    fn new(pb: &ParamBuilder, base: &TransformerBlock) -> Result<Self> {
        let copy = |p: ParamBuilder| -> Result<Attention> {
            Ok(Attention {
                q: Linear::copy_of(&p.pp("q"), &base.self_attn.q)?,
                k: Linear::copy_of(&p.pp("k"), &base.self_attn.k)?,
                v: Linear::copy_of(&p.pp("v"), &base.self_attn.v)?,
                o: Linear::zeros(&p.pp("zero_out"), base.dim, base.dim)?,
                heads: base.self_attn.heads,
            })
        };
        Ok(Self {
            lr_norm: LayerNorm::copy_of(&pb.pp("lr_norm"), &base.norm1)?,
            lr: copy(pb.pp("lr"))?,
            reference: copy(pb.pp("ref"))?,
        })
    }

    /// LR attention then one-hot reference attention, both residual on `z`.
    pub fn forward(
        &self,
        z: &Tensor,
        x: Option<&Tensor>,
        refs: &[Tensor],
        h: usize,
        w: usize,
    ) -> Result<Tensor> {
        let Some(x) = x else {
            if refs.is_empty() {
                return Ok(z.clone());
            }
            return Err(arg_err!(
                "reference attention needs LR control as its query"
            ));
        };
        let (b, _, c) = z.dims3()?;
        if x.dims4()? != (b, c, h, w) {
            return Err(dim_err!(
                "LR control {:?} does not match U-Net scale ({b},{c},{h},{w})",
                x.dims()
            ));
        }
        let xt = to_tokens(x)?;
        // One full 2-D code per head.
        let heads = self.lr.heads;
        let code = position_encoding_2d(h, w, c / heads, z.dtype())?;
        let pos = Tensor::cat(&vec![&code; heads], 1)?;
        let zq = self.lr_norm.forward(z)?;
        let mut z = lr_attention(z, &zq, &xt, &self.lr, Some(&pos))?;
        if !refs.is_empty() {
            let mut toks = Vec::with_capacity(refs.len());
            for r in refs {
                let (rb, rc, _, _) = r.dims4()?;
                if rb != b || rc != c {
                    return Err(dim_err!(
                        "reference control {:?} vs LR ({b},{c},..)",
                        r.dims()
                    ));
                }
                toks.push(to_tokens(r)?);
            }
            let rt = Tensor::cat(&toks, 1)?;
            let att = &self.reference;
            let out = one_hot_reference_attention(
                &att.q.forward(&xt)?,
                &att.k.forward(&rt)?,
                &att.v.forward(&rt)?,
                &att.o,
            )?;
            z = (z + out)?;
        }
        Ok(z)
    }
}

/// Conditions for one AiA invocation.
pub struct AiaInputs<'a> {
    pub ext: &'a AiaExtension,
    pub x: Option<&'a Tensor>,
    pub refs: &'a [Tensor],
}

/// Spatial transformer: self-attention, cross-attention over the cognitive
/// embedding and a feed-forward layer, optionally extended to AiA.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    dim: usize,
    norm: GroupNorm,
    proj_in: Linear,
    norm1: LayerNorm,
    pub self_attn: Attention,
    norm2: LayerNorm,
    pub cross_attn: Attention,
    norm3: LayerNorm,
    ff: FeedForward,
    proj_out: Linear,
}

impl TransformerBlock {
    pub fn tensors(&self) -> Vec<Tensor> {
        [
            self.norm.tensors(),
            self.proj_in.tensors(),
            self.norm1.tensors(),
            self.self_attn.tensors(),
            self.norm2.tensors(),
            self.cross_attn.tensors(),
            self.norm3.tensors(),
            self.ff.tensors(),
            self.proj_out.tensors(),
        ]
        .concat()
    }

    pub fn new(pb: &ParamBuilder, cfg: &UNetConfig, dim: usize) -> Result<Self> {
        Ok(Self {
            dim,
            norm: GroupNorm::new(&pb.pp("norm"), cfg.groups, dim)?,
            proj_in: Linear::new(&pb.pp("proj_in"), dim, dim)?,
            norm1: LayerNorm::new(&pb.pp("norm1"), dim)?,
            self_attn: Attention::new(&pb.pp("self"), dim, dim, cfg.heads)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), dim)?,
            cross_attn: Attention::new(&pb.pp("cross"), dim, cfg.context_dim, cfg.heads)?,
            norm3: LayerNorm::new(&pb.pp("norm3"), dim)?,
            ff: FeedForward::new(&pb.pp("ff"), dim, 4)?,
            proj_out: Linear::new(&pb.pp("proj_out"), dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor, aia: Option<AiaInputs>) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let t = self.proj_in.forward(&to_tokens(&self.norm.forward(x)?)?)?;
        let n = self.norm1.forward(&t)?;
        let t = (&t + self.self_attn.forward(&n, &n)?)?;
        let t = (&t + self.cross_attn.forward(&self.norm2.forward(&t)?, context)?)?;
        let t = match aia {
            Some(a) => a.ext.forward(&t, a.x, a.refs, h, w)?,
            None => t,
        };
        let t = (&t + self.ff.forward(&self.norm3.forward(&t)?)?)?;
        let out = from_tokens(&self.proj_out.forward(&t)?, h, w)?;
        Ok((out + x)?)
    }
}

/// Encoder half shared by the U-Net and the control encoder: time
/// embedding, input conv, four levels and the middle residual block.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub time: TimeEmbedding,
    conv_in: Conv2d,
    res: Vec<ResBlock>,
    attn: Vec<TransformerBlock>,
    down: Vec<Conv2d>,
    mid_res: ResBlock,
}

/// Encoder activations: the four level outputs (finest first) and the
/// middle residual output.
pub struct EncoderOutput {
    pub levels: Vec<Tensor>,
    pub mid: Tensor,
}

impl Encoder {
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = [self.time.tensors(), self.conv_in.tensors()].concat();
        for r in &self.res {
            out.extend(r.tensors());
        }
        for a in &self.attn {
            out.extend(a.tensors());
        }
        for d in &self.down {
            out.extend(d.tensors());
        }
        out.extend(self.mid_res.tensors());
        out
    }

    pub fn new(pb: &ParamBuilder, cfg: &UNetConfig) -> Result<Self> {
        let [c1, c2, c3] = cfg.channels;
        let widths = [(c1, c1), (c1, c2), (c2, c3), (c3, c3)];
        let mut res = Vec::new();
        let mut attn = Vec::new();
        let mut down = Vec::new();
        for (i, &(cin, cout)) in widths.iter().enumerate() {
            let p = pb.pp("enc").pp(i);
            res.push(ResBlock::new(&p.pp("res"), cfg, cin, cout)?);
            if i < 3 {
                attn.push(TransformerBlock::new(&p.pp("attn"), cfg, cout)?);
                down.push(Conv2d::new(&p.pp("down"), cout, cout, 3, 2, 1)?);
            }
        }
        Ok(Self {
            time: TimeEmbedding::new(&pb.pp("time"), c1, cfg.time_dim)?,
            conv_in: Conv2d::new(&pb.pp("conv_in"), cfg.latent_channels, c1, 3, 1, 1)?,
            res,
            attn,
            down,
            mid_res: ResBlock::new(&pb.pp("mid").pp("res"), cfg, c3, c3)?,
        })
    }

    /// Runs everything up to (not including) the middle attention. `h0` is
    /// added to the input-conv output when given.
    pub fn forward(
        &self,
        z: &Tensor,
        temb: &Tensor,
        context: &Tensor,
        extra_in: Option<&Tensor>,
    ) -> Result<EncoderOutput> {
        let mut h = self.conv_in.forward(z)?;
        if let Some(e) = extra_in {
            h = (h + e)?;
        }
        let mut levels = Vec::with_capacity(4);
        for i in 0..4 {
            if i > 0 {
                h = self.down[i - 1].forward(&h)?;
            }
            h = self.res[i].forward(&h, temb)?;
            if i < 3 {
                h = self.attn[i].forward(&h, context, None)?;
            }
            levels.push(h.clone());
        }
        let mid = self.mid_res.forward(&h, temb)?;
        Ok(EncoderOutput { levels, mid })
    }
}

pub(crate) fn check_latent(cfg: &UNetConfig, z: &Tensor) -> Result<()> {
    let (_, c, h, w) = z.dims4()?;
    if c != cfg.latent_channels {
        return Err(dim_err!(
            "latent has {c} channels, expected {}",
            cfg.latent_channels
        ));
    }
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(dim_err!(
            "latent spatial dims {h}x{w} must be divisible by 8"
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    pub encoder: Encoder,
    mid_attn: TransformerBlock,
    dec_res: Vec<ResBlock>,
    dec_attn: Vec<TransformerBlock>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
    aia: Option<Vec<AiaExtension>>,
}

impl UNet {
    /// Base U-Net under `pb` (usually `unet/`), without AiA additions.
    pub fn new(pb: &ParamBuilder, cfg: &UNetConfig) -> Result<Self> {
        let [c1, c2, c3] = cfg.channels;
        // Decoder D, C, B, A: (input, skip, output) widths.
        let widths = [(c3, c3, c3), (c3, c3, c3), (c3, c2, c2), (c2, c1, c1)];
        let mut dec_res = Vec::new();
        let mut dec_attn = Vec::new();
        for (i, &(cin, skip, cout)) in widths.iter().enumerate() {
            let p = pb.pp("dec").pp(i);
            dec_res.push(ResBlock::new(&p.pp("res"), cfg, cin + skip, cout)?);
            if i > 0 {
                dec_attn.push(TransformerBlock::new(&p.pp("attn"), cfg, cout)?);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::new(pb, cfg)?,
            mid_attn: TransformerBlock::new(&pb.pp("mid").pp("attn"), cfg, c3)?,
            dec_res,
            dec_attn,
            out_norm: GroupNorm::new(&pb.pp("out_norm"), cfg.groups, c1)?,
            conv_out: Conv2d::new(&pb.pp("conv_out"), c1, cfg.latent_channels, 3, 1, 1)?,
            aia: None,
        })
    }

    /// Attach AiA additions (LR and reference attention) under `pb`,
    /// usually `aia/`, for the middle block and decoder blocks C, B, A.
    pub fn attach_aia(&mut self, pb: &ParamBuilder) -> Result<()> {
        let mut ext = vec![AiaExtension::new(&pb.pp("mid"), &self.mid_attn)?];
        for (i, blk) in self.dec_attn.iter().enumerate() {
            ext.push(AiaExtension::new(&pb.pp("dec").pp(i + 1), blk)?);
        }
        self.aia = Some(ext);
        Ok(())
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn aia(&self) -> Option<&[AiaExtension]> {
        self.aia.as_deref()
    }

    /// The transformer blocks that carry AiA: middle, then decoder C, B, A.
    pub fn aia_blocks(&self) -> Vec<&TransformerBlock> {
        std::iter::once(&self.mid_attn)
            .chain(self.dec_attn.iter())
            .collect()
    }

    /// Noise prediction. Without AiA attached, control inputs must be
    /// absent. Reference pyramids are fused by token concatenation.
    pub fn forward(
        &self,
        state: &UNetState,
        context: &Tensor,
        lr: Option<&ControlPyramid>,
        refs: &[ControlPyramid],
    ) -> Result<Tensor> {
        let z = &state.z;
        check_latent(&self.cfg, z)?;
        if context.dim(0)? != z.dim(0)? {
            return Err(dim_err!(
                "context batch {} vs latent batch {}",
                context.dim(0)?,
                z.dim(0)?
            ));
        }
        if self.aia.is_none() && (lr.is_some() || !refs.is_empty()) {
            return Err(arg_err!("controls given to a U-Net without AiA blocks"));
        }
        let temb = self.encoder.time.forward(&state.t, z.dtype())?;
        let enc = self.encoder.forward(z, &temb, context, None)?;

        // Conditions at middle (scale 4) and decoder C, B, A (scales 3, 2, 1).
        let scales = [3usize, 2, 1, 0];
        let ref_feats: Vec<Vec<Tensor>> = scales
            .iter()
            .map(|&s| refs.iter().map(|r| r.features[s].clone()).collect())
            .collect();
        let aia_inputs = |k: usize| -> Option<AiaInputs> {
            self.aia.as_ref().map(|ext| AiaInputs {
                ext: &ext[k],
                x: lr.map(|p| &p.features[scales[k]]),
                refs: &ref_feats[k],
            })
        };

        let mut h = self.mid_attn.forward(&enc.mid, context, aia_inputs(0))?;
        for i in 0..4 {
            let skip = &enc.levels[3 - i];
            if i > 0 {
                let (_, _, sh, sw) = skip.dims4()?;
                h = h.upsample_nearest2d(sh, sw)?;
            }
            h = self.dec_res[i].forward(&Tensor::cat(&[&h, skip], 1)?, &temb)?;
            if i > 0 {
                h = self.dec_attn[i - 1].forward(&h, context, aia_inputs(i))?;
            }
        }
        self.conv_out.forward(&self.out_norm.forward(&h)?.silu()?)
    }
}
