//! Cognitive adapter: learnable queries that compress image tokens into a
//! multi-token cognitive embedding aligned with caption-embedding tokens.

use candle_core::{Device, Tensor};

use crate::embedding::{EmbeddingKind, TextEncoding, TokenEmbedding};
use crate::error::{arg_err, dim_err, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear};
use crate::params::{Init, ParamBuilder};

/// E, shaped (B, T_e, C_l).
#[derive(Clone, Debug)]
pub struct CognitiveEmbedding {
    pub data: Tensor,
}

impl CognitiveEmbedding {
    pub fn new(data: Tensor) -> Result<Self> {
        data.dims3()?;
        Ok(Self { data })
    }

    pub fn num_tokens(&self) -> usize {
        self.data.dim(1).unwrap_or(0)
    }

    pub fn detach(&self) -> Self {
        Self {
            data: self.data.detach(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterConfig {
    pub image_dim: usize,
    pub text_dim: usize,
    pub num_queries: usize,
    pub depth: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
struct AdapterBlock {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl AdapterBlock {
    fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(&pb.pp("ln_self"), dim)?,
            self_attn: Attention::new(&pb.pp("self_attn"), dim, dim, heads)?,
            ln_cross: LayerNorm::new(&pb.pp("ln_cross"), dim)?,
            cross_attn: Attention::new(&pb.pp("cross_attn"), dim, dim, heads)?,
            ln_ff: LayerNorm::new(&pb.pp("ln_ff"), dim)?,
            ff: FeedForward::new(&pb.pp("ff"), dim, 4)?,
        })
    }

    fn forward(&self, q: &Tensor, image: &Tensor) -> Result<Tensor> {
        let h = self.ln_self.forward(q)?;
        let q = (q + self.self_attn.forward(&h, &h)?)?;
        let q = (&q
            + self
                .cross_attn
                .forward(&self.ln_cross.forward(&q)?, image)?)?;
        Ok((&q + self.ff.forward(&self.ln_ff.forward(&q)?)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct CognitiveAdapter {
    cfg: AdapterConfig,
    input_norm: LayerNorm,
    input_proj: Linear,
    queries: Tensor,
    blocks: Vec<AdapterBlock>,
    out_norm: LayerNorm,
    out_proj: Linear,
}

impl CognitiveAdapter {
    pub fn new(pb: &ParamBuilder, cfg: AdapterConfig) -> Result<Self> {
        if cfg.num_queries == 0 {
            return Err(arg_err!("adapter needs at least one query"));
        }
        let blocks = (0..cfg.depth)
            .map(|i| AdapterBlock::new(&pb.pp("blocks").pp(i), cfg.text_dim, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            input_norm: LayerNorm::new(&pb.pp("input_norm"), cfg.image_dim)?,
            input_proj: Linear::new(&pb.pp("input_proj"), cfg.image_dim, cfg.text_dim)?,
            queries: pb.get(
                "queries",
                &[cfg.num_queries, cfg.text_dim],
                Init::Normal(0.1),
            )?,
            blocks,
            out_norm: LayerNorm::new(&pb.pp("out_norm"), cfg.text_dim)?,
            out_proj: Linear::new(&pb.pp("out_proj"), cfg.text_dim, cfg.text_dim)?,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn forward(&self, image: &TokenEmbedding) -> Result<CognitiveEmbedding> {
        if image.kind != EmbeddingKind::Image {
            return Err(arg_err!("adapter input must be an image embedding"));
        }
        let (b, _, c) = image.data.dims3()?;
        if c != self.cfg.image_dim {
            return Err(dim_err!(
                "adapter expects {} image channels, got {c}",
                self.cfg.image_dim
            ));
        }
        let tokens = self
            .input_proj
            .forward(&self.input_norm.forward(&image.data)?)?;
        let mut q = self
            .queries
            .unsqueeze(0)?
            .broadcast_as((b, self.cfg.num_queries, self.cfg.text_dim))?
            .contiguous()?;
        for block in &self.blocks {
            q = block.forward(&q, &tokens)?;
        }
        CognitiveEmbedding::new(self.out_proj.forward(&self.out_norm.forward(&q)?)?)
    }
}

/// Token positions supervising each of the `t_e` queries: the `t_e` tokens
/// ending at and including the class token, with the class token repeated
/// at the end when the caption is shorter than `t_e`.
pub fn supervision_indices(t_cls: usize, t_e: usize) -> Vec<usize> {
    if t_cls + 1 >= t_e {
        (t_cls + 1 - t_e..=t_cls).collect()
    } else {
        (0..t_e).map(|j| j.min(t_cls)).collect()
    }
}

/// Build the supervision target L' of shape (B, T_e, C_l).
pub fn supervision_target(text: &TextEncoding, t_e: usize) -> Result<Tensor> {
    let (b, t_l, _) = text.embedding.data.dims3()?;
    if t_e == 0 || t_e > t_l {
        return Err(arg_err!("T_e = {t_e} must be in [1, T_l = {t_l}]"));
    }
    if text.t_cls.len() != b {
        return Err(dim_err!(
            "{} class positions for batch {b}",
            text.t_cls.len()
        ));
    }
    let rows = text
        .t_cls
        .iter()
        .enumerate()
        .map(|(i, &t_cls)| {
            if t_cls >= t_l {
                return Err(arg_err!("class position {t_cls} outside T_l = {t_l}"));
            }
            let idx: Vec<u32> = supervision_indices(t_cls, t_e)
                .into_iter()
                .map(|j| j as u32)
                .collect();
            let idx = Tensor::from_vec(idx, t_e, &Device::Cpu)?;
            Ok(text.embedding.data.get(i)?.index_select(&idx, 0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

/// Mean squared error between E and L' over all B*T_e*C_l entries.
pub fn cognitive_loss(e: &CognitiveEmbedding, target: &Tensor) -> Result<Tensor> {
    if e.data.dims() != target.dims() {
        return Err(dim_err!(
            "cognitive loss shapes {:?} vs {:?}",
            e.data.dims(),
            target.dims()
        ));
    }
    Ok((&e.data - target)?.sqr()?.mean_all()?)
}
