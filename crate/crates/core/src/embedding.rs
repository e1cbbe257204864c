//! Deterministic stand-ins for frozen image and text encoders.
//!
//! Both providers are pure functions of their input and a seed: weights are
//! drawn once from a seeded generator and never trained. They sit behind the
//! [`ImageEmbedder`] and [`TextEmbedder`] traits so pre-trained encoders can
//! be swapped in without touching the adapter or the diffusion model.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, dim_err, Result};
use crate::nn::{space_to_depth, to_tokens};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    Image,
    Text,
}

/// A (B, T, C) token array produced by one of the providers.
#[derive(Clone, Debug)]
pub struct TokenEmbedding {
    pub data: Tensor,
    pub kind: EmbeddingKind,
}

impl TokenEmbedding {
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        Ok(self.data.dims3()?)
    }
}

/// Caption embedding plus the class-token position of every batch element.
#[derive(Clone, Debug)]
pub struct TextEncoding {
    pub embedding: TokenEmbedding,
    pub t_cls: Vec<usize>,
}

pub trait ImageEmbedder {
    fn encode_image(&self, image: &Tensor) -> Result<TokenEmbedding>;
    fn channels(&self) -> usize;
}

pub trait TextEmbedder {
    fn encode_text(&self, token_ids: &[u32], t_l: usize) -> Result<TextEncoding>;
    fn channels(&self) -> usize;
}

fn seeded_normal(seed: u64, n: usize, std: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

fn l2_normalize_last(x: &Tensor) -> Result<Tensor> {
    let norm = x
        .sqr()?
        .sum_keepdim(D::Minus1)?
        .sqrt()?
        .clamp(1e-12, f64::MAX)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Seeded patch-projection image encoder with one global mixing layer.
///
/// Tokens: index 0 is the class token, followed by one token per
/// `patch`x`patch` patch in row-major order.
#[derive(Clone, Debug)]
pub struct ToyImageEncoder {
    patch: usize,
    dim: usize,
    patch_proj: Tensor,
    mix: Tensor,
    cls_proj: Tensor,
}

impl ToyImageEncoder {
    pub fn new(seed: u64, patch: usize, dim: usize) -> Result<Self> {
        let dev = Device::Cpu;
        let fan_in = 3 * patch * patch;
        // Gain 4 keeps the tanh features away from the linear regime for
        // the +-0.5 centered pixel range.
        let patch_proj = Tensor::from_vec(
            seeded_normal(seed, dim * fan_in, 4.0 / (fan_in as f64).sqrt()),
            (fan_in, dim),
            &dev,
        )?;
        let mix = Tensor::from_vec(
            seeded_normal(seed.wrapping_add(1), dim * dim, 1.0 / (dim as f64).sqrt()),
            (dim, dim),
            &dev,
        )?;
        let cls_proj = Tensor::from_vec(
            seeded_normal(
                seed.wrapping_add(2),
                2 * dim * dim,
                2.0 / (dim as f64).sqrt(),
            ),
            (2 * dim, dim),
            &dev,
        )?;
        Ok(Self {
            patch,
            dim,
            patch_proj,
            mix,
            cls_proj,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    /// Number of tokens produced for an `h`x`w` image.
    pub fn num_tokens(&self, h: usize, w: usize) -> usize {
        (h / self.patch) * (w / self.patch) + 1
    }
}

impl ImageEmbedder for ToyImageEncoder {
    fn channels(&self) -> usize {
        self.dim
    }

    /// Differentiable with respect to `image`, which lets the cognitive loss
    /// reach the LR preprocessor.
    fn encode_image(&self, image: &Tensor) -> Result<TokenEmbedding> {
        let (b, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(dim_err!("image must have 3 channels, got {c}"));
        }
        if h % self.patch != 0 || w % self.patch != 0 || h == 0 || w == 0 {
            return Err(dim_err!(
                "image {h}x{w} not divisible by patch size {}",
                self.patch
            ));
        }
        let dtype = image.dtype();
        let patches = to_tokens(&space_to_depth(&(image - 0.5)?, self.patch)?)?;
        let n = patches.dim(1)?;
        let proj = self.patch_proj.to_dtype(dtype)?;
        let feats = patches
            .reshape((b * n, 3 * self.patch * self.patch))?
            .matmul(&proj)?
            .tanh()?
            .reshape((b, n, self.dim))?;
        // Global context: mean and spread of patch features.
        let mean = feats.mean_keepdim(1)?;
        let spread = feats.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?.sqrt()?;
        let mixed = mean
            .reshape((b, self.dim))?
            .matmul(&self.mix.to_dtype(dtype)?)?
            .tanh()?
            .reshape((b, 1, self.dim))?;
        let tokens = feats.broadcast_add(&mixed)?;
        let summary = Tensor::cat(&[&mean.broadcast_sub(&mean.mean_keepdim(2)?)?, &spread], 2)?;
        let cls = summary
            .reshape((b, 2 * self.dim))?
            .matmul(&self.cls_proj.to_dtype(dtype)?)?
            .reshape((b, 1, self.dim))?;
        let all = Tensor::cat(&[&cls, &tokens], 1)?;
        Ok(TokenEmbedding {
            data: l2_normalize_last(&all)?,
            kind: EmbeddingKind::Image,
        })
    }
}

/// Causal-prefix text encoder: token `j` summarizes ids `0..=j` with an
/// exponentially decaying weight, mimicking a causally masked transformer
/// where the last real token (the class token) sees the whole caption.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    vocab: usize,
    dim: usize,
    decay: f64,
    table: Vec<Vec<f64>>,
}

impl ToyTextEncoder {
    pub const DECAY: f64 = 0.5;

    pub fn new(seed: u64, vocab: usize, dim: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(arg_err!(
                "vocabulary needs at least one symbol plus padding"
            ));
        }
        let flat = seeded_normal(seed, vocab * dim, 1.0);
        Ok(Self {
            vocab,
            dim,
            decay: Self::DECAY,
            table: flat.chunks(dim).map(|c| c.to_vec()).collect(),
        })
    }

    /// The reserved padding symbol, the last id of the vocabulary.
    pub fn pad_id(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    pub fn table_row(&self, id: u32) -> &[f64] {
        &self.table[id as usize]
    }

    fn normalize(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect()
    }

    /// Per-position embeddings as plain vectors, `t_l` rows of `dim`.
    pub fn embed_rows(&self, token_ids: &[u32], t_l: usize) -> Result<Vec<Vec<f64>>> {
        if token_ids.is_empty() {
            return Err(arg_err!("empty token list"));
        }
        if token_ids.len() > t_l {
            return Err(arg_err!(
                "{} tokens exceed the text length {t_l}",
                token_ids.len()
            ));
        }
        if let Some(bad) = token_ids.iter().find(|&&id| id >= self.pad_id()) {
            return Err(arg_err!(
                "token id {bad} outside vocabulary (pad id {} is reserved)",
                self.pad_id()
            ));
        }
        let mut rows = Vec::with_capacity(t_l);
        let mut acc = vec![0.0; self.dim];
        for &id in token_ids {
            for (a, t) in acc.iter_mut().zip(&self.table[id as usize]) {
                *a = *a * self.decay + t;
            }
            rows.push(Self::normalize(&acc));
        }
        let pad = Self::normalize(&self.table[self.pad_id() as usize]);
        rows.resize(t_l, pad);
        Ok(rows)
    }

    /// Batched encoding in the given dtype.
    pub fn encode_batch(
        &self,
        captions: &[Vec<u32>],
        t_l: usize,
        dtype: DType,
    ) -> Result<TextEncoding> {
        if captions.is_empty() {
            return Err(arg_err!("empty caption batch"));
        }
        let mut flat = Vec::with_capacity(captions.len() * t_l * self.dim);
        let mut t_cls = Vec::with_capacity(captions.len());
        for cap in captions {
            for row in self.embed_rows(cap, t_l)? {
                flat.extend(row);
            }
            t_cls.push(cap.len() - 1);
        }
        let data = Tensor::from_vec(flat, (captions.len(), t_l, self.dim), &Device::Cpu)?
            .to_dtype(dtype)?;
        Ok(TextEncoding {
            embedding: TokenEmbedding {
                data,
                kind: EmbeddingKind::Text,
            },
            t_cls,
        })
    }
}

impl TextEmbedder for ToyTextEncoder {
    fn channels(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, token_ids: &[u32], t_l: usize) -> Result<TextEncoding> {
        self.encode_batch(&[token_ids.to_vec()], t_l, DType::F64)
    }
}
