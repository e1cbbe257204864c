//! Small differentiable building blocks on top of candle tensors.
//!
//! Everything here is composed from primitive tensor ops so that gradients
//! flow through every layer (the fused candle-nn kernels lack backward
//! passes for some of these).

use candle_core::{DType, Tensor, D};

use crate::error::{dim_err, Result};
use crate::params::{Init, ParamBuilder};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn tensors(&self) -> Vec<Tensor> {
        std::iter::once(self.weight.clone())
            .chain(self.bias.clone())
            .collect()
    }

    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = pb.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
        let bias = pb.get("bias", &[out_dim], Init::Uniform(bound))?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = pb.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
        Ok(Self { weight, bias: None })
    }

    /// Zero-initialized projection ("zero convolution" on token features).
    pub fn zeros(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.get("weight", &[out_dim, in_dim], Init::Zeros)?;
        let bias = pb.get("bias", &[out_dim], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    /// A new projection whose values are copied from `src`.
    pub fn copy_of(pb: &ParamBuilder, src: &Linear) -> Result<Self> {
        let weight = pb.get("weight", src.weight.dims(), Init::Copy(src.weight.clone()))?;
        let bias = match &src.bias {
            Some(b) => Some(pb.get("bias", b.dims(), Init::Copy(b.clone()))?),
            None => None,
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| dim_err!("linear on a scalar"))?;
        if in_dim != self.in_dim() {
            return Err(dim_err!(
                "linear expects {} input channels, got {in_dim}",
                self.in_dim()
            ));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn tensors(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn new(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = pb.get(
            "weight",
            &[out_ch, in_ch, kernel, kernel],
            Init::Uniform(bound),
        )?;
        let bias = pb.get("bias", &[out_ch], Init::Uniform(bound))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// 1x1 convolution with all-zero weights and bias.
    pub fn zeros(pb: &ParamBuilder, in_ch: usize, out_ch: usize) -> Result<Self> {
        let weight = pb.get("weight", &[out_ch, in_ch, 1, 1], Init::Zeros)?;
        let bias = pb.get("bias", &[out_ch], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: 0,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let in_ch = self.weight.dim(1)?;
        if x.rank() != 4 || x.dim(1)? != in_ch {
            return Err(dim_err!(
                "conv2d expects (B,{in_ch},H,W), got {:?}",
                x.dims()
            ));
        }
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let out = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn tensors(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", &[dim], Init::Const(1.0))?,
            bias: pb.get("bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn copy_of(pb: &ParamBuilder, src: &LayerNorm) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", src.weight.dims(), Init::Copy(src.weight.clone()))?,
            bias: pb.get("bias", src.bias.dims(), Init::Copy(src.bias.clone()))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn tensors(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn new(pb: &ParamBuilder, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(dim_err!(
                "{channels} channels not divisible into {groups} groups"
            ));
        }
        Ok(Self {
            weight: pb.get("weight", &[channels], Init::Const(1.0))?,
            bias: pb.get("bias", &[channels], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let gc = g.broadcast_sub(&mean)?;
        let var = gc.sqr()?.mean_keepdim(2)?;
        let gn = gc
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        Ok(gn
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Two-layer GELU MLP with a residual-friendly width multiplier.
#[derive(Clone, Debug)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn tensors(&self) -> Vec<Tensor> {
        [self.fc1.tensors(), self.fc2.tensors()].concat()
    }

    pub fn new(pb: &ParamBuilder, dim: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), dim, dim * mult)?,
            fc2: Linear::new(&pb.pp("fc2"), dim * mult, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Scaled dot-product attention with `heads` heads over (B,T,C) tensors.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, tq, c) = q.dims3()?;
    let (bk, tk, ck) = k.dims3()?;
    if bk != b || ck != c || v.dims3()? != (b, tk, c) {
        return Err(dim_err!(
            "attention shapes q {:?} k {:?} v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        ));
    }
    if c % heads != 0 {
        return Err(dim_err!("{c} channels not divisible by {heads} heads"));
    }
    let hd = c / heads;
    let split = |x: &Tensor, t: usize| -> Result<Tensor> {
        Ok(x.reshape((b, t, heads, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * heads, t, hd))?)
    };
    let (qh, kh, vh) = (split(q, tq)?, split(k, tk)?, split(v, tk)?);
    let scores = (qh.matmul(&kh.t()?)? * (1.0 / (hd as f64).sqrt()))?;
    let attn = softmax_last(&scores)?;
    let out = attn.matmul(&vh)?;
    Ok(out
        .reshape((b, heads, tq, hd))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, tq, c))?)
}

/// Standard attention projections; `context_dim` differs from `dim` for
/// cross-attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn tensors(&self) -> Vec<Tensor> {
        [
            self.q.tensors(),
            self.k.tensors(),
            self.v.tensors(),
            self.o.tensors(),
        ]
        .concat()
    }

    pub fn new(pb: &ParamBuilder, dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::no_bias(&pb.pp("q"), dim, dim)?,
            k: Linear::no_bias(&pb.pp("k"), context_dim, dim)?,
            v: Linear::no_bias(&pb.pp("v"), context_dim, dim)?,
            o: Linear::new(&pb.pp("o"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(x)?;
        let k = self.k.forward(context)?;
        let v = self.v.forward(context)?;
        self.o
            .forward(&multi_head_attention(&q, &k, &v, self.heads)?)
    }
}

/// Sinusoidal timestep features of width `dim` for a batch of timesteps.
pub fn timestep_features(timesteps: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() * t)
            .collect();
        data.extend(freqs.iter().map(|f| f.cos()));
        data.extend(freqs.iter().map(|f| f.sin()));
    }
    let dev = candle_core::Device::Cpu;
    Ok(Tensor::from_vec(data, (timesteps.len(), 2 * half), &dev)?.to_dtype(dtype)?)
}

/// Fixed 2-D sinusoidal position codes for an h x w grid, (h*w, dim).
/// The first half of the channels encodes rows, the second half columns.
pub fn position_encoding_2d(h: usize, w: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(dim_err!(
            "position code width {dim} must be a multiple of 4"
        ));
    }
    let quarter = dim / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| 100f64.powf(-(i as f64) / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            for pos in [y as f64, x as f64] {
                data.extend(freqs.iter().map(|f| (pos * f).sin()));
                data.extend(freqs.iter().map(|f| (pos * f).cos()));
            }
        }
    }
    let dev = candle_core::Device::Cpu;
    Ok(Tensor::from_vec(data, (h * w, dim), &dev)?.to_dtype(dtype)?)
}

/// (B,C,H,W) feature map to (B,H*W,C) tokens.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    if t != h * w {
        return Err(dim_err!("{t} tokens cannot form a {h}x{w} map"));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Rearrange (B,C,H*r,W*r) into (B,C*r*r,H,W).
pub fn space_to_depth(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(dim_err!("{h}x{w} not divisible by block {r}"));
    }
    Ok(x.reshape((b, c, h / r, r, w / r, r))?
        .permute((0, 1, 3, 5, 2, 4))?
        .contiguous()?
        .reshape((b, c * r * r, h / r, w / r))?)
}

/// Inverse of [`space_to_depth`] (pixel shuffle).
pub fn depth_to_space(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, crr, h, w) = x.dims4()?;
    if crr % (r * r) != 0 {
        return Err(dim_err!("{crr} channels not divisible by {}", r * r));
    }
    let c = crr / (r * r);
    Ok(x.reshape((b, c, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((b, c, h * r, w * r))?)
}
