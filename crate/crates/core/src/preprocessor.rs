//! Lightweight 4x restoration network applied to LR before cognitive
//! encoding. It has no loss of its own: its weights move only through the
//! cognitive loss.

use candle_core::Tensor;

use crate::error::{dim_err, Result};
use crate::nn::{depth_to_space, Conv2d};
use crate::params::ParamBuilder;

#[derive(Clone, Copy, Debug)]
pub struct PreprocessorConfig {
    pub channels: usize,
    pub blocks: usize,
}

impl Default for PreprocessorConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            blocks: 4,
        }
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        Ok((x + self.conv2.forward(&h)?)?)
    }
}

/// Small SRResNet: head conv, residual trunk, pixel-shuffle x4 tail, plus a
/// global nearest-neighbour skip from the input.
#[derive(Clone, Debug)]
pub struct LrPreprocessor {
    head: Conv2d,
    blocks: Vec<ResidualBlock>,
    trunk_out: Conv2d,
    upsample: Conv2d,
}

impl LrPreprocessor {
    pub fn new(pb: &ParamBuilder, cfg: PreprocessorConfig) -> Result<Self> {
        let c = cfg.channels;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let p = pb.pp("blocks").pp(i);
                Ok(ResidualBlock {
                    conv1: Conv2d::new(&p.pp("conv1"), c, c, 3, 1, 1)?,
                    conv2: Conv2d::new(&p.pp("conv2"), c, c, 3, 1, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            head: Conv2d::new(&pb.pp("head"), 3, c, 3, 1, 1)?,
            blocks,
            trunk_out: Conv2d::new(&pb.pp("trunk_out"), c, c, 3, 1, 1)?,
            upsample: Conv2d::new(&pb.pp("upsample"), c, 3 * 16, 3, 1, 1)?,
        })
    }

    /// (B,3,h,w) -> (B,3,4h,4w).
    pub fn forward(&self, lr: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = lr.dims4()?;
        if c != 3 || h < 8 || w < 8 {
            return Err(dim_err!(
                "preprocessor expects (B,3,h,w) with h,w >= 8, got {:?}",
                lr.dims()
            ));
        }
        let feat = self.head.forward(lr)?;
        let mut x = feat.clone();
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        let x = (self.trunk_out.forward(&x)? + feat)?;
        let up = depth_to_space(&self.upsample.forward(&x)?, 4)?;
        let skip = lr.upsample_nearest2d(4 * h, 4 * w)?;
        Ok((up + skip)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn upscales_by_four_and_stays_light() {
        let store = ParamStore::new(0, DType::F32);
        let net = LrPreprocessor::new(
            &store.root().pp("preprocessor"),
            PreprocessorConfig::default(),
        )
        .unwrap();
        assert!(store.num_params("preprocessor") < 500_000);
        let x = Tensor::rand(0f32, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 3, 64, 64]);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn rejects_tiny_inputs() {
        let store = ParamStore::new(0, DType::F32);
        let net = LrPreprocessor::new(&store.root(), PreprocessorConfig::default()).unwrap();
        let x = Tensor::zeros((1, 3, 4, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(net.forward(&x).is_err());
    }
}
