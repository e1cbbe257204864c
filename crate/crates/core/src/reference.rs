//! Reference images generated from the cognitive embedding by the frozen
//! base model. Their latents feed the control encoder directly; decoding is
//! only needed for inspection and scoring.

use candle_core::{Tensor, D};

use crate::adapter::CognitiveEmbedding;
use crate::diffusion::{
    decode_latent, sample, LatentImage, NoiseSchedule, SampleOptions, LATENT_CHANNELS,
};
use crate::embedding::ImageEmbedder;
use crate::error::{arg_err, dim_err, Result};
use crate::model::BaseModel;

/// Sample `n_refs` latents of spatial size `latent_hw` conditioned only on
/// `e`. Reference `k` uses seed `opts.seed ^ k`; guidance runs against the
/// base null embedding. No parameters are created.
pub fn generate_reference(
    base: &BaseModel,
    schedule: &NoiseSchedule,
    e: &CognitiveEmbedding,
    n_refs: usize,
    latent_hw: (usize, usize),
    opts: &SampleOptions,
) -> Result<Vec<LatentImage>> {
    if n_refs < 1 {
        return Err(arg_err!("n_refs must be at least 1, got {n_refs}"));
    }
    let b = e.data.dim(0)?;
    let null = base.null_context(b)?.to_dtype(e.data.dtype())?;
    let shape = (b, LATENT_CHANNELS, latent_hw.0, latent_hw.1);
    (0..n_refs as u64)
        .map(|k| {
            let o = SampleOptions {
                seed: opts.seed ^ k,
                ..opts.clone()
            };
            sample(base, schedule, &e.data, Some(&null), shape, &o)
        })
        .collect()
}

/// Decoded references, clamped to the displayable range.
pub fn decode_references(refs: &[LatentImage]) -> Result<Vec<Tensor>> {
    refs.iter()
        .map(|r| Ok(decode_latent(r)?.clamp(0.0, 1.0)?))
        .collect()
}

/// Cosine similarity of the class tokens of two batches of images, one
/// score per batch element.
pub fn gen_scores(encoder: &impl ImageEmbedder, refs: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    if refs.dims() != gt.dims() {
        return Err(dim_err!(
            "reference {:?} vs ground truth {:?}",
            refs.dims(),
            gt.dims()
        ));
    }
    let cls = |x: &Tensor| -> Result<Tensor> {
        let t = encoder.encode_image(x)?.data;
        Ok(t.narrow(1, 0, 1)?
            .squeeze(1)?
            .to_dtype(candle_core::DType::F64)?)
    };
    let (a, b) = (cls(refs)?, cls(gt)?);
    let dot = (&a * &b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    let cos = (dot / (na * nb)?.clamp(1e-12, f64::MAX)?)?;
    Ok(cos
        .to_vec1::<f64>()?
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect())
}

/// Gen-score of a single (3,H,W) reference against its ground truth.
pub fn gen_score(encoder: &impl ImageEmbedder, reference: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(gen_scores(encoder, &reference.unsqueeze(0)?, &gt.unsqueeze(0)?)?[0])
}
