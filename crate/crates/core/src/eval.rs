//! Evaluation over a paired test split: fidelity against ground truth, the
//! bicubic baseline, gen-score of the references and cognitive retrieval.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapter::CognitiveEmbedding;
use crate::config::RunConfig;
use crate::error::{arg_err, dim_err, Error, Result};
use crate::imaging::bicubic_upscale4;
use crate::metrics::{psnr, ssim};
use crate::model::{caption_targets, image_encoder, text_encoder, CognitiveEncoder};
use crate::pipeline::{Pipeline, SrFlags};
use crate::reference::{decode_references, gen_scores};
use crate::toy::{all_captions, class_of, Dataset};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
    /// Mean over this pair's references.
    pub gen_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub pairs: usize,
    pub no_reference: bool,
    pub no_cognition: bool,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub bicubic_psnr_mean: f64,
    pub bicubic_ssim_mean: f64,
    /// Fraction of pairs where the SR output beats bicubic in PSNR.
    pub win_rate: f64,
    pub gen_score_mean: Option<f64>,
    pub retrieval_accuracy: Option<f64>,
    pub per_pair: Vec<PairMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Caption supervision targets of every attribute class, (K,T_e,C_l).
pub fn class_bank(cfg: &RunConfig) -> Result<Tensor> {
    caption_targets(&text_encoder(cfg)?, &all_captions(), cfg, DType::F32)
}

/// Index of the nearest bank entry (mean squared error) for each embedding.
pub fn retrieve(e: &CognitiveEmbedding, bank: &Tensor) -> Result<Vec<usize>> {
    let (b, t, c) = e.data.dims3()?;
    let (k, tb, cb) = bank.dims3()?;
    if (t, c) != (tb, cb) {
        return Err(dim_err!("embedding ({t},{c}) vs bank ({tb},{cb})"));
    }
    let x = e.data.to_dtype(DType::F64)?.reshape((b, 1, t * c))?;
    let y = bank.to_dtype(DType::F64)?.reshape((1, k, t * c))?;
    let d = x.broadcast_sub(&y)?.sqr()?.mean(2)?;
    Ok(d.argmin(1)?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|i| i as usize)
        .collect())
}

/// Fraction of captioned samples whose embedding retrieves their own class.
pub fn retrieval_accuracy(enc: &CognitiveEncoder, data: &Dataset, cfg: &RunConfig) -> Result<f64> {
    data.require_captions()?;
    if data.is_empty() {
        return Err(arg_err!("empty manifest"));
    }
    let bank = class_bank(cfg)?;
    let mut hits = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let (_, lr, tokens) = data.batch(chunk)?;
        let got = retrieve(&enc.embed(&lr)?.detach(), &bank)?;
        hits += got
            .iter()
            .zip(&tokens)
            .filter(|(g, t)| class_of(t) == Some(**g))
            .count();
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Run the pipeline over every pair in `data` and collect metrics.
/// Batch `k` (starting at pair `start`) samples with seed `cfg.seed ^ start`,
/// so results do not depend on anything but the configuration.
pub fn evaluate(
    pipeline: &Pipeline,
    data: &Dataset,
    flags: SrFlags,
    batch: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(arg_err!("empty manifest"));
    }
    let cfg = &pipeline.cfg;
    let encoder = image_encoder(cfg)?;
    let bank = class_bank(cfg)?;
    let captioned = data.samples.iter().all(|s| class_of(&s.tokens).is_some());
    let mut per_pair = Vec::with_capacity(data.len());
    let mut hits = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (hr, lr, tokens) = data.batch(chunk)?;
        let out = pipeline.super_resolve(&lr, flags, cfg.seed ^ chunk[0] as u64)?;
        let bicubic = bicubic_upscale4(&lr)?.clamp(0.0, 1.0)?;
        let mut ref_scores = vec![Vec::new(); chunk.len()];
        for img in decode_references(&out.references)? {
            for (i, s) in gen_scores(&encoder, &img, &hr)?.into_iter().enumerate() {
                ref_scores[i].push(s);
            }
        }
        if let (Some(e), true) = (&out.embedding, captioned) {
            let got = retrieve(e, &bank)?;
            hits += got
                .iter()
                .zip(&tokens)
                .filter(|(g, t)| class_of(t) == Some(**g))
                .count();
        }
        for (i, &j) in chunk.iter().enumerate() {
            let (gt, sr, bi) = (hr.get(i)?, out.hr.get(i)?, bicubic.get(i)?);
            per_pair.push(PairMetrics {
                name: data.samples[j].name.clone(),
                psnr: psnr(&sr, &gt)?,
                ssim: ssim(&sr, &gt)?,
                bicubic_psnr: psnr(&bi, &gt)?,
                bicubic_ssim: ssim(&bi, &gt)?,
                gen_score: mean(ref_scores[i].iter().copied()),
            });
        }
    }
    let n = per_pair.len() as f64;
    let wins = per_pair.iter().filter(|p| p.psnr > p.bicubic_psnr).count();
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        pairs: per_pair.len(),
        no_reference: flags.no_reference,
        no_cognition: flags.no_cognition,
        psnr_mean: mean(per_pair.iter().map(|p| p.psnr)).unwrap_or(0.0),
        ssim_mean: mean(per_pair.iter().map(|p| p.ssim)).unwrap_or(0.0),
        bicubic_psnr_mean: mean(per_pair.iter().map(|p| p.bicubic_psnr)).unwrap_or(0.0),
        bicubic_ssim_mean: mean(per_pair.iter().map(|p| p.bicubic_ssim)).unwrap_or(0.0),
        win_rate: wins as f64 / n,
        gen_score_mean: mean(per_pair.iter().filter_map(|p| p.gen_score)),
        retrieval_accuracy: (captioned && !flags.no_cognition).then(|| hits as f64 / n),
        per_pair,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn retrieve_picks_the_nearest_entry() {
        let dev = Device::Cpu;
        let bank = Tensor::new(&[[[0f32, 0.0]], [[1.0, 1.0]], [[5.0, -1.0]]], &dev).unwrap();
        let e = Tensor::new(&[[[0.9f32, 1.2]], [[4.0, 0.0]], [[0.1, -0.1]]], &dev).unwrap();
        let got = retrieve(&CognitiveEmbedding::new(e).unwrap(), &bank).unwrap();
        assert_eq!(got, vec![1, 2, 0]);
    }

    #[test]
    fn class_bank_entries_are_distinct() {
        let cfg = RunConfig::default();
        let bank = class_bank(&cfg).unwrap();
        assert_eq!(bank.dims(), &[24, cfg.t_e, cfg.text_dim]);
        let e = CognitiveEmbedding::new(bank.clone()).unwrap();
        assert_eq!(retrieve(&e, &bank).unwrap(), (0..24).collect::<Vec<_>>());
    }
}
