//! Single-order real-world degradation: blur, 4x bicubic downsampling,
//! additive Gaussian noise and blocky quantization.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::imaging::{
    self, from_planes, gaussian_blur_plane, resize_bicubic_plane, to_planes, Plane,
};

pub const SCALE: usize = 4;
const BLOCK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub compression_quality: u8,
    pub seed: u64,
}

impl DegradationParams {
    /// Blur-free, noise-free, lossless: only the bicubic downsample remains.
    pub fn identity(seed: u64) -> Self {
        Self {
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            compression_quality: 100,
            seed,
        }
    }

    pub fn scale(&self) -> usize {
        SCALE
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(arg_err!("blur_sigma must be finite and >= 0"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(arg_err!("noise_sigma must be finite and >= 0"));
        }
        if !(1..=100).contains(&self.compression_quality) {
            return Err(arg_err!("compression_quality must be in [1,100]"));
        }
        Ok(())
    }

    /// Quantization step of the block residual; zero at quality 100.
    pub fn residual_step(&self) -> f32 {
        (100 - self.compression_quality as i32) as f32 / 100.0 * 0.25
    }
}

/// Inclusive sampling bounds for [`make_pairs`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRange {
    pub blur_sigma: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub quality: (u8, u8),
}

impl DegradationRange {
    pub fn fixed(p: &DegradationParams) -> Self {
        Self {
            blur_sigma: (p.blur_sigma, p.blur_sigma),
            noise_sigma: (p.noise_sigma, p.noise_sigma),
            quality: (p.compression_quality, p.compression_quality),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng, seed: u64) -> DegradationParams {
        let uni = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let blur_sigma = uni(rng, self.blur_sigma);
        let noise_sigma = uni(rng, self.noise_sigma);
        let (qlo, qhi) = self.quality;
        let compression_quality = if qhi > qlo {
            rng.random_range(qlo..=qhi)
        } else {
            qlo
        };
        DegradationParams {
            blur_sigma,
            noise_sigma,
            compression_quality,
            seed,
        }
    }
}

fn quantize(v: f32, step: f32) -> f32 {
    if step > 0.0 {
        (v / step).round() * step
    } else {
        v
    }
}

/// Lossy block coding without a transform: every 8x8 block keeps its mean
/// on a fine grid and its residual on a coarse grid.
fn block_quantize(p: &mut Plane, residual_step: f32) {
    if residual_step <= 0.0 {
        return;
    }
    let mean_step = residual_step / 4.0;
    for by in (0..p.h).step_by(BLOCK) {
        for bx in (0..p.w).step_by(BLOCK) {
            let ys = by..(by + BLOCK).min(p.h);
            let xs = bx..(bx + BLOCK).min(p.w);
            let n = (ys.len() * xs.len()) as f32;
            let mut mean = 0.0;
            for y in ys.clone() {
                for x in xs.clone() {
                    mean += p.at(y, x);
                }
            }
            mean /= n;
            let qmean = quantize(mean, mean_step);
            for y in ys.clone() {
                for x in xs.clone() {
                    let i = y * p.w + x;
                    p.data[i] = qmean + quantize(p.data[i] - mean, residual_step);
                }
            }
        }
    }
}

/// Bicubic 4x downsampling of (B,3,H,W) images, unclipped.
pub fn bicubic_downscale4(hr: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = hr.dims4()?;
    if h % SCALE != 0 || w % SCALE != 0 {
        return Err(dim_err!("{h}x{w} not divisible by {SCALE}"));
    }
    imaging::resize_bicubic(hr, h / SCALE, w / SCALE)
}

/// Degrade (B,3,H,W) HR images into (B,3,H/4,W/4) LR images.
pub fn degrade(hr: &Tensor, params: &DegradationParams) -> Result<Tensor> {
    params.validate()?;
    let (b, c, h, w) = hr.dims4()?;
    if c != 3 {
        return Err(dim_err!("expected 3 channels, got {c}"));
    }
    if h % SCALE != 0 || w % SCALE != 0 {
        return Err(dim_err!("{h}x{w} not divisible by {SCALE}"));
    }
    let (_, planes) = to_planes(hr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0f32, params.noise_sigma as f32).expect("validated sigma");
    let step = params.residual_step();
    let out: Vec<Plane> = planes
        .iter()
        .map(|p| {
            let blurred = gaussian_blur_plane(p, params.blur_sigma);
            let mut lr = resize_bicubic_plane(&blurred, h / SCALE, w / SCALE);
            if params.noise_sigma > 0.0 {
                for v in lr.data.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            block_quantize(&mut lr, step);
            for v in lr.data.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            lr
        })
        .collect();
    from_planes(&out, b)
}

/// One line of the pair manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub lr_path: String,
    pub hr_path: String,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub quality: u8,
    pub seed: u64,
}

impl PairRecord {
    pub fn params(&self) -> DegradationParams {
        DegradationParams {
            blur_sigma: self.blur_sigma,
            noise_sigma: self.noise_sigma,
            compression_quality: self.quality,
            seed: self.seed,
        }
    }
}

pub const PAIR_MANIFEST: &str = "pairs.jsonl";

/// Path as stored in a manifest: relative to `base` when inside it.
pub(crate) fn manifest_path(path: &Path, base: &Path) -> String {
    match path.strip_prefix(base) {
        Ok(rel) => rel.to_string_lossy().into_owned(),
        Err(_) => path.to_string_lossy().into_owned(),
    }
}

pub fn resolve_path(stored: &str, base: &Path) -> PathBuf {
    let p = Path::new(stored);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|x| x.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Degrade every PNG of `hr_dir` into `out_dir/lr/` and write
/// `out_dir/pairs.jsonl`. Each image `i` draws its parameters and noise
/// from the seed `seed ^ i`, so results do not depend on processing order.
pub fn make_pairs(
    hr_dir: &Path,
    out_dir: &Path,
    range: &DegradationRange,
    seed: u64,
) -> Result<Vec<PairRecord>> {
    let files = list_pngs(hr_dir)?;
    if files.is_empty() {
        return Err(arg_err!("no PNG images in {}", hr_dir.display()));
    }
    let lr_dir = out_dir.join("lr");
    fs::create_dir_all(&lr_dir).map_err(|e| Error::io(&lr_dir, e))?;
    let mut records = Vec::new();
    for (i, file) in files.iter().enumerate() {
        let pair_seed = seed ^ i as u64;
        let hr = match imaging::load_png(file) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                continue;
            }
        };
        let (_, h, w) = hr.dims3()?;
        if h % SCALE != 0 || w % SCALE != 0 {
            log::warn!(
                "skipping {}: {h}x{w} not divisible by {SCALE}",
                file.display()
            );
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
        let params = range.sample(&mut rng, pair_seed);
        let lr = degrade(&hr.unsqueeze(0)?, &params)?.squeeze(0)?;
        let name = file.file_name().expect("listed file has a name");
        let lr_path = lr_dir.join(name);
        imaging::save_png(&lr_path, &lr)?;
        let hr_abs = if file.is_absolute() {
            file.clone()
        } else {
            std::env::current_dir()
                .map_err(|e| Error::io(file, e))?
                .join(file)
        };
        let out_abs = if out_dir.is_absolute() {
            out_dir.to_path_buf()
        } else {
            std::env::current_dir()
                .map_err(|e| Error::io(out_dir, e))?
                .join(out_dir)
        };
        records.push(PairRecord {
            lr_path: manifest_path(&lr_path, out_dir),
            hr_path: manifest_path(&hr_abs, &out_abs),
            blur_sigma: params.blur_sigma,
            noise_sigma: params.noise_sigma,
            quality: params.compression_quality,
            seed: pair_seed,
        });
    }
    write_jsonl(&out_dir.join(PAIR_MANIFEST), &records)?;
    Ok(records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn read_pair_manifest(path: &Path) -> Result<Vec<PairRecord>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn flat(t: &Tensor) -> Vec<f32> {
        t.to_dtype(DType::F32)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    fn test_image(h: usize, w: usize) -> Tensor {
        let data: Vec<f32> = (0..3 * h * w)
            .map(|i| ((i * 37 % 101) as f32 / 100.0).clamp(0.0, 1.0))
            .collect();
        Tensor::from_vec(data, (1, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn identity_params_reduce_to_bicubic() {
        let hr = test_image(32, 32);
        let lr = degrade(&hr, &DegradationParams::identity(0)).unwrap();
        let bic = bicubic_downscale4(&hr).unwrap().clamp(0f32, 1f32).unwrap();
        assert_eq!(lr.dims(), &[1, 3, 8, 8]);
        assert_eq!(flat(&lr), flat(&bic));
    }

    #[test]
    fn degrade_is_seeded() {
        let hr = test_image(32, 32);
        let p = DegradationParams {
            blur_sigma: 1.0,
            noise_sigma: 0.05,
            compression_quality: 70,
            seed: 11,
        };
        assert_eq!(
            flat(&degrade(&hr, &p).unwrap()),
            flat(&degrade(&hr, &p).unwrap())
        );
    }

    #[test]
    fn noise_std_on_gray_matches_sigma() {
        let hr = (Tensor::ones((1, 3, 256, 256), DType::F32, &Device::Cpu).unwrap() * 0.5).unwrap();
        let p = DegradationParams {
            noise_sigma: 0.1,
            ..DegradationParams::identity(5)
        };
        let lr = degrade(&hr, &p).unwrap();
        let v = flat(&lr);
        let n = v.len() as f64;
        let mean = v.iter().map(|&x| x as f64 - 0.5).sum::<f64>() / n;
        let var = v
            .iter()
            .map(|&x| (x as f64 - 0.5 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!((var.sqrt() - 0.1).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn noise_level_is_monotone_in_deviation() {
        let hr = test_image(64, 64);
        let bic = flat(&bicubic_downscale4(&hr).unwrap());
        let mut last = -1.0;
        for sigma in [0.01, 0.05, 0.1] {
            let p = DegradationParams {
                noise_sigma: sigma,
                ..DegradationParams::identity(3)
            };
            let lr = flat(&degrade(&hr, &p).unwrap());
            let dev = lr
                .iter()
                .zip(&bic)
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / lr.len() as f64;
            assert!(dev >= last);
            last = dev;
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let hr = test_image(32, 32);
        let p = DegradationParams {
            blur_sigma: 2.0,
            noise_sigma: 0.3,
            compression_quality: 10,
            seed: 1,
        };
        assert!(flat(&degrade(&hr, &p).unwrap())
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_dims_and_params() {
        let hr = test_image(30, 32);
        assert!(matches!(
            degrade(&hr, &DegradationParams::identity(0)),
            Err(Error::Dim(_))
        ));
        let p = DegradationParams {
            compression_quality: 0,
            ..DegradationParams::identity(0)
        };
        assert!(degrade(&test_image(8, 8), &p).is_err());
    }

    #[test]
    fn empty_dir_is_an_argument_error() {
        let dir = tempfile::tempdir().unwrap();
        let range = DegradationRange::fixed(&DegradationParams::identity(0));
        assert!(matches!(
            make_pairs(dir.path(), dir.path(), &range, 0),
            Err(Error::Arg(_))
        ));
    }
}
