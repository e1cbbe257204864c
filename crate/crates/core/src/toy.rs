//! Synthetic shapes dataset: one coloured shape per image, captioned with
//! its shape and colour tokens.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{
    make_pairs, read_jsonl, read_pair_manifest, resolve_path, write_jsonl, DegradationRange,
    PairRecord, PAIR_MANIFEST,
};
use crate::error::{arg_err, Error, Result};
use crate::imaging::{load_png, save_png};

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.20, 0.30, 0.95]),
    ("yellow", [0.95, 0.85, 0.15]),
    ("magenta", [0.85, 0.20, 0.85]),
    ("cyan", [0.15, 0.85, 0.85]),
];
pub const BACKGROUND: f32 = 0.12;
pub const CAPTION_MANIFEST: &str = "captions.jsonl";
/// Colour tokens follow the four shape tokens.
pub const COLOR_TOKEN_OFFSET: u32 = SHAPES.len() as u32;

pub fn num_classes() -> usize {
    SHAPES.len() * COLORS.len()
}

/// Caption tokens of a (shape, colour) class.
pub fn caption_tokens(shape: usize, color: usize) -> Vec<u32> {
    vec![shape as u32, COLOR_TOKEN_OFFSET + color as u32]
}

/// Every attribute combination in class order (shape-major).
pub fn all_captions() -> Vec<Vec<u32>> {
    (0..SHAPES.len())
        .flat_map(|s| (0..COLORS.len()).map(move |c| caption_tokens(s, c)))
        .collect()
}

/// Class index of a caption in [`all_captions`] order.
pub fn class_of(tokens: &[u32]) -> Option<usize> {
    match tokens {
        [s, c] if (*s as usize) < SHAPES.len() && *c >= COLOR_TOKEN_OFFSET => {
            let c = (*c - COLOR_TOKEN_OFFSET) as usize;
            (c < COLORS.len()).then_some(*s as usize * COLORS.len() + c)
        }
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub shape: usize,
    pub color: usize,
    pub cx: f32,
    pub cy: f32,
    pub size: f32,
}

fn inside(spec: &ShapeSpec, x: f32, y: f32) -> bool {
    let (dx, dy) = (x - spec.cx, y - spec.cy);
    let r = spec.size / 2.0;
    match spec.shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r && dy.abs() <= r,
        2 => {
            // Apex up, base at the bottom.
            if dy < -r || dy > r {
                return false;
            }
            let half_width = r * (dy + r) / (2.0 * r);
            dx.abs() <= half_width
        }
        _ => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

/// Render a shape on the dark background with 4x4 supersampling; values
/// are quantized to 8 bits so PNG roundtrips are exact.
pub fn render(spec: &ShapeSpec, size: usize) -> Tensor {
    const SS: usize = 4;
    let color = COLORS[spec.color].1;
    let mut data = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f32 + (sx as f32 + 0.5) / SS as f32;
                    let py = y as f32 + (sy as f32 + 0.5) / SS as f32;
                    hits += usize::from(inside(spec, px, py));
                }
            }
            let a = hits as f32 / (SS * SS) as f32;
            for c in 0..3 {
                let v = BACKGROUND * (1.0 - a) + color[c] * a;
                data[c * size * size + y * size + x] = (v * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::from_vec(data, (3, size, size), &Device::Cpu).expect("sized buffer")
}

/// Attributes of image `i`: classes cycle so any 24 consecutive images
/// cover the full grid; position and size are random.
pub fn sample_spec(i: usize, rng: &mut impl Rng, image_size: usize) -> ShapeSpec {
    let shape = i % SHAPES.len();
    let color = (i / SHAPES.len()) % COLORS.len();
    let s = image_size as f32;
    let size = rng.random_range(0.44 * s..0.69 * s);
    let margin = size / 2.0 + 2.0;
    ShapeSpec {
        shape,
        color,
        cx: rng.random_range(margin..s - margin),
        cy: rng.random_range(margin..s - margin),
        size,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub hr_path: String,
    pub tokens: Vec<u32>,
    pub shape: String,
    pub color: String,
}

/// Manifests written by [`make_toy_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyManifest {
    pub captions: Vec<CaptionRecord>,
    pub pairs: Vec<PairRecord>,
}

/// Render `n` images into `out_dir/hr`, write `captions.jsonl`, then
/// degrade them into `out_dir/lr` with `pairs.jsonl`.
pub fn make_toy_dataset(
    n: usize,
    seed: u64,
    out_dir: &Path,
    image_size: usize,
    range: &DegradationRange,
) -> Result<ToyManifest> {
    if n == 0 {
        return Err(arg_err!("dataset size must be at least 1"));
    }
    let hr_dir = out_dir.join("hr");
    fs::create_dir_all(&hr_dir).map_err(|e| Error::io(&hr_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut captions = Vec::with_capacity(n);
    for i in 0..n {
        let spec = sample_spec(i, &mut rng, image_size);
        let name = format!("{i:05}.png");
        save_png(&hr_dir.join(&name), &render(&spec, image_size))?;
        captions.push(CaptionRecord {
            hr_path: format!("hr/{name}"),
            tokens: caption_tokens(spec.shape, spec.color),
            shape: SHAPES[spec.shape].to_string(),
            color: COLORS[spec.color].0.to_string(),
        });
    }
    write_jsonl(&out_dir.join(CAPTION_MANIFEST), &captions)?;
    let pairs = make_pairs(&hr_dir, out_dir, range, seed)?;
    Ok(ToyManifest { captions, pairs })
}

/// One training/evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub hr: Tensor,
    pub lr: Tensor,
    pub tokens: Vec<u32>,
}

/// A paired dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Load `pairs.jsonl` (and `captions.jsonl` when present) from `root`.
    pub fn load(root: &Path) -> Result<Self> {
        Self::load_manifest(&root.join(PAIR_MANIFEST))
    }

    /// Load the pairs listed in a manifest; captions are looked up in a
    /// `captions.jsonl` next to it.
    pub fn load_manifest(manifest: &Path) -> Result<Self> {
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let pairs = read_pair_manifest(manifest)?;
        let cap_path = root.join(CAPTION_MANIFEST);
        let captions: Vec<CaptionRecord> = if cap_path.exists() {
            read_jsonl(&cap_path)?
        } else {
            Vec::new()
        };
        let by_path: HashMap<PathBuf, &Vec<u32>> = captions
            .iter()
            .map(|c| (resolve_path(&c.hr_path, &root), &c.tokens))
            .collect();
        let mut samples = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let hr_path = resolve_path(&p.hr_path, &root);
            let tokens = by_path
                .get(&hr_path)
                .map(|t| t.to_vec())
                .unwrap_or_default();
            samples.push(Sample {
                name: hr_path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                hr: load_png(&hr_path)?,
                lr: load_png(&resolve_path(&p.lr_path, &root))?,
                tokens,
            });
        }
        Ok(Self { root, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stack the selected samples into (B,3,H,W) HR and LR batches.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Vec<Vec<u32>>)> {
        let hr: Vec<&Tensor> = idx.iter().map(|&i| &self.samples[i].hr).collect();
        let lr: Vec<&Tensor> = idx.iter().map(|&i| &self.samples[i].lr).collect();
        let tokens = idx
            .iter()
            .map(|&i| self.samples[i].tokens.clone())
            .collect();
        Ok((Tensor::stack(&hr, 0)?, Tensor::stack(&lr, 0)?, tokens))
    }

    /// Fail unless every sample carries a caption.
    pub fn require_captions(&self) -> Result<()> {
        match self.samples.iter().find(|s| s.tokens.is_empty()) {
            Some(s) => Err(arg_err!("sample {} has no caption", s.name)),
            None => Ok(()),
        }
    }
}
