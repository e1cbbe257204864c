//! Pixel-domain helpers: PNG I/O, Gaussian blur and bicubic resampling.
//!
//! Images are (B,3,H,W) or (3,H,W) tensors with values in [0,1].

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{dim_err, Error, Result};

/// Read an 8-bit RGB PNG as a (3,H,W) f32 tensor.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.into_raw();
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f32::from(px[c]) / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// Quantize a [0,1] value to 8 bits.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a (3,H,W) tensor as an 8-bit RGB PNG.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(dim_err!("expected 3 channels, got {c}"));
    }
    let data: Vec<f32> = image.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut raw = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            raw[3 * i + ch] = to_u8(data[ch * h * w + i]);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized to image")
        .save(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// Round every value to the nearest 8-bit level, matching a PNG roundtrip.
pub fn quantize_8bit(image: &Tensor) -> Result<Tensor> {
    let dims = image.dims().to_vec();
    let data: Vec<f32> = image.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let q: Vec<f32> = data.iter().map(|&v| f32::from(to_u8(v)) / 255.0).collect();
    Ok(Tensor::from_vec(q, dims, &Device::Cpu)?)
}

/// A single-channel f32 plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    fn transpose(&self) -> Plane {
        let mut out = Plane::new(self.w, self.h);
        for y in 0..self.h {
            for x in 0..self.w {
                out.data[x * self.h + y] = self.at(y, x);
            }
        }
        out
    }
}

/// Split a (B,3,H,W) tensor into planes, batch-major then channel.
pub fn to_planes(images: &Tensor) -> Result<(usize, Vec<Plane>)> {
    let (b, _, h, w) = images.dims4()?;
    let data: Vec<f32> = images.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let planes = data
        .chunks_exact(h * w)
        .map(|d| Plane {
            h,
            w,
            data: d.to_vec(),
        })
        .collect();
    Ok((b, planes))
}

/// Reassemble planes produced by [`to_planes`].
pub fn from_planes(planes: &[Plane], batch: usize) -> Result<Tensor> {
    let (h, w) = (planes[0].h, planes[0].w);
    let c = planes.len() / batch;
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor::from_vec(data, (batch, c, h, w), &Device::Cpu)?)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

fn convolve_rows(p: &Plane, kernel: &[f32]) -> Plane {
    let r = (kernel.len() / 2) as isize;
    let mut out = Plane::new(p.h, p.w);
    for y in 0..p.h {
        for x in 0..p.w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + k as isize - r, p.w);
                acc += kv * p.at(y, sx);
            }
            out.data[y * p.w + x] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with reflect padding; sigma 0 is the identity.
pub fn gaussian_blur_plane(p: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let sum: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let rows = convolve_rows(p, &kernel);
    convolve_rows(&rows.transpose(), &kernel).transpose()
}

fn cubic(x: f64) -> f64 {
    // Keys kernel with a = -0.5.
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Per-output-sample taps for 1-D bicubic resampling. Downscaling widens
/// the kernel by the scale factor (antialiasing), as in common imresize
/// implementations.
fn resample_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = out_len as f64 / in_len as f64;
    let support_scale = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * support_scale;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let wgt = cubic((i as f64 - center) / support_scale);
                if wgt != 0.0 {
                    let idx = i.clamp(0, in_len as isize - 1) as usize;
                    match taps.iter_mut().find(|(j, _)| *j == idx) {
                        Some(t) => t.1 += wgt,
                        None => taps.push((idx, wgt)),
                    }
                }
            }
            let sum: f64 = taps.iter().map(|t| t.1).sum();
            taps.into_iter()
                .map(|(i, w)| (i, (w / sum) as f32))
                .collect()
        })
        .collect()
}

pub fn resize_bicubic_plane(p: &Plane, out_h: usize, out_w: usize) -> Plane {
    let wx = resample_weights(p.w, out_w);
    let mut tmp = Plane::new(p.h, out_w);
    for y in 0..p.h {
        for (x, taps) in wx.iter().enumerate() {
            tmp.data[y * out_w + x] = taps.iter().map(|&(i, w)| w * p.at(y, i)).sum();
        }
    }
    let wy = resample_weights(p.h, out_h);
    let mut out = Plane::new(out_h, out_w);
    for (y, taps) in wy.iter().enumerate() {
        for x in 0..out_w {
            out.data[y * out_w + x] = taps.iter().map(|&(i, w)| w * tmp.at(i, x)).sum();
        }
    }
    out
}

fn map_planes(images: &Tensor, f: impl Fn(&Plane) -> Plane) -> Result<Tensor> {
    let squeeze = images.rank() == 3;
    let images = if squeeze {
        images.unsqueeze(0)?
    } else {
        images.clone()
    };
    let b = images.dim(0)?;
    let (_, planes) = to_planes(&images)?;
    let out: Vec<Plane> = planes.iter().map(f).collect();
    let t = from_planes(&out, b)?;
    Ok(if squeeze { t.squeeze(0)? } else { t })
}

pub fn gaussian_blur(images: &Tensor, sigma: f64) -> Result<Tensor> {
    map_planes(images, |p| gaussian_blur_plane(p, sigma))
}

/// Bicubic resize of (B,3,H,W) or (3,H,W) images; no clipping applied.
pub fn resize_bicubic(images: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    map_planes(images, |p| resize_bicubic_plane(p, out_h, out_w))
}

/// Bicubic 4x upsampling clipped to [0,1]: the classical SR baseline.
pub fn bicubic_upscale4(images: &Tensor) -> Result<Tensor> {
    let (h, w) = {
        let d = images.dims();
        (d[d.len() - 2], d[d.len() - 1])
    };
    Ok(resize_bicubic(images, 4 * h, 4 * w)?.clamp(0f32, 1f32)?)
}
