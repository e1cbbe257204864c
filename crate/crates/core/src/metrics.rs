//! Fidelity metrics on [0,1] RGB images.

use candle_core::{DType, Tensor};

use crate::error::{dim_err, Result};
use crate::imaging::{gaussian_blur_plane, Plane};

/// Reported PSNR of identical images.
pub const PSNR_CAP: f64 = 100.0;

fn pixels(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

fn check(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(dim_err!("metric inputs {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for peak value 1, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    let (x, y) = (pixels(a)?, pixels(b)?);
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn luminance(t: &Tensor) -> Result<Plane> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(dim_err!("expected an RGB image, got {c} channels"));
    }
    let v = pixels(t)?;
    let n = h * w;
    let data = (0..n)
        .map(|i| (0.299 * v[i] + 0.587 * v[n + i] + 0.114 * v[2 * n + i]) as f32)
        .collect();
    Ok(Plane { h, w, data })
}

/// Structural similarity on luminance with an 11x11 Gaussian window
/// (sigma 1.5), averaged over the image. Inputs are (3,H,W).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    let (x, y) = (luminance(a)?, luminance(b)?);
    let map = |f: &dyn Fn(f32, f32) -> f32| Plane {
        h: x.h,
        w: x.w,
        data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
    };
    let blur = |p: &Plane| gaussian_blur_plane(p, 1.5);
    let mx = blur(&x);
    let my = blur(&y);
    let mxx = blur(&map(&|p, _| p * p));
    let myy = blur(&map(&|_, q| q * q));
    let mxy = blur(&map(&|p, q| p * q));
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for i in 0..mx.data.len() {
        let (ux, uy) = (mx.data[i] as f64, my.data[i] as f64);
        let vx = mxx.data[i] as f64 - ux * ux;
        let vy = myy.data[i] as f64 - uy * uy;
        let cov = mxy.data[i] as f64 - ux * uy;
        total +=
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.data.len() as f64)
}
