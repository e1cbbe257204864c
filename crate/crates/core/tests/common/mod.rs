//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance harness. Nothing here calls into the code under test except to
//! build tensors.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use coser::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn tensor3(batch: &[Mat]) -> Tensor {
    let (t, c) = (batch[0].len(), batch[0][0].len());
    let flat: Vec<f64> = batch.iter().flatten().flatten().copied().collect();
    Tensor::from_vec(flat, (batch.len(), t, c), &Device::Cpu).unwrap()
}

pub fn to_mats(t: &Tensor) -> Vec<Mat> {
    t.to_dtype(DType::F64).unwrap().to_vec3().unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let s = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    s.clamp(-1.0, 1.0)
}

/// Similarity matrix of one batch element, explicit loops.
pub fn similarity(q: &Mat, k: &Mat) -> Mat {
    q.iter()
        .map(|qi| k.iter().map(|kj| cosine(qi, kj)).collect())
        .collect()
}

/// One-hot reference attention before the output projection, written from
/// its definition: S = cosine, H = one-hot argmax (first maximum wins),
/// T = max S, output row = T * V[argmax].
pub fn one_hot_oracle(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let s = similarity(q, k);
    s.iter()
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            v[best].iter().map(|x| x * row[best]).collect()
        })
        .collect()
}

/// Gap between the largest and second largest similarity of every query.
pub fn argmax_margin(q: &Mat, k: &Mat) -> f64 {
    similarity(q, k)
        .iter()
        .map(|row| {
            let mut sorted = row.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted.len() > 1 {
                sorted[0] - sorted[1]
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::INFINITY, f64::min)
}

/// Supervision-target slicer: the window of at most `t_e` tokens ending at
/// the class token (inclusive), end-filled with the class token.
pub fn slice_oracle(l: &Mat, t_cls: usize, t_e: usize) -> Mat {
    let take = t_e.min(t_cls + 1);
    let mut out: Mat = l[t_cls + 1 - take..=t_cls].to_vec();
    while out.len() < t_e {
        out.push(l[t_cls].clone());
    }
    out
}

pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1e-9 {
            return (self.analytic - self.numeric).abs();
        }
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Central finite differences on `per_tensor` random entries of every
/// trainable parameter whose name starts with one of `prefixes`.
/// `loss` must rebuild its graph from the store on every call.
pub fn grad_check(
    store: &ParamStore,
    prefixes: &[&str],
    per_tensor: usize,
    seed: u64,
    loss: &dyn Fn() -> Tensor,
) -> Vec<GradSample> {
    let grads = loss().backward().unwrap();
    let mut rng = rng(seed);
    let h = 1e-6;
    let mut out = Vec::new();
    for name in store.names() {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let p = store.get_param(&name).unwrap();
        if !p.trainable {
            continue;
        }
        let var = p.var;
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let g: Vec<f64> = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1().unwrap())
            .unwrap_or_else(|| vec![0.0; base.len()]);
        for _ in 0..per_tensor.min(base.len()) {
            let i = rng.random_range(0..base.len());
            let eval = |delta: f64| -> f64 {
                let mut w = base.clone();
                w[i] += delta;
                var.set(&Tensor::from_vec(w, var.dims(), &Device::Cpu).unwrap())
                    .unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), var.dims(), &Device::Cpu).unwrap())
                .unwrap();
            out.push(GradSample {
                name: name.clone(),
                index: i,
                analytic: g[i],
                numeric,
            });
        }
    }
    out
}
