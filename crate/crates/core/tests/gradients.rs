//! Analytic gradients against central finite differences (f64).

mod common;

use candle_core::{DType, Tensor};
use coser::adapter::{cognitive_loss, AdapterConfig, CognitiveAdapter};
use coser::embedding::{EmbeddingKind, TokenEmbedding};
use coser::nn::{position_encoding_2d, Attention, Linear};
use coser::params::ParamStore;
use coser::unet::{lr_attention, one_hot_reference_attention};

use common::{argmax_margin, grad_check, rand_mat, rng, tensor3, GradSample};

const TOL: f64 = 1e-3;

fn assert_close(samples: &[GradSample]) {
    assert!(!samples.is_empty());
    for s in samples {
        assert!(
            s.rel_err() < TOL,
            "{}[{}]: analytic {} numeric {}",
            s.name,
            s.index,
            s.analytic,
            s.numeric
        );
    }
}

fn attention(store: &ParamStore, prefix: &str, dim: usize, heads: usize) -> Attention {
    let pb = store.root().pp(prefix);
    Attention {
        q: Linear::no_bias(&pb.pp("q"), dim, dim).unwrap(),
        k: Linear::no_bias(&pb.pp("k"), dim, dim).unwrap(),
        v: Linear::no_bias(&pb.pp("v"), dim, dim).unwrap(),
        // Random rather than zero so the projections receive gradient.
        o: Linear::new(&pb.pp("o"), dim, dim).unwrap(),
        heads,
    }
}

#[test]
fn adapter_matches_finite_differences() {
    let store = ParamStore::new(11, DType::F64);
    let cfg = AdapterConfig {
        image_dim: 6,
        text_dim: 8,
        num_queries: 3,
        depth: 2,
        heads: 2,
    };
    let adapter = CognitiveAdapter::new(&store.root().pp("adapter"), cfg).unwrap();
    let mut r = rng(1);
    let image = TokenEmbedding {
        data: tensor3(&[rand_mat(&mut r, 5, 6), rand_mat(&mut r, 5, 6)]),
        kind: EmbeddingKind::Image,
    };
    let target = tensor3(&[rand_mat(&mut r, 3, 8), rand_mat(&mut r, 3, 8)]);
    let loss = || cognitive_loss(&adapter.forward(&image).unwrap(), &target).unwrap();
    assert_close(&grad_check(&store, &["adapter/"], 3, 2, &loss));
}

#[test]
fn lr_attention_matches_finite_differences() {
    let store = ParamStore::new(12, DType::F64);
    let attn = attention(&store, "lr", 8, 2);
    let mut r = rng(3);
    let z = tensor3(&[rand_mat(&mut r, 4, 8)]);
    let x = tensor3(&[rand_mat(&mut r, 4, 8)]);
    let w = tensor3(&[rand_mat(&mut r, 4, 8)]);
    let pos = position_encoding_2d(2, 2, 8, DType::F64).unwrap();
    let loss = || {
        let out = lr_attention(&z, &z, &x, &attn, Some(&pos)).unwrap();
        (out * &w).unwrap().sum_all().unwrap()
    };
    assert_close(&grad_check(&store, &["lr/"], 4, 4, &loss));
}

#[test]
fn one_hot_attention_matches_finite_differences_away_from_ties() {
    let store = ParamStore::new(13, DType::F64);
    let attn = attention(&store, "ref", 6, 1);
    let mut r = rng(5);
    // Draw inputs until every query's best key leads by more than 0.1 after
    // projection, so small perturbations cannot flip the argmax.
    let (x, refs) = loop {
        let x = tensor3(&[rand_mat(&mut r, 3, 6)]);
        let refs = tensor3(&[rand_mat(&mut r, 4, 6)]);
        let q = common::to_mats(&attn.q.forward(&x).unwrap());
        let k = common::to_mats(&attn.k.forward(&refs).unwrap());
        if argmax_margin(&q[0], &k[0]) > 0.1 {
            break (x, refs);
        }
    };
    let w: Tensor = tensor3(&[rand_mat(&mut r, 3, 6)]);
    let loss = || {
        let out = one_hot_reference_attention(
            &attn.q.forward(&x).unwrap(),
            &attn.k.forward(&refs).unwrap(),
            &attn.v.forward(&refs).unwrap(),
            &attn.o,
        )
        .unwrap();
        (out * &w).unwrap().sum_all().unwrap()
    };
    let samples = grad_check(&store, &["ref/"], 4, 6, &loss);
    // Similarity scaling makes the q and k projections carry gradient too.
    assert!(samples
        .iter()
        .any(|s| s.name.starts_with("ref/q") && s.analytic != 0.0));
    assert!(samples
        .iter()
        .any(|s| s.name.starts_with("ref/k") && s.analytic != 0.0));
    assert_close(&samples);
}
