//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 8 and 9 train on a 1000-image toy set with `configs/toy.toml`
//! and take most of an hour on one CPU core. The process exits 0 even when
//! a criterion fails so the workspace test run stays usable; set
//! `COSER_ACCEPTANCE_STRICT=1` to turn failures into a nonzero exit.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use coser::adapter::{supervision_target, AdapterConfig, CognitiveAdapter};
use coser::config::RunConfig;
use coser::diffusion::{
    cfg_combine, decode_latent, encode_latent, sample, Denoiser, SampleOptions,
};
use coser::embedding::{EmbeddingKind, TextEncoding, TokenEmbedding};
use coser::eval::{evaluate, retrieval_accuracy};
use coser::model::{BaseModel, CognitiveEncoder, SrModel};
use coser::nn::{position_encoding_2d, Attention, Linear};
use coser::params::ParamStore;
use coser::pipeline::{Pipeline, SrFlags};
use coser::reference::generate_reference;
use coser::toy::{make_toy_dataset, Dataset};
use coser::train::{train_base, train_cognitive, SrTrainer};
use coser::unet::{lr_attention, one_hot_reference_attention};

use common::{
    argmax_margin, grad_check, one_hot_oracle, rand_mat, slice_oracle, tensor3, to_mats, Mat,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F32)
        .unwrap()
        .to_vec1::<f32>()
        .unwrap()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    RunConfig::load(Some(&path), &[]).expect("configs/toy.toml")
}

/// A U-Net small enough for the structural criteria.
fn small_config() -> RunConfig {
    RunConfig {
        image_size: 32,
        image_dim: 16,
        text_dim: 16,
        t_e: 4,
        adapter_heads: 2,
        preprocessor_channels: 8,
        preprocessor_blocks: 1,
        unet_channels: [8, 16, 16],
        unet_groups: 4,
        time_dim: 16,
        sample_steps: 5,
        ref_pool: 4,
        batch_size: 4,
        steps: 5,
        log_every: 0,
        ..RunConfig::default()
    }
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn one_hot_oracle_criterion() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let (b, tx, tr, c) = (
            rng.random_range(1..=2),
            rng.random_range(1..=5),
            rng.random_range(1..=6),
            rng.random_range(1..=8),
        );
        let q: Vec<Mat> = (0..b).map(|_| rand_mat(&mut rng, tx, c)).collect();
        let k: Vec<Mat> = (0..b).map(|_| rand_mat(&mut rng, tr, c)).collect();
        let v: Vec<Mat> = (0..b).map(|_| rand_mat(&mut rng, tr, c)).collect();
        let store = ParamStore::new(rng.random(), DType::F64);
        let o = Linear::new(&store.root().pp("o"), c, c).unwrap();
        let w: Mat = o.weight.to_vec2().unwrap();
        let bias: Vec<f64> = o.bias.as_ref().unwrap().to_vec1().unwrap();
        let got = to_mats(
            &one_hot_reference_attention(&tensor3(&q), &tensor3(&k), &tensor3(&v), &o).unwrap(),
        );
        for i in 0..b {
            let pre = one_hot_oracle(&q[i], &k[i], &v[i]);
            for (x, row) in pre.iter().enumerate() {
                for (j, out) in got[i][x].iter().enumerate() {
                    let want = bias[j] + (0..c).map(|m| w[j][m] * row[m]).sum::<f64>();
                    worst = worst.max((out - want).abs());
                }
            }
        }
    }
    // Duplicated keys: every similarity ties, so value row 0 must win.
    let mut ties_ok = true;
    for case in 0..200 {
        let (tx, tr, c) = (
            rng.random_range(1..=5),
            rng.random_range(2..=6),
            rng.random_range(1..=8),
        );
        let q = rand_mat(&mut rng, tx, c);
        // Exact copies: scaled copies tie only up to rounding.
        let k: Mat = vec![rand_mat(&mut rng, 1, c).remove(0); tr];
        let v: Mat = (0..tr).map(|r| vec![r as f64 + 1.0; c]).collect();
        let got = to_mats(
            &coser::unet::one_hot_select(
                &tensor3(&[q.clone()]),
                &tensor3(&[k.clone()]),
                &tensor3(&[v]),
            )
            .unwrap(),
        );
        let sims = common::similarity(&q, &k);
        for (x, row) in got[0].iter().enumerate() {
            // Row equals V[0] * T; V[0] is all ones so each entry is T.
            let t = sims[x].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if row.iter().any(|y| (y - t).abs() > 1e-9) {
                ties_ok = false;
                eprintln!("tie case {case} query {x}: {row:?}, T = {t}");
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-6 && ties_ok && secs < 10.0,
        format!(
            "max abs error {worst:.2e} over 1000 cases, ties lowest-index {ties_ok}, {secs:.2} s"
        ),
    )
}

fn supervision_oracle_criterion() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut cases, mut bad) = (0, 0);
    for t_l in 1..=8 {
        let l = rand_mat(&mut rng, t_l, 5);
        for t_cls in 0..t_l {
            let text = TextEncoding {
                embedding: TokenEmbedding {
                    data: tensor3(&[l.clone()]),
                    kind: EmbeddingKind::Text,
                },
                t_cls: vec![t_cls],
            };
            for t_e in 1..=t_l {
                cases += 1;
                let got = to_mats(&supervision_target(&text, t_e).unwrap()).remove(0);
                if got != slice_oracle(&l, t_cls, t_e) || got.last() != Some(&l[t_cls]) {
                    bad += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        bad == 0 && secs < 1.0,
        format!("{cases} cases, {bad} mismatches, {secs:.3} s"),
    )
}

fn neutrality_criterion() -> Verdict {
    let cfg = desk_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut identical = 0;
    for i in 0..10 {
        let store = ParamStore::new(100 + i, DType::F32);
        let base = BaseModel::new(&store, &cfg).unwrap();
        let side = 8 * rng.random_range(1..=2);
        let b = rng.random_range(1..=2);
        let rand = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| {
            let v: Vec<f32> = (0..b * 48 * side * side)
                .map(|_| rng.random_range(lo..hi))
                .collect();
            Tensor::from_vec(v, (b, 48, side, side), &Device::Cpu).unwrap()
        };
        let z = rand(&mut rng, -3.0, 3.0);
        let lr = rand(&mut rng, 0.0, 2.0);
        let r = rand(&mut rng, 0.0, 2.0);
        let e: Vec<f32> = (0..b * cfg.t_e * cfg.text_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let e = Tensor::from_vec(e, (b, cfg.t_e, cfg.text_dim), &Device::Cpu).unwrap();
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..1000)).collect();
        let plain = base.predict_noise(&z, &t, &e).unwrap();
        let sr = SrModel::new(&store, &cfg).unwrap();
        let with_ref = sr.conditioned(&lr, &[r]).predict_noise(&z, &t, &e).unwrap();
        let lr_only = sr.conditioned(&lr, &[]).predict_noise(&z, &t, &e).unwrap();
        if bits(&plain) == bits(&with_ref) && bits(&plain) == bits(&lr_only) {
            identical += 1;
        }
    }
    verdict(
        identical == 10,
        format!("{identical}/10 inputs bitwise identical"),
    )
}

fn freeze_criterion() -> Verdict {
    let cfg = small_config();
    let dir = TempDir::new().unwrap();
    make_toy_dataset(24, 4, dir.path(), cfg.image_size, &cfg.degradation()).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    let base = train_base(&cfg, &data).unwrap().archive;
    let cognitive = train_cognitive(&cfg, &data).unwrap().archive;
    let mut trainer = SrTrainer::new(&cfg, &data, &base, &cognitive).unwrap();
    let unet = &trainer.model.base.unet;
    let mut copies = 0;
    let mut copies_equal = true;
    for (blk, ext) in unet.aia_blocks().iter().zip(unet.aia().unwrap()) {
        for a in [&ext.lr, &ext.reference] {
            for (x, y) in [
                (&a.q, &blk.self_attn.q),
                (&a.k, &blk.self_attn.k),
                (&a.v, &blk.self_attn.v),
            ] {
                copies += 1;
                copies_equal &= bits(&x.weight) == bits(&y.weight);
            }
        }
    }
    trainer.generate_pool().unwrap();
    let before = trainer.store.frozen_digest().unwrap();
    for _ in 0..100 {
        trainer.step().unwrap();
    }
    let after = trainer.store.frozen_digest().unwrap();
    verdict(
        before == after && copies_equal,
        format!(
            "frozen digest {} after 100 steps; {copies} new projections equal self-attention at step 0: {copies_equal}",
            if before == after { "unchanged" } else { "CHANGED" }
        ),
    )
}

fn attention(store: &ParamStore, prefix: &str, dim: usize, heads: usize) -> Attention {
    let pb = store.root().pp(prefix);
    Attention {
        q: Linear::no_bias(&pb.pp("q"), dim, dim).unwrap(),
        k: Linear::no_bias(&pb.pp("k"), dim, dim).unwrap(),
        v: Linear::no_bias(&pb.pp("v"), dim, dim).unwrap(),
        o: Linear::new(&pb.pp("o"), dim, dim).unwrap(),
        heads,
    }
}

fn gradient_criterion() -> Verdict {
    let start = Instant::now();
    let mut samples = Vec::new();

    let store = ParamStore::new(11, DType::F64);
    let cfg = AdapterConfig {
        image_dim: 6,
        text_dim: 8,
        num_queries: 3,
        depth: 2,
        heads: 2,
    };
    let adapter = CognitiveAdapter::new(&store.root().pp("adapter"), cfg).unwrap();
    let mut r = common::rng(1);
    let image = TokenEmbedding {
        data: tensor3(&[rand_mat(&mut r, 5, 6), rand_mat(&mut r, 5, 6)]),
        kind: EmbeddingKind::Image,
    };
    let target = tensor3(&[rand_mat(&mut r, 3, 8), rand_mat(&mut r, 3, 8)]);
    let loss =
        || coser::adapter::cognitive_loss(&adapter.forward(&image).unwrap(), &target).unwrap();
    samples.extend(grad_check(&store, &["adapter/"], 3, 2, &loss));

    let store = ParamStore::new(12, DType::F64);
    let attn = attention(&store, "lr", 8, 2);
    let z = tensor3(&[rand_mat(&mut r, 4, 8)]);
    let x = tensor3(&[rand_mat(&mut r, 4, 8)]);
    let w = tensor3(&[rand_mat(&mut r, 4, 8)]);
    let pos = position_encoding_2d(2, 2, 8, DType::F64).unwrap();
    let loss = || {
        let out = lr_attention(&z, &z, &x, &attn, Some(&pos)).unwrap();
        (out * &w).unwrap().sum_all().unwrap()
    };
    samples.extend(grad_check(&store, &["lr/"], 4, 4, &loss));

    let store = ParamStore::new(13, DType::F64);
    let attn = attention(&store, "ref", 6, 1);
    let (x, refs) = loop {
        let x = tensor3(&[rand_mat(&mut r, 3, 6)]);
        let refs = tensor3(&[rand_mat(&mut r, 4, 6)]);
        let q = to_mats(&attn.q.forward(&x).unwrap());
        let k = to_mats(&attn.k.forward(&refs).unwrap());
        if argmax_margin(&q[0], &k[0]) > 0.1 {
            break (x, refs);
        }
    };
    let w = tensor3(&[rand_mat(&mut r, 3, 6)]);
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
    samples.extend(grad_check(&store, &["ref/"], 4, 6, &loss));

    let worst = samples.iter().map(|s| s.rel_err()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-3 && secs < 60.0,
        format!(
            "{} entries, max relative error {worst:.2e}, {secs:.1} s",
            samples.len()
        ),
    )
}

fn guidance_criterion() -> Verdict {
    let dev = Device::Cpu;
    let c = Tensor::randn(0f32, 1.0, (2, 48, 8, 8), &dev).unwrap();
    let u = Tensor::randn(0f32, 1.0, (2, 48, 8, 8), &dev).unwrap();
    let ident = bits(&cfg_combine(&c, &u, 0.0).unwrap()) == bits(&u)
        && bits(&cfg_combine(&c, &u, 1.0).unwrap()) == bits(&c);
    let cfg = small_config();
    let store = ParamStore::new(6, DType::F32);
    let base = BaseModel::new(&store, &cfg).unwrap();
    let schedule = cfg.noise_schedule().unwrap();
    let e = Tensor::randn(0f32, 1.0, (2, cfg.t_e, cfg.text_dim), &dev).unwrap();
    let null = base.null_context(2).unwrap();
    let opts = SampleOptions {
        num_steps: 10,
        guidance_scale: 1.0,
        seed: 77,
    };
    let guided = sample(&base, &schedule, &e, Some(&null), (2, 48, 8, 8), &opts).unwrap();
    let plain = sample(&base, &schedule, &e, None, (2, 48, 8, 8), &opts).unwrap();
    let same = bits(&guided.data) == bits(&plain.data);
    verdict(
        ident && same,
        format!("combine identities exact: {ident}; s=1 sampling equals conditional-only: {same}"),
    )
}

fn codec_criterion() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut exact = 0;
    for _ in 0..100 {
        let (h, w) = (4 * rng.random_range(1..=16), 4 * rng.random_range(1..=16));
        let v: Vec<f32> = (0..3 * h * w)
            .map(|_| rng.random_range(0u8..=255) as f32 / 255.0)
            .collect();
        let x = Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu).unwrap();
        if bits(&decode_latent(&encode_latent(&x).unwrap()).unwrap()) == bits(&x) {
            exact += 1;
        }
    }
    verdict(
        exact == 100,
        format!("{exact}/100 images bitwise identical"),
    )
}

fn reference_criterion() -> Verdict {
    let cfg = small_config();
    let store = ParamStore::new(10, DType::F32);
    let cognitive = CognitiveEncoder::new(&store, &cfg).unwrap();
    let sr = SrModel::new(&store, &cfg).unwrap();
    // Open the zero taps so the control features carry the input.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for name in store.names() {
        if name.starts_with("control/zero_") {
            let p = store.get_param(&name).unwrap();
            let n = p.var.elem_count();
            let v: Vec<f32> = (0..n).map(|_| rng.random_range(-0.2..0.2)).collect();
            p.var
                .set(&Tensor::from_vec(v, p.var.dims(), &Device::Cpu).unwrap())
                .unwrap();
        }
    }
    let lr = Tensor::rand(0f32, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
    let e = cognitive.embed(&lr).unwrap().detach();
    let before = (
        store.num_params(""),
        store.num_trainable(),
        store.names().len(),
    );
    let opts = SampleOptions {
        num_steps: 5,
        guidance_scale: 3.0,
        seed: 12,
    };
    let refs = generate_reference(
        &sr.base,
        &cfg.noise_schedule().unwrap(),
        &e,
        2,
        (8, 8),
        &opts,
    )
    .unwrap();
    let after = (
        store.num_params(""),
        store.num_trainable(),
        store.names().len(),
    );
    let lr_latent = encode_latent(&coser::imaging::bicubic_upscale4(&lr).unwrap())
        .unwrap()
        .data;
    let direct: Vec<Tensor> = refs.iter().map(|r| r.data.clone()).collect();
    let roundtrip: Vec<Tensor> = refs
        .iter()
        .map(|r| encode_latent(&decode_latent(r).unwrap()).unwrap().data)
        .collect();
    let z = Tensor::randn(0f32, 1.0, lr_latent.dims(), &Device::Cpu).unwrap();
    let (_, a) = sr
        .conditioned(&lr_latent, &direct)
        .pyramids(&z, &[250, 250], &e.data)
        .unwrap();
    let (_, b) = sr
        .conditioned(&lr_latent, &roundtrip)
        .pyramids(&z, &[250, 250], &e.data)
        .unwrap();
    let mut same = true;
    let mut live = false;
    for (pa, pb) in a.iter().zip(&b) {
        for (fa, fb) in pa.features.iter().zip(&pb.features) {
            same &= bits(fa) == bits(fb);
            live |= bits(fa).iter().any(|&x| x != 0);
        }
    }
    verdict(
        before == after && same && live,
        format!(
            "parameters {} -> {} (trainable {} -> {}); shortcut equals decode-reencode bitwise: {same}",
            before.0, after.0, before.1, after.1
        ),
    )
}

struct DeskData {
    _dir: TempDir,
    train: Dataset,
    test: Dataset,
}

fn desk_data(cfg: &RunConfig) -> DeskData {
    let dir = TempDir::new().unwrap();
    let range = cfg.degradation();
    make_toy_dataset(
        1000,
        cfg.seed,
        &dir.path().join("train"),
        cfg.image_size,
        &range,
    )
    .unwrap();
    make_toy_dataset(
        50,
        cfg.seed ^ 0x7E57,
        &dir.path().join("test"),
        cfg.image_size,
        &range,
    )
    .unwrap();
    DeskData {
        train: Dataset::load(&dir.path().join("train")).unwrap(),
        test: Dataset::load(&dir.path().join("test")).unwrap(),
        _dir: dir,
    }
}

fn cognition_criterion(
    cfg: &RunConfig,
    data: &DeskData,
) -> (Verdict, coser::checkpoint::CheckpointArchive) {
    let run = |cfg: &RunConfig| {
        let start = Instant::now();
        let out = train_cognitive(cfg, &data.train).unwrap();
        let elapsed = start.elapsed();
        let enc = CognitiveEncoder::new(&out.store, cfg).unwrap();
        let acc = retrieval_accuracy(&enc, &data.test, cfg).unwrap();
        (acc, elapsed, out.archive)
    };
    let (acc, time, archive) = run(cfg);
    eprintln!(
        "  stage 1 (T_e = {}): retrieval {acc:.3} in {:.1} min",
        cfg.t_e,
        minutes(time)
    );
    let baseline = RunConfig {
        t_e: 1,
        ..cfg.clone()
    };
    let (base_acc, base_time, _) = run(&baseline);
    eprintln!(
        "  stage 1 (T_e = 1): retrieval {base_acc:.3} in {:.1} min",
        minutes(base_time)
    );
    let within = time <= Duration::from_secs(15 * 60);
    (
        verdict(
            acc >= 0.9 && base_acc < acc && within,
            format!(
                "held-out retrieval {acc:.3} (T_e = {}, {:.1} min) vs class-token baseline {base_acc:.3}",
                cfg.t_e,
                minutes(time)
            ),
        ),
        archive,
    )
}

fn sr_criterion(
    cfg: &RunConfig,
    data: &DeskData,
    cognitive: &coser::checkpoint::CheckpointArchive,
) -> Verdict {
    let start = Instant::now();
    let base = train_base(cfg, &data.train).unwrap();
    eprintln!(
        "  stage 0: loss {:.4} -> {:.4} at {:.1} min",
        base.losses[0],
        base.losses.last().unwrap(),
        minutes(start.elapsed())
    );
    let sr = coser::train::train_sr(cfg, &data.train, &base.archive, cognitive).unwrap();
    let elapsed = start.elapsed();
    eprintln!(
        "  stage 2: loss {:.4} -> {:.4} at {:.1} min",
        sr.losses[0],
        sr.losses.last().unwrap(),
        minutes(elapsed)
    );
    let pipeline = Pipeline::load(cfg, cognitive, &sr.archive).unwrap();
    let full = evaluate(&pipeline, &data.test, SrFlags::default(), 25).unwrap();
    let blind = evaluate(
        &pipeline,
        &data.test,
        SrFlags {
            no_reference: false,
            no_cognition: true,
        },
        25,
    )
    .unwrap();
    let (g_full, g_blind) = (
        full.gen_score_mean.unwrap_or(0.0),
        blind.gen_score_mean.unwrap_or(0.0),
    );
    eprintln!(
        "  psnr {:.2} dB vs bicubic {:.2} dB, ssim {:.3} vs {:.3}",
        full.psnr_mean, full.bicubic_psnr_mean, full.ssim_mean, full.bicubic_ssim_mean
    );
    let within = elapsed <= Duration::from_secs(30 * 60);
    verdict(
        full.win_rate >= 0.7 && g_blind < g_full && within,
        format!(
            "PSNR above bicubic on {:.0}% of {} pairs; gen_score {g_full:.3} full vs {g_blind:.3} without cognition; stages 0+2 {:.1} min",
            100.0 * full.win_rate,
            full.pairs,
            minutes(elapsed)
        ),
    )
}

fn report(n: usize, name: &str, v: Verdict, passed: &mut usize) {
    if v.pass {
        *passed += 1;
    }
    println!(
        "{} criterion {n:>2} {name}: {}",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        }
    }
}

/// `COSER_ACCEPTANCE_ONLY=1,3,10` limits the run to those criteria.
fn selection() -> Vec<usize> {
    match std::env::var("COSER_ACCEPTANCE_ONLY") {
        Ok(v) => v.split(',').filter_map(|x| x.trim().parse().ok()).collect(),
        Err(_) => (1..=10).collect(),
    }
}

fn main() {
    // `cargo test -- --list` and friends probe every target.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only = selection();
    let mut passed = 0;
    let mut run = |n: usize, name: &str, f: &dyn Fn() -> Verdict| {
        if only.contains(&n) {
            report(n, name, guarded(f), &mut passed);
        } else {
            println!("SKIP criterion {n:>2} {name}");
        }
    };
    run(1, "one-hot attention oracle", &one_hot_oracle_criterion);
    run(
        2,
        "supervision target oracle",
        &supervision_oracle_criterion,
    );
    run(3, "zero-init neutrality", &neutrality_criterion);
    run(4, "freeze discipline", &freeze_criterion);
    run(5, "gradient checks", &gradient_criterion);
    run(6, "guidance identities", &guidance_criterion);
    run(7, "codec invertibility", &codec_criterion);

    if only.contains(&8) || only.contains(&9) {
        let cfg = desk_config();
        eprintln!("desk-scale criteria: generating 1000 + 50 toy pairs");
        let data = desk_data(&cfg);
        let cognitive = std::cell::RefCell::new(None);
        run(8, "desk-scale cognition", &|| {
            let (v, archive) = cognition_criterion(&cfg, &data);
            *cognitive.borrow_mut() = Some(archive);
            v
        });
        run(9, "desk-scale SR sanity", &|| match &*cognitive.borrow() {
            Some(c) => sr_criterion(&cfg, &data, c),
            None => verdict(false, "no stage-1 archive (criterion 8 not run or failed)"),
        });
    } else {
        run(8, "desk-scale cognition", &|| unreachable!());
        run(9, "desk-scale SR sanity", &|| unreachable!());
    }
    run(10, "reference pipeline", &reference_criterion);

    println!("{passed}/10 criteria passed");
    if passed < 10 && std::env::var("COSER_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
