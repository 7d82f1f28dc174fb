//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line per criterion and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use keyloc_core::checkpoint;
use keyloc_core::config::RunConfig;
use keyloc_core::connector::{connect, gelu, ConnectorConfig, ConnectorMode, ConnectorWeights};
use keyloc_core::expressivity::run_probe;
use keyloc_core::language_decoder::{masked_nll, Decoder, DecoderConfig};
use keyloc_core::lora::{attach_lora, merge_lora};
use keyloc_core::metrics::{evaluate, oks, OksParams, Prediction};
use keyloc_core::model::{longest_record, record_for, KeypointModel, LoraConfig, ModelConfig};
use keyloc_core::pipeline;
use keyloc_core::prompt_codec::{Vocabulary, NUM_KEYPOINTS};
use keyloc_core::synth_data::{generate_sample, write_dataset, GeneratorConfig, SkeletonSample};
use keyloc_core::tensor::Tensor;
use keyloc_core::trainer::{TrainConfig, Trainer};
use keyloc_core::vision_encoder::{EncoderConfig, GradScope, PatchFeatures, VisionEncoder};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: a one-line summary, or the reason it failed.
type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < limit, || format!("{what} took {elapsed:.1?}, limit {limit:?}"))
}

// 1. connector conformance

fn scalar_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Loop-by-loop reference of both connector forms.
fn scalar_connector(w: &ConnectorWeights, x: &[f64], n: usize, d_in: usize) -> Vec<f64> {
    let affine = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
        let (rows, cols) = (w.shape[0], w.shape[1]);
        let mut out = vec![0.0; cols];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = b.data[j];
            for (i, xi) in x.iter().enumerate().take(rows) {
                acc += xi * w.data[i * cols + j];
            }
            *o = acc;
        }
        out
    };
    let mut out = Vec::new();
    for t in 0..n {
        let row = &x[t * d_in..(t + 1) * d_in];
        match w {
            ConnectorWeights::Mlp { w1, b1, w2, b2 } => {
                let h: Vec<f64> = affine(row, w1, b1).into_iter().map(scalar_gelu).collect();
                out.extend(affine(&h, w2, b2));
            }
            ConnectorWeights::Linear { w, b } => out.extend(affine(row, w, b)),
        }
    }
    out
}

fn connector_conformance() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let mode = if case % 2 == 0 { ConnectorMode::Mlp } else { ConnectorMode::Linear };
        let cfg = ConnectorConfig {
            mode,
            d_vis: rng.random_range(1..24),
            d_hid: rng.random_range(1..48),
            d_out: rng.random_range(1..24),
        };
        let mut w = ConnectorWeights::new(&cfg, &mut rng).map_err(|e| e.to_string())?;
        w.visit_mut("c", &mut |_, t| t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0)));
        let (batch, tokens) = (rng.random_range(1..4), rng.random_range(1..10));
        let images: Vec<Tensor> = (0..batch)
            .map(|_| Tensor::normal(&[tokens, cfg.d_vis], 1.5, &mut rng))
            .collect();
        let features = PatchFeatures::from_images(images.clone());
        let out = connect(&features, &w).map_err(|e| e.to_string())?;
        for (b, img) in images.iter().enumerate() {
            let want = scalar_connector(&w, &img.data, tokens, cfg.d_vis);
            let got = out.image(b);
            for (g, r) in got.data.iter().zip(&want) {
                worst = worst.max((g - r).abs() / r.abs().max(1e-12));
            }
        }
    }
    ensure(worst <= 1e-6, || format!("connector relative error {worst:e}"))?;
    let mut gelu_worst: f64 = 0.0;
    for i in 0..10_000 {
        let x = -10.0 + 20.0 * i as f64 / 9_999.0;
        gelu_worst = gelu_worst.max((gelu(x) - scalar_gelu(x)).abs());
    }
    ensure(gelu_worst <= 1e-10, || format!("gelu error {gelu_worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(10), "connector conformance")?;
    Ok(format!(
        "100 instances max rel err {worst:.1e}; gelu max abs err {gelu_worst:.1e}; {:.2?}",
        start.elapsed()
    ))
}

// 2. gradient integrity

const H: f64 = 1e-5;

/// Central differences at a few entries of every named gradient.
fn finite_difference_check<M: Clone>(
    model: &M,
    analytic: &[(String, Vec<f64>)],
    loss: impl Fn(&M) -> f64,
    set: impl Fn(&mut M, &str, usize, f64),
    get: impl Fn(&M, &str, usize) -> f64,
) -> Result<(usize, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut checked, mut worst) = (0, 0.0f64);
    for (name, grad) in analytic {
        for _ in 0..3 {
            let i = rng.random_range(0..grad.len());
            let v = get(model, name, i);
            let mut plus = model.clone();
            set(&mut plus, name, i, v + H);
            let mut minus = model.clone();
            set(&mut minus, name, i, v - H);
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * H);
            if (numeric - grad[i]).abs() >= 1e-9 {
                let err = rel_err(numeric, grad[i]);
                worst = worst.max(err);
                ensure(err < 1e-4, || format!("{name}[{i}]: numeric {numeric} analytic {}", grad[i]))?;
            }
            checked += 1;
        }
    }
    Ok((checked, worst))
}

fn named_get<M>(visit: impl Fn(&M, &mut dyn FnMut(&str, &Tensor))) -> impl Fn(&M, &str, usize) -> f64 {
    move |m, want, i| {
        let mut out = f64::NAN;
        visit(m, &mut |n, t| {
            if n == want {
                out = t.data[i];
            }
        });
        out
    }
}

fn connector_gradients() -> Result<(usize, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut w = ConnectorWeights::new(&ConnectorConfig::mlp(4, 4), &mut rng).map_err(|e| e.to_string())?;
    w.visit_mut("c", &mut |_, t| t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0)));
    let x = Tensor::normal(&[5, 4], 1.0, &mut rng);
    let target = Tensor::normal(&[5, 4], 1.0, &mut rng);
    let loss = |w: &ConnectorWeights, x: &Tensor| {
        let (y, _) = w.forward_tokens(x).unwrap();
        y.data.iter().zip(&target.data).map(|(a, b)| 0.5 * (a - b).powi(2)).sum::<f64>()
    };
    let (y, cache) = w.forward_tokens(&x).map_err(|e| e.to_string())?;
    let mut up = y.clone();
    for (u, t) in up.data.iter_mut().zip(&target.data) {
        *u -= t;
    }
    let mut grads = w.zeros_like();
    let dx = w.backward_tokens(&x, &cache, &up, &mut grads);
    let mut analytic = Vec::new();
    grads.visit("c", &mut |n, t| analytic.push((n.to_string(), t.data.clone())));
    let set = |m: &mut ConnectorWeights, name: &str, i: usize, v: f64| {
        m.visit_mut("c", &mut |n, t| {
            if n == name {
                t.data[i] = v
            }
        })
    };
    let get = named_get(|m: &ConnectorWeights, f| m.visit("c", &mut |n, t| f(n, t)));
    let (mut checked, mut worst) = finite_difference_check(&w, &analytic, |m| loss(m, &x), set, get)?;
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data[i] += H;
        xm.data[i] -= H;
        let numeric = (loss(&w, &xp) - loss(&w, &xm)) / (2.0 * H);
        let err = rel_err(numeric, dx.data[i]);
        worst = worst.max(err);
        ensure(err < 1e-4, || format!("connector input[{i}]: {numeric} vs {}", dx.data[i]))?;
        checked += 1;
    }
    Ok((checked, worst))
}

fn encoder_gradients() -> Result<(usize, f64), String> {
    let cfg = EncoderConfig {
        image_size: 16,
        patch_size: 4,
        depth: 1,
        d_vis: 16,
        heads: 2,
        mlp_ratio: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut enc = VisionEncoder::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    let targets = ["block0.attn.wq".to_string(), "block0.attn.wv".to_string()];
    attach_lora(&mut enc, &targets, 2, 2.0, &mut rng).map_err(|e| e.to_string())?;
    enc.visit_mut("", &mut |n, t| {
        if n.ends_with("lora_b") {
            t.data.iter_mut().for_each(|v| *v = 0.2)
        }
    });
    let image: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
    let probe = Tensor::normal(&[16, 16], 1.0, &mut rng);
    let loss = |e: &VisionEncoder| {
        let (y, _) = e.forward_image(&image).unwrap();
        y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>()
    };
    let (_, cache) = enc.forward_image(&image).map_err(|e| e.to_string())?;
    let mut grads = enc.zeros_like();
    enc.backward_image(&cache, &probe, &mut grads, GradScope::ALL);
    let mut analytic = Vec::new();
    grads.visit("", &mut |n, t| analytic.push((n.to_string(), t.data.clone())));
    let set = |e: &mut VisionEncoder, name: &str, i: usize, v: f64| {
        e.visit_mut("", &mut |n, t| {
            if n == name {
                t.data[i] = v
            }
        })
    };
    let get = named_get(|m: &VisionEncoder, f| m.visit("", &mut |n, t| f(n, t)));
    finite_difference_check(&enc, &analytic, loss, set, get)
}

fn decoder_gradients() -> Result<(usize, f64), String> {
    let cfg = DecoderConfig {
        d_model: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        vocab_size: Vocabulary::builtin().len(),
        max_seq_len: 16,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut dec = Decoder::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    let targets_q = ["block0.attn.wq".to_string(), "block0.attn.wv".to_string()];
    attach_lora(&mut dec, &targets_q, 2, 2.0, &mut rng).map_err(|e| e.to_string())?;
    dec.visit_mut("", &mut |n, t| {
        if n.ends_with("lora_b") {
            t.data.iter_mut().for_each(|v| *v = -0.1)
        }
    });
    let visual = Tensor::normal(&[4, 16], 1.0, &mut rng);
    let ids = [1u32, 7, 8, 9, 10, 11];
    let targets = [7u32, 8, 9, 10, 11, 2];
    let mask = [false, false, true, true, true, true];
    let loss = |d: &Decoder, v: &Tensor| {
        let (logits, _) = d.forward(v, &ids).unwrap();
        masked_nll(&logits, &targets, &mask).unwrap().0
    };
    let (logits, cache) = dec.forward(&visual, &ids).map_err(|e| e.to_string())?;
    let (_, _, dl) = masked_nll(&logits, &targets, &mask).map_err(|e| e.to_string())?;
    let mut grads = dec.zeros_like();
    let dv = dec.backward(&cache, &dl, &mut grads, GradScope::ALL);
    let mut analytic = Vec::new();
    grads.visit("", &mut |n, t| analytic.push((n.to_string(), t.data.clone())));
    let set = |d: &mut Decoder, name: &str, i: usize, v: f64| {
        d.visit_mut("", &mut |n, t| {
            if n == name {
                t.data[i] = v
            }
        })
    };
    let get = named_get(|m: &Decoder, f| m.visit("", &mut |n, t| f(n, t)));
    let (mut checked, mut worst) = finite_difference_check(&dec, &analytic, |d| loss(d, &visual), set, get)?;
    for i in 0..visual.len() {
        let (mut vp, mut vm) = (visual.clone(), visual.clone());
        vp.data[i] += H;
        vm.data[i] -= H;
        let numeric = (loss(&dec, &vp) - loss(&dec, &vm)) / (2.0 * H);
        if (numeric - dv.data[i]).abs() >= 1e-9 {
            let err = rel_err(numeric, dv.data[i]);
            worst = worst.max(err);
            ensure(err < 1e-4, || format!("visual[{i}]: {numeric} vs {}", dv.data[i]))?;
        }
        checked += 1;
    }
    Ok((checked, worst))
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for (name, run) in [
        ("connector", connector_gradients as fn() -> Result<(usize, f64), String>),
        ("encoder", encoder_gradients),
        ("decoder", decoder_gradients),
    ] {
        let (n, worst) = run().map_err(|e| format!("{name}: {e}"))?;
        parts.push(format!("{name} {n} entries max rel {worst:.1e}"));
    }
    within(start.elapsed(), Duration::from_secs(120), "gradient checks")?;
    Ok(format!("{}; {:.2?}", parts.join(", "), start.elapsed()))
}

// 3. loss masking

fn small_model(mode: ConnectorMode) -> ModelConfig {
    let encoder = EncoderConfig {
        image_size: 16,
        patch_size: 8,
        depth: 1,
        d_vis: 16,
        heads: 2,
        mlp_ratio: 2,
    };
    let decoder = DecoderConfig {
        d_model: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        max_seq_len: 4 + longest_record(),
        ..DecoderConfig::default()
    };
    let mut connector = ConnectorConfig::mlp(16, 16);
    connector.mode = mode;
    ModelConfig {
        encoder,
        connector,
        decoder,
    }
}

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        image_size: 16,
        marker_radius: 0,
        ..GeneratorConfig::default()
    }
}

fn flat(model: &KeypointModel) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit(&mut |n, t| out.push((n.to_string(), t.data.clone())));
    out
}

fn loss_masking() -> Outcome {
    let mut model = KeypointModel::new(small_model(ConnectorMode::Mlp), Some(&LoraConfig::default()), 5)
        .map_err(|e| e.to_string())?;
    model.visit_mut(&mut |n, t| {
        if n.ends_with(".lora_b") {
            t.data.iter_mut().for_each(|v| *v = 0.05);
        }
    });
    let sample = generate_sample(4, &small_generator()).map_err(|e| e.to_string())?;
    let record = record_for(&sample, 0).map_err(|e| e.to_string())?;
    let n = record.token_ids.len();
    let (inputs, targets, mask) = (&record.token_ids[..n - 1], &record.token_ids[1..], &record.answer_mask[1..]);
    let visual = model.visual_tokens(&sample.image()).map_err(|e| e.to_string())?;
    let (logits, cache) = model.decoder.forward(&visual, inputs).map_err(|e| e.to_string())?;
    let vocab = logits.cols();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad_targets = targets.to_vec();
    let mut bad_logits = logits.clone();
    for i in 0..mask.len() {
        if !mask[i] {
            bad_targets[i] = rng.random_range(0..vocab as u32);
            bad_logits.row_mut(i).iter_mut().for_each(|v| *v += rng.random_range(-50.0..50.0));
        }
    }
    let run = |l: &Tensor, t: &[u32]| {
        let (sum, count, dl) = masked_nll(l, t, mask).unwrap();
        let mut grads = model.zeros_like();
        let dv = model.decoder.backward(&cache, &dl, &mut grads.decoder, GradScope::ALL);
        (sum, count, dl, dv, flat(&grads))
    };
    let base = run(&logits, targets);
    for (what, other) in [
        ("targets", run(&logits, &bad_targets)),
        ("logits", run(&bad_logits, targets)),
        ("both", run(&bad_logits, &bad_targets)),
    ] {
        ensure(base.0.to_bits() == other.0.to_bits() && base.1 == other.1, || {
            format!("loss changed when perturbing masked {what}")
        })?;
        ensure(base.2 == other.2 && base.3 == other.3 && base.4 == other.4, || {
            format!("gradients changed when perturbing masked {what}")
        })?;
    }
    let uniform = Tensor::zeros(&[8, vocab]);
    let t: Vec<u32> = (0..8).collect();
    let m = [true, false, true, true, false, true, true, true];
    let (sum, count, _) = masked_nll(&uniform, &t, &m).map_err(|e| e.to_string())?;
    let mean = sum / count as f64;
    let ln_v = (vocab as f64).ln();
    ensure((mean - ln_v).abs() <= 1e-8, || format!("uniform loss {mean} vs ln V {ln_v}"))?;
    Ok(format!(
        "masked perturbations bit-identical over {} tensors; uniform loss {mean:.10} = ln {vocab}",
        base.4.len()
    ))
}

// 4. LoRA contract

fn tiny_train_config(steps_data: usize) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        lr: 5e-3,
        micro_batch: 2,
        accumulation_steps: 2,
        seed: 3,
        lora: LoraConfig {
            rank: 2,
            alpha: 4.0,
            ..LoraConfig::default()
        },
        queries_per_sample: steps_data,
        ..TrainConfig::default()
    }
}

fn tiny_data(n: u64) -> Vec<SkeletonSample> {
    (0..n).map(|s| generate_sample(1000 + s, &small_generator()).unwrap()).collect()
}

fn lora_contract() -> Outcome {
    let cfg = small_model(ConnectorMode::Mlp);
    let tc = tiny_train_config(1);
    let bare = KeypointModel::new(cfg.clone(), None, 8).map_err(|e| e.to_string())?;
    let adapted = KeypointModel::new(cfg, Some(&tc.lora), 8).map_err(|e| e.to_string())?;
    let data = tiny_data(8);
    for s in &data[..3] {
        for k in [0, 9] {
            let rec = record_for(s, k).map_err(|e| e.to_string())?;
            let a = bare.record_loss(&s.image(), &rec).map_err(|e| e.to_string())?;
            let b = adapted.record_loss(&s.image(), &rec).map_err(|e| e.to_string())?;
            ensure(a.0.to_bits() == b.0.to_bits(), || "adapters change outputs at initialization".into())?;
        }
    }

    let mut trained = adapted.clone();
    let mut trainer = Trainer::new(tc.clone(), &trained, &data).map_err(|e| e.to_string())?;
    trainer.run(&mut trained, Some(6), |_, _| {}).map_err(|e| e.to_string())?;
    let before = flat(&adapted);
    let after = flat(&trained);
    let mut frozen = 0;
    let mut moved_adapters = 0;
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if name.ends_with(".lora_b") && a != b {
            moved_adapters += 1;
        }
        if !keyloc_core::model::is_trainable(name, tc.scope()) {
            frozen += 1;
            ensure(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), || {
                format!("frozen tensor {name} changed during training")
            })?;
        }
    }
    ensure(moved_adapters > 0, || "training never moved an adapter".into())?;

    let mut merged = trained.clone();
    merge_lora(&mut merged);
    ensure(!merged.has_adapters(), || "merge left adapters attached".into())?;
    let mut worst: f64 = 0.0;
    for s in &data[..3] {
        let rec = record_for(s, s.visibility.iter().position(|&v| v == 1).unwrap_or(0)).map_err(|e| e.to_string())?;
        let ids = &rec.token_ids[..rec.token_ids.len() - 1];
        let (la, _) = trained
            .decoder
            .forward(&trained.visual_tokens(&s.image()).unwrap(), ids)
            .map_err(|e| e.to_string())?;
        let (lb, _) = merged
            .decoder
            .forward(&merged.visual_tokens(&s.image()).unwrap(), ids)
            .map_err(|e| e.to_string())?;
        let scale = la.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in la.data.iter().zip(&lb.data) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    ensure(worst <= 1e-5, || format!("merged logits differ by {worst:e}"))?;
    Ok(format!(
        "identity at init exact; {frozen} frozen tensors bit-identical after 6 steps; merge rel err {worst:.1e}"
    ))
}

// 5. accumulation equivalence

fn accumulation_equivalence() -> Outcome {
    let data = tiny_data(8);
    let init = KeypointModel::new(small_model(ConnectorMode::Mlp), Some(&LoraConfig::default()), 2)
        .map_err(|e| e.to_string())?;
    let run = |micro: usize, accum: usize| -> Result<(KeypointModel, Vec<(u64, f64)>), String> {
        let tc = TrainConfig {
            micro_batch: micro,
            accumulation_steps: accum,
            lr: 1e-2,
            train_embeddings: true,
            ..tiny_train_config(2)
        };
        let mut model = init.clone();
        let mut trainer = Trainer::new(tc, &model, &data).map_err(|e| e.to_string())?;
        trainer.run(&mut model, Some(2), |_, _| {}).map_err(|e| e.to_string())?;
        Ok((model, trainer.state.losses.clone()))
    };
    let (a, la) = run(1, 4)?;
    let (b, lb) = run(4, 1)?;
    let mut worst: f64 = 0.0;
    for ((name, x), (_, y)) in flat(&a).iter().zip(&flat(&b)) {
        for (p, q) in x.iter().zip(y) {
            let d = (p - q).abs();
            ensure(d <= 1e-10, || format!("{name} differs by {d:e}"))?;
            worst = worst.max(d);
        }
    }
    for ((_, p), (_, q)) in la.iter().zip(&lb) {
        ensure((p - q).abs() <= 1e-10, || format!("losses differ: {p} vs {q}"))?;
    }
    Ok(format!("1x4 vs 4x1 over 2 steps: max parameter difference {worst:.1e}"))
}

// 6. metric oracles

fn hand_sample(id: u64, kps: [(f64, f64); NUM_KEYPOINTS], visible: [bool; NUM_KEYPOINTS], area: f64) -> SkeletonSample {
    SkeletonSample {
        seed: id,
        height: 64,
        width: 64,
        pixels: vec![0; 64 * 64],
        keypoints: kps,
        visibility: visible.map(u8::from),
        area,
        head_size: 0.1,
    }
}

/// OKS straight from its definition, then a threshold-by-threshold recount.
fn brute_force_ap(preds: &[Prediction], data: &[SkeletonSample], k: f64) -> f64 {
    let mut scores = Vec::new();
    for s in data {
        let p = preds.iter().find(|p| p.id == s.seed);
        let (mut sum, mut n) = (0.0, 0);
        for j in 0..NUM_KEYPOINTS {
            if s.visibility[j] == 0 {
                continue;
            }
            n += 1;
            if let Some((x, y)) = p.and_then(|p| p.coords[j]) {
                let d2 = ((x - s.keypoints[j].0) * 64.0).powi(2) + ((y - s.keypoints[j].1) * 64.0).powi(2);
                sum += (-d2 / (2.0 * s.area * k * k)).exp();
            }
        }
        if n > 0 && s.area > 0.0 {
            scores.push(sum / n as f64);
        }
    }
    let mut total = 0.0;
    for i in 0..10 {
        let t = (50 + 5 * i) as f64 / 100.0;
        let hits = scores.iter().filter(|&&s| s >= t).count();
        total += if scores.is_empty() { 0.0 } else { 100.0 * hits as f64 / scores.len() as f64 };
    }
    total / 10.0
}

fn hand_built_instances(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Prediction>, Vec<SkeletonSample>) {
    let mut preds = Vec::new();
    let mut data = Vec::new();
    for id in 0..n as u64 {
        let kps: [(f64, f64); NUM_KEYPOINTS] =
            std::array::from_fn(|_| (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)));
        let visible: [bool; NUM_KEYPOINTS] = std::array::from_fn(|_| rng.random_bool(0.8));
        let area = rng.random_range(200.0..2000.0);
        let spread = [0.0, 0.005, 0.02, 0.05][id as usize % 4];
        let coords = std::array::from_fn(|j| {
            (!rng.random_bool(0.1)).then(|| {
                (
                    kps[j].0 + rng.random_range(-1.0..1.0) * spread,
                    kps[j].1 + rng.random_range(-1.0..1.0) * spread,
                )
            })
        });
        data.push(hand_sample(id, kps, visible, area));
        preds.push(Prediction { id, coords });
    }
    (preds, data)
}

fn metric_oracles() -> Outcome {
    let params = OksParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for round in 0..25 {
        let n = 1 + round % 20;
        let (preds, data) = hand_built_instances(&mut rng, n);
        let report = evaluate(&preds, &data, &params).map_err(|e| e.to_string())?;
        let oracle = brute_force_ap(&preds, &data, 0.08);
        ensure(report.ap == oracle, || format!("round {round}: ap {} vs recount {oracle}", report.ap))?;
        ensure(report.ar == report.ap, || "ar differs from ap with one prediction per instance".into())?;
    }

    let gen = GeneratorConfig::default();
    let samples: Vec<_> = (0..10).map(|s| generate_sample(s, &gen).unwrap()).collect();
    let truth: Vec<_> = samples.iter().map(Prediction::from_truth).collect();
    let perfect = evaluate(&truth, &samples, &params).map_err(|e| e.to_string())?;
    for (name, v) in [("AP", perfect.ap), ("AR", perfect.ar), ("PCKh@0.5", perfect.pckh_05), ("PCKh@0.1", perfect.pckh_01)] {
        ensure(v == 100.0, || format!("perfect {name} = {v}"))?;
    }

    let (s, k) = (30.0f64, 0.08f64);
    let d = (2.0 * s * s * k * k).sqrt();
    let spot = oks(&[Some((d, 0.0))], &[(0.0, 0.0)], &[true], s * s, &[k]).unwrap();
    ensure((spot - (-1.0f64).exp()).abs() <= 1e-9, || format!("oks spot value {spot}"))?;

    let mut runner = TestRunner::new(PropConfig {
        cases: 200,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (any::<u64>(), 1usize..8, 0.0f64..0.2, 0.0f64..1.0);
    runner
        .run(&strategy, |(seed, n, spread, shrink)| {
            let samples: Vec<_> = (0..n as u64).map(|i| generate_sample(seed.wrapping_add(i), &gen).unwrap()).collect();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let noisy: Vec<Prediction> = samples
                .iter()
                .map(|s| Prediction {
                    id: s.seed,
                    coords: s.keypoints.map(|(x, y)| {
                        Some((x + r.random_range(-1.0..1.0) * spread, y + r.random_range(-1.0..1.0) * spread))
                    }),
                })
                .collect();
            let closer: Vec<Prediction> = noisy
                .iter()
                .zip(&samples)
                .map(|(p, s)| Prediction {
                    id: p.id,
                    coords: std::array::from_fn(|j| {
                        let (x, y) = p.coords[j].unwrap();
                        let (gx, gy) = s.keypoints[j];
                        Some((gx + (x - gx) * shrink, gy + (y - gy) * shrink))
                    }),
                })
                .collect();
            let far = evaluate(&noisy, &samples, &params).unwrap();
            let near = evaluate(&closer, &samples, &params).unwrap();
            prop_assert!(near.ap >= far.ap && near.pckh_05 >= far.pckh_05 && near.pckh_01 >= far.pckh_01);
            for rep in [&far, &near] {
                prop_assert!(rep.ap50 >= rep.ap75);
                prop_assert!(rep.ap50 >= rep.ap && rep.ap >= 0.0);
                prop_assert!(rep.pckh_05 >= rep.pckh_01);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("25 sweep recounts exact; perfect scores 100.0; oks spot e^-1; 200 property cases".into())
}

// 7. end-to-end overfit

struct Overfit {
    summary: String,
    ok: bool,
}

fn mean_error(preds: &[Prediction], samples: &[SkeletonSample]) -> (f64, f64) {
    let (mut err, mut n, mut parsed) = (0.0, 0usize, 0usize);
    for (p, s) in preds.iter().zip(samples) {
        for k in 0..NUM_KEYPOINTS {
            if !s.is_visible(k) {
                continue;
            }
            if let Some((x, y)) = p.coords[k] {
                err += (x - s.keypoints[k].0).hypot(y - s.keypoints[k].1);
                parsed += 1;
            }
            n += 1;
        }
    }
    (100.0 * parsed as f64 / n.max(1) as f64, err / parsed.max(1) as f64)
}

fn end_to_end_overfit() -> Result<Overfit, String> {
    let cfg = RunConfig::preset("desk").map_err(|e| e.to_string())?;
    let (train, _) = pipeline::generate_splits(&cfg).map_err(|e| e.to_string())?;
    let held_in = pipeline::eval_subset(&cfg, &train);
    let untrained = pipeline::init_model(&cfg).map_err(|e| e.to_string())?;
    let (_, before) = pipeline::evaluate_model(&cfg, &untrained, held_in).map_err(|e| e.to_string())?;

    let start = Instant::now();
    let (model, state) = pipeline::train_model(&cfg, &train, |_, _| {}).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let per_epoch = (train.len() * cfg.train.queries_per_sample).div_ceil(cfg.train.effective_batch());
    let initial = state.losses[0].1;
    let tail = &state.losses[state.losses.len().saturating_sub(per_epoch)..];
    let last = tail.iter().map(|l| l.1).sum::<f64>() / tail.len() as f64;

    let (preds, after) = pipeline::evaluate_model(&cfg, &model, held_in).map_err(|e| e.to_string())?;
    let (parse_rate, err) = mean_error(&preds, held_in);

    // Grounding: with the visual stream zeroed the answers stop matching.
    let (mut blind_wrong, mut blind_total) = (0, 0);
    for s in &held_in[..8.min(held_in.len())] {
        let zero = Tensor::zeros(&model.visual_tokens(&s.image()).map_err(|e| e.to_string())?.shape);
        for k in (0..NUM_KEYPOINTS).filter(|&k| s.is_visible(k)) {
            let truth = record_for(s, k).map_err(|e| e.to_string())?.answer_text;
            let blind = model.decode(&zero, k, cfg.eval.max_answer_len).map_err(|e| e.to_string())?;
            let text = keyloc_core::prompt_codec::decode_text(&blind.ids).map_err(|e| e.to_string())?;
            blind_total += 1;
            blind_wrong += usize::from(text != truth);
        }
    }

    let checks = [
        (elapsed < Duration::from_secs(15 * 60), format!("train {:.0?}", elapsed)),
        (last < 0.1 * initial, format!("loss {initial:.3} -> {last:.3}")),
        (parse_rate >= 95.0, format!("parsed {parse_rate:.1}%")),
        (err < 0.05, format!("mean err {err:.4}")),
        (after.ap - before.ap >= 30.0, format!("AP {:.1} -> {:.1}", before.ap, after.ap)),
    ];
    let ok = checks.iter().all(|c| c.0);
    let mut parts: Vec<String> = checks
        .iter()
        .map(|(pass, s)| if *pass { s.clone() } else { format!("{s} (miss)") })
        .collect();
    parts.push(format!("zeroed image wrong on {blind_wrong}/{blind_total}"));
    let summary = parts.join("; ");
    Ok(Overfit { summary, ok })
}

// 8. connector ablation

fn connector_ablation() -> Outcome {
    let cfg = RunConfig::preset("expressivity").map_err(|e| e.to_string())?;
    let probe = run_probe(&cfg.expressivity).map_err(|e| e.to_string())?;
    let ratio = probe.ratio();
    ensure(ratio >= 5.0, || {
        format!("mlp mse {:.4e} vs linear {:.4e}: ratio {ratio:.2}", probe.mlp_mse, probe.linear_mse)
    })?;

    // Reported only: three seeds of a shortened desk run per connector.
    let desk = RunConfig::preset("desk")
        .and_then(|c| c.set("train.epochs", "4"))
        .map_err(|e| e.to_string())?;
    let seeds = [0, 1, 2];
    let rows = pipeline::ablate(&desk, &seeds, |_, _| {}).map_err(|e| e.to_string())?;
    let table = pipeline::format_ablation(&rows, &seeds);
    for line in table.lines() {
        println!("    {line}");
    }
    Ok(format!(
        "probe mse mlp {:.3e} linear {:.3e} ratio {ratio:.1}; pipeline mean AP mlp {:.1} linear {:.1} (reported)",
        probe.mlp_mse,
        probe.linear_mse,
        rows[0].mean_ap(),
        rows[1].mean_ap()
    ))
}

// 9. determinism and persistence

fn tiny_run_config() -> RunConfig {
    let m = small_model(ConnectorMode::Mlp);
    let mut cfg = RunConfig {
        encoder: m.encoder,
        connector: m.connector,
        decoder: m.decoder,
        generator: small_generator(),
        ..RunConfig::default()
    };
    cfg.data.count = 12;
    cfg.train = TrainConfig {
        epochs: 8,
        micro_batch: 2,
        accumulation_steps: 2,
        lr: 5e-3,
        train_embeddings: true,
        ..TrainConfig::default()
    };
    cfg
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn determinism_and_persistence() -> Outcome {
    let err = |e: keyloc_core::error::Error| e.to_string();
    let cfg = tiny_run_config();
    cfg.validate().map_err(err)?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

    let (train_a, _) = pipeline::generate_splits(&cfg).map_err(err)?;
    let (train_b, _) = pipeline::generate_splits(&cfg).map_err(err)?;
    let hash = cfg.generator.hash();
    write_dataset(&train_a, &tmp.path().join("a.jsonl"), "train", &hash).map_err(err)?;
    write_dataset(&train_b, &tmp.path().join("b.jsonl"), "train", &hash).map_err(err)?;
    let same_data = std::fs::read(tmp.path().join("a.jsonl")).unwrap() == std::fs::read(tmp.path().join("b.jsonl")).unwrap();
    ensure(same_data, || "regenerated dataset differs".into())?;

    let mut curves = Vec::new();
    for run in ["run1", "run2"] {
        let (model, state) = pipeline::train_model(&cfg, &train_a, |_, _| {}).map_err(err)?;
        let dir = tmp.path().join(run);
        checkpoint::save(&dir, &model, Some((&cfg.train, &state))).map_err(err)?;
        curves.push((state.losses.clone(), dir_bytes(&dir)));
    }
    ensure(curves[0] == curves[1], || "identical runs produced different curves or checkpoints".into())?;

    let mut full = pipeline::init_model(&cfg).map_err(err)?;
    let mut trainer = Trainer::new(cfg.train.clone(), &full, &train_a).map_err(err)?;
    trainer.run(&mut full, Some(20), |_, _| {}).map_err(err)?;
    let full_state = trainer.state.clone();

    let mut half = pipeline::init_model(&cfg).map_err(err)?;
    let mut trainer = Trainer::new(cfg.train.clone(), &half, &train_a).map_err(err)?;
    trainer.run(&mut half, Some(10), |_, _| {}).map_err(err)?;
    let ck = tmp.path().join("half");
    checkpoint::save(&ck, &half, Some((&cfg.train, &trainer.state))).map_err(err)?;
    drop(half);
    let loaded = checkpoint::load(&ck).map_err(err)?;
    let (tc, state) = loaded.state.ok_or("checkpoint lost its training state")?;
    let mut resumed = loaded.model;
    let mut trainer = Trainer::resume(tc, state, &resumed, &train_a).map_err(err)?;
    trainer.run(&mut resumed, Some(10), |_, _| {}).map_err(err)?;
    ensure(trainer.state.losses == full_state.losses, || "resumed loss curve diverged".into())?;
    ensure(flat(&resumed) == flat(&full), || "resumed weights diverged".into())?;
    ensure(trainer.state.optimizer == full_state.optimizer, || "resumed optimizer state diverged".into())?;
    Ok(format!(
        "dataset bytes identical; 2 runs x {} steps identical; resume after 10 of 20 steps bitwise equal",
        curves[0].0.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("connector conformance", connector_conformance),
        ("gradient integrity", gradient_integrity),
        ("loss masking", loss_masking),
        ("adapter contract", lora_contract),
        ("accumulation equivalence", accumulation_equivalence),
        ("metric oracles", metric_oracles),
        ("end-to-end overfit", || {
            end_to_end_overfit().and_then(|o| if o.ok { Ok(o.summary) } else { Err(o.summary) })
        }),
        ("connector ablation", connector_ablation),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
