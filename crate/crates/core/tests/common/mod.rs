//! Helpers shared by the integration tests: gradient cases, oracles, fixtures.

#![allow(dead_code)]

use std::sync::Arc;

use factcheck_core::corpus::Split;
use factcheck_core::embedding::{EmbeddingVector, ImageEmbedder};
use factcheck_core::experiment::ExperimentConfig;
use factcheck_core::pipeline::{build_examples, resolve_pad_len, retrieve_all, Stores};
use factcheck_core::synth::{generate, SynthConfig};
use factcheck_core::training::{Example, TrainConfig};
use factcheck_core::model::{ModelConfig, ModelInput, VeracityModel, CLIP_SLOTS};
use factcheck_core::nn::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use factcheck_core::nn::ops::{self, Mode};
use factcheck_core::nn::{gradient_check, GradCheckConfig, GradCheckReport, Gradients, ParamSet};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Checks parameters and input together. The scalar loss is
/// `sum(forward(x) * probe)` for a fixed random `probe`.
fn check_layer<F, B>(ps: &ParamSet, x: &Array2<f64>, forward: F, backward: B, tol: f64) -> GradCheckReport
where
    F: Fn(&ParamSet, &Array2<f64>) -> Array2<f64>,
    B: Fn(&ParamSet, &mut Gradients, &Array2<f64>, &Array2<f64>) -> Array2<f64>,
{
    let y = forward(ps, x);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = random_matrix(&mut rng, y.nrows(), y.ncols());
    let mut grads = ps.zero_grads();
    let dx = backward(ps, &mut grads, x, &probe);
    let mut analytic = grads.flatten();
    analytic.extend(dx.iter());
    let mut point = ps.flatten();
    point.extend(x.iter());
    let np = ps.numel();
    let shape = x.dim();
    let mut work = ps.clone();
    let loss = |p: &[f64]| {
        work.set_flat(&p[..np]);
        let xi = Array2::from_shape_vec(shape, p[np..].to_vec()).unwrap();
        (forward(&work, &xi) * &probe).sum()
    };
    gradient_check(loss, &point, &analytic, &GradCheckConfig::with_tol(tol))
}

pub fn linear_case() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamSet::new();
    let lin = Linear::new(&mut ps, "lin", 5, 4, &mut rng);
    let x = random_matrix(&mut rng, 3, 5);
    let r = check_layer(
        &ps,
        &x,
        |ps, x| lin.forward(ps, x.view()).unwrap(),
        |ps, g, x, dy| lin.backward(ps, g, x.view(), dy.view()),
        1e-5,
    );
    r
}

pub fn layer_norm_case() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::new();
    let ln = LayerNorm::new(&mut ps, "ln", 6);
    // Move gamma/beta off their initial values so their gradients matter.
    let flat: Vec<f64> = (0..ps.numel()).map(|_| rng.random_range(0.5..1.5)).collect();
    ps.set_flat(&flat);
    let x = random_matrix(&mut rng, 4, 6);
    let r = check_layer(
        &ps,
        &x,
        |ps, x| ln.forward(ps, x.view()).unwrap().0,
        |ps, g, x, dy| {
            let (_, cache) = ln.forward(ps, x.view()).unwrap();
            ln.backward(ps, g, &cache, dy.view())
        },
        1e-4,
    );
    r
}

pub fn attention_case(mask: Option<Vec<bool>>) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::new();
    let mha = MultiHeadAttention::new(&mut ps, "mha", 8, 2, &mut rng).unwrap();
    let x = random_matrix(&mut rng, 3, 8);
    check_layer(
        &ps,
        &x,
        |ps, x| mha.forward(ps, x.view(), mask.as_deref()).unwrap().0,
        |ps, g, x, dy| {
            let (_, cache) = mha.forward(ps, x.view(), mask.as_deref()).unwrap();
            mha.backward(ps, g, &cache, dy.view())
        },
        1e-4,
    )
}

pub fn feed_forward_case() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamSet::new();
    let ffn = FeedForward::new(&mut ps, "ffn", 6, 10, &mut rng);
    let x = random_matrix(&mut rng, 3, 6);
    let r = check_layer(
        &ps,
        &x,
        |ps, x| ffn.forward(ps, x.view()).unwrap().0,
        |ps, g, x, dy| {
            let (_, cache) = ffn.forward(ps, x.view()).unwrap();
            ffn.backward(ps, g, &cache, dy.view())
        },
        1e-4,
    );
    r
}

pub fn max_pool_case() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_matrix(&mut rng, 5, 7);
    let probe: Array1<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, argmax) = ops::adaptive_max_pool(x.view(), None);
    let dx = ops::adaptive_max_pool_backward(&argmax, 5, probe.view());
    let loss = |p: &[f64]| {
        let xi = Array2::from_shape_vec((5, 7), p.to_vec()).unwrap();
        ops::adaptive_max_pool(xi.view(), None).0.dot(&probe)
    };
    let point: Vec<f64> = x.iter().copied().collect();
    let analytic: Vec<f64> = dx.iter().copied().collect();
    let r = gradient_check(loss, &point, &analytic, &GradCheckConfig::default());
    r
}

pub fn softmax_cross_entropy_case() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random_matrix(&mut rng, 4, 5) * 3.0;
    let targets = [0usize, 3, 4, 1];
    let (_, grad) = ops::softmax_cross_entropy(&logits, &targets).unwrap();
    let loss = |p: &[f64]| {
        let l = Array2::from_shape_vec((4, 5), p.to_vec()).unwrap();
        ops::softmax_cross_entropy(&l, &targets).unwrap().0
    };
    let point: Vec<f64> = logits.iter().copied().collect();
    let analytic: Vec<f64> = grad.iter().copied().collect();
    let r = gradient_check(loss, &point, &analytic, &GradCheckConfig::default());
    r
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        d_clip: 8,
        d_word: 6,
        d_text_model: 8,
        n_heads: 2,
        n_blocks: 2,
        d_ff: Some(12),
        mlp_dims: vec![10, 7, 5],
        mlp_dropout: 0.5,
        encoder_dropout: 0.1,
        pad_len: 6,
        clip_positional: true,
        ..ModelConfig::default()
    }
}

fn model_inputs(cfg: &ModelConfig, seed: u64) -> Vec<(ModelInput, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|i| {
            let real = 2 + i;
            let clip = random_matrix(&mut rng, CLIP_SLOTS, cfg.d_clip);
            let mut words = Array2::zeros((cfg.pad_len, cfg.d_word));
            for r in 0..real {
                for c in 0..cfg.d_word {
                    words[[r, c]] = rng.random_range(-1.0..1.0);
                }
            }
            let input = ModelInput {
                clip_slots: clip,
                word_seq: words,
                seq_mask: (0..cfg.pad_len).map(|r| r < real).collect(),
            };
            (input, i % 5)
        })
        .collect()
}

/// Mean batch loss in train mode with per-item dropout streams fixed by
/// position, so the loss is a deterministic function of the parameters.
pub fn full_model_report(cfg: ModelConfig) -> GradCheckReport {
    let (model, ps) = VeracityModel::new(cfg.clone(), 11).unwrap();
    let data = model_inputs(&cfg, 12);
    let batch: Vec<(&ModelInput, usize)> = data.iter().map(|(x, t)| (x, *t)).collect();
    let rng_for = |i: usize| ChaCha8Rng::seed_from_u64(1000 + i as u64);
    let mut grads = ps.zero_grads();
    model
        .batch_loss(&ps, &batch, Mode::Train, Some(&mut grads), batch.len(), rng_for)
        .unwrap();
    let mut work = ps.clone();
    let loss = |p: &[f64]| {
        work.set_flat(p);
        let out = model
            .batch_loss(&work, &batch, Mode::Train, None, batch.len(), rng_for)
            .unwrap();
        out.loss_sum / batch.len() as f64
    };
    let cfg = GradCheckConfig {
        max_coords: 600,
        ..GradCheckConfig::with_tol(1e-4)
    };
    gradient_check(loss, &ps.flatten(), &grads.flatten(), &cfg)
}

pub fn flipped_linear_case() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamSet::new();
    let lin = Linear::new(&mut ps, "lin", 4, 3, &mut rng);
    let x = random_matrix(&mut rng, 2, 4);
    let r = check_layer(
        &ps,
        &x,
        |ps, x| lin.forward(ps, x.view()).unwrap(),
        |ps, g, x, dy| -lin.backward(ps, g, x.view(), dy.view()),
        1e-5,
    );
    r
}

pub fn unmasked_model_config() -> ModelConfig {
    ModelConfig {
        mask_padding: false,
        text_positional: false,
        ..small_model_config()
    }
}

/// Every case that must pass, labelled.
pub fn suite() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("linear", linear_case()),
        ("layer_norm", layer_norm_case()),
        ("attention", attention_case(None)),
        ("masked_attention", attention_case(Some(vec![true, false, true]))),
        ("feed_forward", feed_forward_case()),
        ("max_pool", max_pool_case()),
        ("softmax_cross_entropy", softmax_cross_entropy_case()),
        ("full_model", full_model_report(small_model_config())),
        ("full_model_unmasked", full_model_report(unmasked_model_config())),
    ]
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    EmbeddingVector::new(v.into_iter().map(|x| x / n).collect()).unwrap()
}

/// Cosine with explicit norms, then an insertion sort by (score desc, index asc).
pub fn brute_force_rank(claim: &EmbeddingVector, passages: &[(usize, EmbeddingVector)]) -> Vec<usize> {
    let cos = |a: &[f32], b: &[f32]| {
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for i in 0..a.len() {
            dot += a[i] as f64 * b[i] as f64;
            na += a[i] as f64 * a[i] as f64;
            nb += b[i] as f64 * b[i] as f64;
        }
        dot / (na.sqrt() * nb.sqrt())
    };
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (idx, v) in passages {
        let s = cos(claim.values(), v.values());
        let pos = out
            .iter()
            .position(|&(j, t)| s > t + 1e-12 || ((s - t).abs() <= 1e-12 && *idx < j))
            .unwrap_or(out.len());
        out.insert(pos, (*idx, s));
    }
    out.into_iter().map(|(i, _)| i).collect()
}

/// Scripted per-class scores straight from the definitions.
pub fn scripted_scores(m: &[[u64; 5]; 5]) -> (Vec<(f64, f64, f64)>, f64) {
    let mut rows = Vec::new();
    let mut weighted = 0.0;
    let mut total = 0.0;
    for c in 0..5 {
        let tp = m[c][c] as f64;
        let predicted: f64 = (0..5).map(|r| m[r][c] as f64).sum();
        let actual: f64 = (0..5).map(|k| m[c][k] as f64).sum();
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        weighted += actual * f;
        total += actual;
        rows.push((p, r, f));
    }
    (rows, weighted / total)
}

/// Everything needed to train on the synthetic corpus.
pub struct Fixture {
    pub model: VeracityModel,
    pub init: ParamSet,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub train_cfg: TrainConfig,
}

/// Synthetic train/val corpora wired through retrieval and the encoders
/// named by `exp`. Images come from the generator; every other encoder is
/// deterministic.
pub fn synthetic_fixture(exp: &ExperimentConfig, n_train: usize, n_val: usize) -> Fixture {
    let sc = SynthConfig {
        n_pairs: n_train,
        image_dim: exp.model.d_clip,
        ..SynthConfig::default()
    };
    let tr = generate(&sc, Split::Train).unwrap();
    let va = generate(&SynthConfig { n_pairs: n_val, ..sc }, Split::Val).unwrap();
    let mut images = tr.images.clone();
    for (k, v) in va.images.iter() {
        images.insert(k, v.clone()).unwrap();
    }
    let mut stores = Stores::open(&exp.stores, &exp.model).unwrap();
    stores.clip_image = ImageEmbedder::Store(Arc::new(images));
    let ts = retrieve_all(&tr.dataset, &exp.retrieval, &stores).unwrap();
    let vs = retrieve_all(&va.dataset, &exp.retrieval, &stores).unwrap();
    let mc = resolve_pad_len(&exp.model, &tr.dataset, &ts);
    let train = build_examples(&tr.dataset, &ts, &stores, &mc).unwrap();
    let val = build_examples(&va.dataset, &vs, &stores, &mc).unwrap();
    let (model, init) = VeracityModel::new(mc, 1).unwrap();
    Fixture {
        model,
        init,
        train,
        val,
        train_cfg: TrainConfig {
            seed: 3,
            ..exp.train.clone()
        },
    }
}
