use factcheck_core::corpus::{
    filter_invalid, read_dataset, write_dataset, ClaimDocPair, Dataset, Format, Label, Split,
};
use factcheck_core::embedding::{deterministic_encode, normalize, EmbeddingStore, EmbeddingVector};
use factcheck_core::metrics::{confusion_matrix, prf1};
use factcheck_core::model::{argmax, ModelConfig, ModelInput, VeracityModel, CLIP_SLOTS};
use factcheck_core::nn::layers::MultiHeadAttention;
use factcheck_core::nn::ops::{self, Mode};
use factcheck_core::nn::ParamSet;
use factcheck_core::retrieval::{rank_passages, segment, select_evidence, Granularity};
use factcheck_core::training::lr_schedule;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn label() -> impl Strategy<Value = Label> {
    (0usize..5).prop_map(|i| Label::from_index(i).unwrap())
}

fn text() -> impl Strategy<Value = String> {
    // Includes commas, quotes and newlines to exercise CSV escaping.
    "[a-zA-Z0-9 ,\"'\\n\u{e9}\u{2019}]{0,30}"
}

fn pair(i: usize) -> impl Strategy<Value = ClaimDocPair> {
    (
        "[a-z ]{1,20}",
        text(),
        "[a-z0-9/._-]{1,12}",
        text(),
        "[a-zA-Z .,]{1,40}",
        "[a-z0-9/._-]{1,12}",
        text(),
        proptest::option::of(label()),
    )
        .prop_map(move |(c, co, ci, dt_extra, dt, di, doo, l)| ClaimDocPair {
            id: format!("id-{i}"),
            claim_text: format!("x{c}"),
            claim_image_key: ci,
            claim_ocr: co,
            doc_text: format!("{dt}{}", dt_extra.replace('\n', " ")),
            doc_image_key: di,
            doc_ocr: doo,
            label: l,
        })
}

fn dataset() -> impl Strategy<Value = Dataset> {
    (0usize..8)
        .prop_flat_map(|n| (0..n).map(pair).collect::<Vec<_>>())
        .prop_map(|pairs| Dataset::new(Split::Train, pairs).unwrap())
}

fn unit_vectors(n: usize, dim: usize) -> impl Strategy<Value = Vec<EmbeddingVector>> {
    proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, dim), n).prop_filter_map(
        "nonzero",
        |vs| {
            vs.into_iter()
                .map(|v| EmbeddingVector::new(v).ok().and_then(|e| normalize(&e).ok()))
                .collect()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_round_trips(ds in dataset(), jsonl in any::<bool>()) {
        let fmt = if jsonl { Format::Jsonl } else { Format::Csv };
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf, fmt).unwrap();
        let back = read_dataset(buf.as_slice(), fmt, Split::Train).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn filter_is_idempotent_and_partitions(ds in dataset(), plant in proptest::collection::vec(any::<bool>(), 8)) {
        let mut ds = ds;
        for (p, &bad) in ds.pairs.iter_mut().zip(&plant) {
            if bad {
                p.doc_text = format!(" We\u{2019}ve detected that JavaScript is disabled {}", p.doc_text);
            }
        }
        let n = ds.len();
        let (once, removed) = filter_invalid(ds);
        prop_assert_eq!(once.len() + removed.len(), n);
        let (twice, removed2) = filter_invalid(once.clone());
        prop_assert_eq!(twice, once);
        prop_assert!(removed2.is_empty());
    }

    #[test]
    fn store_round_trips(entries in proptest::collection::vec(("[a-zA-Z0-9_/.-]{1,16}", proptest::collection::vec(-1e6f32..1e6, 5)), 0..10)) {
        let mut s = EmbeddingStore::new(5).unwrap();
        for (k, v) in entries {
            if !s.contains(&k) {
                s.insert(k, EmbeddingVector::new(v).unwrap()).unwrap();
            }
        }
        let mut buf = Vec::new();
        s.write_binary(&mut buf).unwrap();
        let back = EmbeddingStore::read_binary(buf.as_slice()).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn normalize_is_idempotent(v in proptest::collection::vec(-100f32..100.0, 1..20)) {
        let e = EmbeddingVector::new(v).unwrap();
        prop_assume!(e.norm() > 1e-3);
        let once = normalize(&e).unwrap();
        let twice = normalize(&once).unwrap();
        prop_assert!((once.norm() - 1.0).abs() < 1e-6);
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_dot_is_bounded(vs in unit_vectors(2, 16)) {
        let d = vs[0].dot(&vs[1]).unwrap();
        prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&d));
    }

    #[test]
    fn ranking_ignores_input_order(vs in unit_vectors(8, 6), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let claim = vs[0].clone();
        let passages: Vec<(usize, EmbeddingVector)> = vs[1..].iter().cloned().enumerate().collect();
        let mut shuffled = passages.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(rank_passages(&claim, &passages).unwrap(), rank_passages(&claim, &shuffled).unwrap());
    }

    #[test]
    fn top_k_is_prefix_monotone(doc in proptest::collection::vec("[a-z]{2,6}( [a-z]{2,6}){0,5}", 1..20), claim in "[a-z]{2,6}( [a-z]{2,6}){0,5}", k1 in 1usize..20, k2 in 1usize..20) {
        let doc_text = doc.iter().map(|s| format!("{s}.")).collect::<Vec<_>>().join(" ");
        let passages = segment(&doc_text, Granularity::Sentence).unwrap();
        let c = deterministic_encode(&claim, 16, 1);
        let vecs: Vec<_> = passages.iter().map(|p| (p.index, deterministic_encode(&p.text, 16, 1))).collect();
        let ranked = rank_passages(&c, &vecs).unwrap();
        let (lo, hi) = (k1.min(k2), k1.max(k2));
        let a = select_evidence(&ranked, &passages, lo, false).unwrap();
        let b = select_evidence(&ranked, &passages, hi, false).unwrap();
        prop_assert_eq!(&a.passage_indices[..], &b.passage_indices[..a.passage_indices.len()]);
        prop_assert!(a.scores.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(b.scores.iter().all(|s| (-1.0 - 1e-6..=1.0 + 1e-6).contains(s)));
        prop_assert!(a.passage_indices.len() <= lo);
    }

    #[test]
    fn metrics_ignore_pair_order(pairs in proptest::collection::vec((label(), label()), 1..60), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (p, g): (Vec<Label>, Vec<Label>) = pairs.iter().cloned().unzip();
        let m1 = prf1(&confusion_matrix(&p, &g).unwrap());
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (p2, g2): (Vec<Label>, Vec<Label>) = shuffled.into_iter().unzip();
        let m2 = prf1(&confusion_matrix(&p2, &g2).unwrap());
        prop_assert_eq!(&m1, &m2);
        let supported: Vec<f64> = m1.per_class.iter().filter(|c| c.support > 0).map(|c| c.f1).collect();
        let lo = supported.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = supported.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m1.weighted_f1 >= lo - 1e-12 && m1.weighted_f1 <= hi + 1e-12);
        for c in &m1.per_class {
            prop_assert!((0.0..=1.0).contains(&c.precision) && (0.0..=1.0).contains(&c.recall) && (0.0..=1.0).contains(&c.f1));
        }
    }

    #[test]
    fn argmax_ignores_logit_shift(v in proptest::collection::vec(-50f64..50.0, 5), shift in -1e3f64..1e3) {
        let a = Array1::from(v.clone());
        let b = a.mapv(|x| x + shift);
        prop_assert_eq!(argmax(a.view()), argmax(b.view()));
        let pa = ops::softmax(a.view());
        prop_assert_eq!(argmax(pa.view()), argmax(a.view()));
    }

    #[test]
    fn schedule_is_single_peaked(warmup in 1usize..200, extra in 1usize..500) {
        let total = warmup + extra;
        let peak = 1e-4;
        let trace: Vec<f64> = (0..=total).map(|s| lr_schedule(s, total, warmup, peak)).collect();
        prop_assert_eq!(trace[0], 0.0);
        prop_assert_eq!(trace[warmup], peak);
        prop_assert_eq!(trace[total], 0.0);
        prop_assert!(trace[..=warmup].windows(2).all(|w| w[1] > w[0]));
        prop_assert!(trace[warmup..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn ops_stay_finite_on_large_inputs(vals in proptest::collection::vec(-1e3f64..1e3, 24)) {
        let x = Array2::from_shape_vec((3, 8), vals).unwrap();
        let (y, _) = ops::layer_norm(x.view(), Array1::ones(8).view(), Array1::zeros(8).view(), ops::LAYER_NORM_EPS).unwrap();
        prop_assert!(y.iter().all(|v| v.is_finite()));
        let mut ps = ParamSet::new();
        let mha = MultiHeadAttention::new(&mut ps, "a", 8, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (z, cache) = mha.forward(&ps, x.view(), None).unwrap();
        prop_assert!(z.iter().all(|v| v.is_finite()));
        prop_assert_eq!(z.dim(), x.dim());
        for w in &cache.weights {
            for row in w.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
        let logits = x.slice(ndarray::s![.., ..5]).to_owned();
        let (loss, grad) = ops::softmax_cross_entropy(&logits, &[0, 1, 4]).unwrap();
        prop_assert!(loss.is_finite() && grad.iter().all(|v| v.is_finite()));
    }
}

fn model_config() -> ModelConfig {
    ModelConfig {
        d_clip: 8,
        d_word: 6,
        d_text_model: 8,
        n_heads: 2,
        d_ff: Some(16),
        mlp_dims: vec![12, 6, 5],
        pad_len: 7,
        ..ModelConfig::default()
    }
}

fn input(cfg: &ModelConfig, seed: u64, real: usize) -> ModelInput {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = Array2::zeros((cfg.pad_len, cfg.d_word));
    for r in 0..real {
        for c in 0..cfg.d_word {
            words[[r, c]] = rng.random_range(-1.0..1.0);
        }
    }
    ModelInput {
        clip_slots: Array2::from_shape_fn((CLIP_SLOTS, cfg.d_clip), |_| rng.random_range(-1.0..1.0)),
        word_seq: words,
        seq_mask: (0..cfg.pad_len).map(|r| r < real).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn batch_items_do_not_interact(seeds in proptest::collection::vec(any::<u64>(), 2..5), rot in 1usize..4) {
        let cfg = model_config();
        let (model, ps) = VeracityModel::new(cfg.clone(), 5).unwrap();
        let inputs: Vec<ModelInput> = seeds.iter().map(|&s| input(&cfg, s, 1 + (s % 7) as usize)).collect();
        let single: Vec<Array1<f64>> = inputs.iter().map(|x| model.probabilities(&ps, x).unwrap()).collect();
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.rotate_left(rot % inputs.len());
        for &i in &order {
            prop_assert_eq!(&model.probabilities(&ps, &inputs[i]).unwrap(), &single[i]);
        }
        let batch: Vec<(&ModelInput, usize)> = order.iter().map(|&i| (&inputs[i], 0)).collect();
        let out = model.batch_loss(&ps, &batch, Mode::Eval, None, batch.len(), |_| ChaCha8Rng::seed_from_u64(0)).unwrap();
        let expected: f64 = order.iter().map(|&i| -single[i][0].ln()).sum();
        prop_assert!((out.loss_sum - expected).abs() < 1e-9);
    }

    #[test]
    fn eval_ignores_dropout_seed(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        let cfg = model_config();
        let (model, ps) = VeracityModel::new(cfg.clone(), 6).unwrap();
        let x = input(&cfg, seed, 4);
        let p1 = model.forward(&ps, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(a)).unwrap();
        let p2 = model.forward(&ps, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(b)).unwrap();
        prop_assert_eq!(p1, p2);
    }

    #[test]
    fn extra_padding_is_invisible(seed in any::<u64>(), real in 1usize..7, extra in 1usize..5) {
        let cfg = ModelConfig { text_positional: false, ..model_config() };
        let (model, ps) = VeracityModel::new(cfg.clone(), 7).unwrap();
        let x = input(&cfg, seed, real);
        let mut longer = x.clone();
        let mut words = Array2::zeros((cfg.pad_len + extra, cfg.d_word));
        words.slice_mut(ndarray::s![..cfg.pad_len, ..]).assign(&x.word_seq);
        longer.word_seq = words;
        longer.seq_mask.extend(std::iter::repeat_n(false, extra));
        let p1 = model.probabilities(&ps, &x).unwrap();
        let p2 = model.probabilities(&ps, &longer).unwrap();
        prop_assert_eq!(p1, p2);
    }
}
