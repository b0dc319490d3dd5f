use emogen_core::autograd::Tape;
use emogen_core::model::*;
use emogen_core::tensor::Tensor;
use emogen_core::tokenizer::BASE_VOCAB_SIZE;
use emogen_core::{seeded_rng, ConditionPair, TokenId};
use proptest::prelude::*;
use rand::Rng as _;

fn toy(variant: Variant) -> ModelConfig {
    ModelConfig::toy(variant, 2, 64, 4, 256, 32)
}

fn random_tensor(shape: &[usize], rng: &mut emogen_core::Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Direct O(L^2 d) construction: explicit per-pair relative logits.
fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, rel: &Tensor<f64>) -> Vec<f64> {
    let (h, l, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let max_len = rel.shape()[1];
    let at = |t: &Tensor<f64>, rows: usize, a: usize, b: usize, c: usize| t.data()[(a * rows + b) * dh + c];
    let mut out = vec![0.0; h * l * dh];
    for head in 0..h {
        for i in 0..l {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    let r = (i - j).min(max_len - 1);
                    (0..dh).map(|c| at(q, l, head, i, c) * (at(k, l, head, j, c) + at(rel, max_len, head, r, c))).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..dh {
                out[(head * l + i) * dh + c] = (0..=i).map(|j| w[j] / z * at(v, l, head, j, c)).sum();
            }
        }
    }
    out
}

fn skewed(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, rel: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let [q, k, v, rel] = [q, k, v, rel].map(|t| tape.constant(t.clone()));
    let out = relative_attention(&mut tape, q, k, v, rel, 0.0).unwrap();
    tape.value(out).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn skew_matches_naive(seed in any::<u64>(), h in 1usize..4, l in 1usize..=8, dh in 1usize..9, extra in 0usize..4) {
        let mut rng = seeded_rng(seed);
        // Tables shorter than L exercise distance clamping.
        let max_len = (l + extra).saturating_sub(2).max(1);
        let q = random_tensor(&[h, l, dh], &mut rng);
        let k = random_tensor(&[h, l, dh], &mut rng);
        let v = random_tensor(&[h, l, dh], &mut rng);
        let rel = random_tensor(&[h, max_len, dh], &mut rng);
        let got = skewed(&q, &k, &v, &rel);
        let want = naive_attention(&q, &k, &v, &rel);
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-5, "max abs diff {}", err);
    }

    #[test]
    fn single_position_returns_first_value(seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let q = random_tensor(&[2, 1, 4], &mut rng);
        let k = random_tensor(&[2, 1, 4], &mut rng);
        let v = random_tensor(&[2, 1, 4], &mut rng);
        let rel = random_tensor(&[2, 5, 4], &mut rng);
        prop_assert_eq!(skewed(&q, &k, &v, &rel), v.data().to_vec());
    }
}

#[test]
fn zero_table_is_plain_causal_attention() {
    let mut rng = seeded_rng(4);
    let (h, l, dh) = (2, 6, 5);
    let q = random_tensor(&[h, l, dh], &mut rng);
    let k = random_tensor(&[h, l, dh], &mut rng);
    let v = random_tensor(&[h, l, dh], &mut rng);
    let got = skewed(&q, &k, &v, &Tensor::zeros(&[h, 8, dh]));
    // Plain scaled dot-product with a causal mask, built from tape ops.
    let mut tape = Tape::new();
    let [qv, kv, vv] = [&q, &k, &v].map(|t| tape.constant(t.clone()));
    let kt = tape.transpose(kv).unwrap();
    let s = tape.matmul(qv, kt).unwrap();
    let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
    let mask: Vec<bool> = (0..h * l * l).map(|f| f % l > (f / l) % l).collect();
    let s = tape.masked_fill(s, &mask, f64::NEG_INFINITY).unwrap();
    let w = tape.softmax(s);
    let o = tape.matmul(w, vv).unwrap();
    for (a, b) in got.iter().zip(tape.value(o).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn condition_for(variant: Variant) -> Option<ConditionPair> {
    matches!(variant, Variant::ContinuousToken | Variant::ContinuousConcatenated).then_some(ConditionPair { valence: 0.4, arousal: -0.8 })
}

#[test]
fn causal_for_every_variant() {
    let mut rng = seeded_rng(8);
    for variant in Variant::ALL {
        let mut cfg = toy(variant);
        cfg.max_len = 16;
        let model = Model::<f32>::new(cfg.clone(), &mut rng).unwrap();
        for _ in 0..5 {
            let len = rng.random_range(2..=14);
            let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as TokenId)).collect();
            let j = rng.random_range(1..len);
            let mut other = tokens.clone();
            other[j] = (other[j] + 1 + rng.random_range(0..100)) % cfg.vocab_size as TokenId;
            let c = condition_for(variant);
            let a = model.logits(&tokens, c).unwrap();
            let b = model.logits(&other, c).unwrap();
            for pos in 0..j {
                let bits = |t: &Tensor<f32>| t.row(pos).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a), bits(&b), "{variant} pos {pos} j {j}");
            }
        }
    }
}

/// Independent count: one term per tensor the model is documented to hold.
fn counted(c: &ModelConfig) -> usize {
    let (d, ff, v, l) = (c.d_model, c.d_ff, c.vocab_size, c.max_len);
    let per_layer = [d, d, d * d, d, d * d, d, d * d, d, d * d, d, d, d, d * ff, ff, ff * d, d].iter().sum::<usize>();
    let cond = match c.variant {
        Variant::ContinuousToken => 2 * (d + d),
        Variant::ContinuousConcatenated => 2 * c.d_cond + c.d_cond,
        _ => 0,
    };
    v * (d - c.d_cond) + cond + l * d + c.n_layers * per_layer + 2 * d + d * v + v
}

#[test]
fn parameter_counts() {
    for variant in Variant::ALL {
        let cfg = toy(variant);
        let model = Model::<f32>::new(cfg.clone(), &mut seeded_rng(0)).unwrap();
        assert_eq!(model.params.numel(), counted(&cfg), "{variant}");
        assert_eq!(cfg.param_count(), counted(&cfg), "{variant}");
        let full = ModelConfig::full_scale(variant).param_count();
        assert!((full as f64 - 145e6).abs() <= 0.05 * 145e6, "{variant}: {full}");
    }
    let concat = toy(Variant::ContinuousConcatenated);
    assert_eq!((concat.d_cond, concat.d_token()), (16, 48));
    let mut bad = concat.clone();
    bad.d_cond = 64;
    assert!(Model::<f32>::new(bad, &mut seeded_rng(0)).is_err());
}

#[test]
fn concatenated_condition_reaches_position_zero() {
    for variant in [Variant::ContinuousConcatenated, Variant::ContinuousToken] {
        let model = Model::<f32>::new(toy(variant), &mut seeded_rng(2)).unwrap();
        let tokens = [1005, 40, 900, 480];
        let a = model.logits(&tokens, Some(ConditionPair { valence: 0.0, arousal: 0.0 })).unwrap();
        let b = model.logits(&tokens, Some(ConditionPair { valence: 0.9, arousal: 0.9 })).unwrap();
        assert_ne!(a.row(0), b.row(0), "{variant}");
    }
}

#[test]
fn zeroed_condition_maps_reduce_to_vanilla_with_two_blank_rows() {
    let vanilla = Model::<f64>::new(toy(Variant::Vanilla), &mut seeded_rng(5)).unwrap();
    let mut model = transfer_weights(&vanilla, toy(Variant::ContinuousToken), EmbeddingTransfer::Truncate, &mut seeded_rng(6)).unwrap();
    for name in ["cond.valence.w", "cond.valence.b", "cond.arousal.w", "cond.arousal.b"] {
        model.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let tokens: Vec<TokenId> = vec![1005, 27, 903, 467, 880, 12];
    let cond = model.logits(&tokens, Some(ConditionPair { valence: 0.7, arousal: -0.3 })).unwrap();

    let mut tape = Tape::new();
    let b = vanilla.params.bind(&mut tape, false);
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let emb = tape.embedding(b.var("tok_emb").unwrap(), &ids).unwrap();
    let blank = tape.constant(Tensor::zeros(&[2, 64]));
    let rows = tape.concat(&[blank, emb], 0).unwrap();
    let out = vanilla.head_from_rows(&mut tape, &b, rows).unwrap();
    let reference = tape.value(out);
    for i in 0..tokens.len() {
        for (x, y) in cond.row(i).iter().zip(reference.row(i + 2)) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn transfers_copy_the_trunk() {
    let vanilla = Model::<f32>::new(toy(Variant::Vanilla), &mut seeded_rng(1)).unwrap();
    for variant in Variant::CONDITIONAL {
        let cfg = toy(variant);
        let m = transfer_weights(&vanilla, cfg.clone(), EmbeddingTransfer::Truncate, &mut seeded_rng(2)).unwrap();
        for (name, t) in vanilla.params.iter() {
            if name == "tok_emb" || name.starts_with("head.") {
                continue;
            }
            assert_eq!(m.params.get(name).unwrap(), t, "{variant} {name}");
        }
        let old = vanilla.params.get("tok_emb").unwrap();
        let new = m.params.get("tok_emb").unwrap();
        let w = cfg.d_token();
        for r in 0..BASE_VOCAB_SIZE {
            assert_eq!(&new.row(r)[..w], &old.row(r)[..w], "{variant} row {r}");
        }
    }
    let mut narrow = toy(Variant::ContinuousToken);
    narrow.n_layers = 3;
    match transfer_weights(&vanilla, narrow, EmbeddingTransfer::Truncate, &mut seeded_rng(2)) {
        Err(ModelError::Transfer { tensors, .. }) => assert!(tensors.iter().any(|t| t.starts_with("layers.2."))),
        other => panic!("expected a transfer error, got {other:?}"),
    }
}
