mod common;

use common::{init_decoder, random_decoder_config, random_padding, self_and_injected};
use kvdistill::autograd::Graph;
use kvdistill::transformer::{
    build_causal_mask, causal_attention, AttentionMask, KvSource, PositionScheme, TransformerConfig, MASK_NEG,
};
use kvdistill::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scores, masked softmax and weighted sum, one query at a time.
fn attention_loop(q: &[[f64; 2]], k: &[[f64; 2]], v: &[[f64; 2]], mask: &AttentionMask) -> Vec<[f64; 2]> {
    let n = q.len();
    let scale = 1.0 / 2f64.sqrt();
    let mut out = vec![[0.0; 2]; n];
    for i in 0..n {
        let mut scores = vec![0.0; n];
        for j in 0..n {
            scores[j] = (q[i][0] * k[j][0] + q[i][1] * k[j][1]) * scale + mask.value(0, i, j);
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for j in 0..n {
            out[i][0] += w[j] / z * v[j][0];
            out[i][1] += w[j] / z * v[j][1];
        }
    }
    out
}

#[test]
fn attention_matches_scalar_loop() {
    let q = [[0.3, -1.2], [0.5, 0.1], [-0.7, 0.9]];
    let k = [[1.0, 0.2], [-0.4, 0.8], [0.6, -0.3]];
    let v = [[0.1, 2.0], [-1.5, 0.4], [0.7, 0.7]];
    let mask = build_causal_mask(3, &[false; 3]).unwrap();
    let t = |rows: &[[f64; 2]; 3]| Tensor::new([1, 3, 1, 2], rows.iter().flatten().copied().collect()).unwrap();
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(t(&q)), g.constant(t(&k)), g.constant(t(&v)));
    let out = causal_attention(&mut g, qv, kv, vv, &mask).unwrap();
    let want: Vec<f64> = attention_loop(&q, &k, &v, &mask).into_iter().flatten().collect();
    for (a, b) in g.value(out).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn single_position_attention_returns_value_row() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::new([1, 1, 1, 2], vec![3.0, -2.0]).unwrap());
    let k = g.constant(Tensor::new([1, 1, 1, 2], vec![0.5, 0.5]).unwrap());
    let v = g.constant(Tensor::new([1, 1, 1, 2], vec![0.25, -4.0]).unwrap());
    let out = causal_attention(&mut g, q, k, v, &build_causal_mask(1, &[false]).unwrap()).unwrap();
    assert_eq!(g.value(out).data(), &[0.25, -4.0]);
}

#[test]
fn identical_keys_give_uniform_weights() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::new([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let k = g.constant(Tensor::full([1, 3, 1, 1], 0.7));
    let v = g.constant(Tensor::new([1, 3, 1, 1], vec![3.0, 6.0, 9.0]).unwrap());
    let out = causal_attention(&mut g, q, k, v, &build_causal_mask(3, &[false; 3]).unwrap()).unwrap();
    let d = g.value(out).data();
    assert!((d[0] - 3.0).abs() < 1e-12 && (d[1] - 4.5).abs() < 1e-12 && (d[2] - 6.0).abs() < 1e-12);
}

#[test]
fn mask_cells_enumerated() {
    let m = build_causal_mask(3, &[false, false, true]).unwrap();
    let expected = [[0.0, MASK_NEG, MASK_NEG], [0.0, 0.0, MASK_NEG], [0.0, 0.0, MASK_NEG]];
    for (i, row) in expected.iter().enumerate() {
        for (j, &want) in row.iter().enumerate() {
            assert_eq!(m.value(0, i, j), want, "cell ({i},{j})");
        }
    }
}

#[test]
fn embed_tokens_copies_rows() {
    let cfg = TransformerConfig {
        n_layers: 1,
        d_model: 4,
        n_heads: 1,
        vocab_size: 5,
        max_seq: 4,
        d_ff: 4,
        position: PositionScheme::Rotary,
        rope_base: 10_000.0,
    };
    let (params, dec) = init_decoder(&cfg, 1);
    let table = params.get(dec.token_table()).clone();
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let e = dec.embed_tokens(&mut g, &bound, &[2, 0]).unwrap();
    let got = g.value(e);
    assert_eq!(got.row(0), table.row(2));
    assert_eq!(got.row(1), table.row(0));
}

#[test]
fn inject_rejects_wrong_sequence_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = random_decoder_config(&mut rng);
    let (params, dec) = init_decoder(&cfg, 0);
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let x4 = g.constant(Tensor::randn([1, 4, cfg.d_model], 1.0, &mut rng));
    let x3 = g.constant(Tensor::randn([1, 3, cfg.d_model], 1.0, &mut rng));
    let own = dec
        .forward(&mut g, &bound, x4, &AttentionMask::causal_batch(&[vec![false; 4]]).unwrap(), KvSource::Own)
        .unwrap();
    let err = dec
        .forward(&mut g, &bound, x3, &AttentionMask::causal_batch(&[vec![false; 3]]).unwrap(), KvSource::Inject(&own.cache))
        .err()
        .unwrap();
    assert!(matches!(err, Error::CacheMismatch(_)), "{err}");
}

#[test]
fn injection_identity_over_ten_configs() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_decoder_config(&mut rng);
        let (params, dec) = init_decoder(&cfg, seed);
        let (b, s) = (2, 6);
        let x = Tensor::randn([b, s, cfg.d_model], 1.0, &mut rng);
        let mask = AttentionMask::causal_batch(&random_padding(&mut rng, b, s)).unwrap();
        let (own, inj) = self_and_injected(&params, &dec, &x, &mask);
        assert!(own.bitwise_eq(&inj), "seed {seed} config {cfg:?}");
    }
}

fn config_strategy() -> impl Strategy<Value = (TransformerConfig, u64, usize, usize)> {
    (1usize..=3, 1usize..=3, prop_oneof![Just(2usize), Just(4)], 5usize..=12, any::<bool>(), any::<u64>(), 1usize..=3, 1usize..=6)
        .prop_map(|(layers, heads, dh, vocab, rotary, seed, batch, seq)| {
            let cfg = TransformerConfig {
                n_layers: layers,
                d_model: heads * dh,
                n_heads: heads,
                vocab_size: vocab,
                max_seq: 8,
                d_ff: 8,
                position: if rotary { PositionScheme::Rotary } else { PositionScheme::LearnedAbsolute },
                rope_base: 10_000.0,
            };
            (cfg, seed, batch, seq)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn self_injection_is_bitwise_identity((cfg, seed, b, s) in config_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, dec) = init_decoder(&cfg, seed);
        let x = Tensor::randn([b, s, cfg.d_model], 1.0, &mut rng);
        let mask = AttentionMask::causal_batch(&random_padding(&mut rng, b, s)).unwrap();
        let (own, inj) = self_and_injected(&params, &dec, &x, &mask);
        prop_assert!(own.bitwise_eq(&inj));
    }

    #[test]
    fn twin_cross_injection_agrees((cfg, seed, b, s) in config_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (student, dec_s) = init_decoder(&cfg, seed);
        let (teacher, dec_t) = (student.clone(), dec_s.clone());
        let x = Tensor::randn([b, s, cfg.d_model], 1.0, &mut rng);
        let mask = AttentionMask::causal_batch(&random_padding(&mut rng, b, s)).unwrap();

        let mut gs = Graph::new();
        let bs = student.bind_frozen(&mut gs);
        let xs = gs.constant(x.clone());
        let xs = dec_s.add_positions(&mut gs, &bs, xs).unwrap();
        let out = dec_s.forward(&mut gs, &bs, xs, &mask, KvSource::Own).unwrap();

        let mut gt = Graph::new();
        let bt = teacher.bind_frozen(&mut gt);
        let cache = out.cache.transfer(&gs, &mut gt);
        let xt = gt.constant(x);
        let xt = dec_t.add_positions(&mut gt, &bt, xt).unwrap();
        let z = dec_t.forward(&mut gt, &bt, xt, &mask, KvSource::Inject(&cache)).unwrap();
        prop_assert!(gs.value(out.logits).max_abs_diff(gt.value(z.logits)) <= 1e-10);
    }

    #[test]
    fn cache_shapes_follow_config((cfg, seed, b, s) in config_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, dec) = init_decoder(&cfg, seed);
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let x = g.constant(Tensor::randn([b, s, cfg.d_model], 1.0, &mut rng));
        let mask = AttentionMask::causal_batch(&random_padding(&mut rng, b, s)).unwrap();
        let out = dec.forward(&mut g, &bound, x, &mask, KvSource::Own).unwrap();
        prop_assert_eq!(out.cache.n_layers(), cfg.n_layers);
        prop_assert!(out.cache.validate(&g, &cfg).is_ok());
        prop_assert_eq!(g.shape(out.logits), &[b, s, cfg.vocab_size][..]);
        let inj = dec.forward(&mut g, &bound, x, &mask, KvSource::Inject(&out.cache)).unwrap();
        for l in 0..cfg.n_layers {
            prop_assert_eq!(inj.cache.layer(l), out.cache.layer(l));
        }
    }

    #[test]
    fn later_positions_do_not_affect_earlier_logits(
        (cfg, seed, _b, s) in config_strategy(),
        t0_frac in 0.0f64..1.0,
    ) {
        prop_assume!(s >= 2);
        let t0 = ((s - 1) as f64 * t0_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, dec) = init_decoder(&cfg, seed);
        let x = Tensor::randn([1, s, cfg.d_model], 1.0, &mut rng);
        let mut y = x.clone();
        let d = cfg.d_model;
        for e in (t0 + 1) * d..s * d {
            y.data_mut()[e] += 0.5 + e as f64 * 0.01;
        }
        let mask = AttentionMask::causal_batch(&[vec![false; s]]).unwrap();
        let (zx, _) = self_and_injected(&params, &dec, &x, &mask);
        let (zy, _) = self_and_injected(&params, &dec, &y, &mask);
        let v = cfg.vocab_size;
        prop_assert_eq!(&zx.data()[..(t0 + 1) * v], &zy.data()[..(t0 + 1) * v]);
        prop_assert!(zx.data()[(t0 + 1) * v..] != zy.data()[(t0 + 1) * v..]);
    }
}
