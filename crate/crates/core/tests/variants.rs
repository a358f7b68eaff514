use attnlab::attention::{
    attend, decode::decode_sequence, forward_grouped, forward_mla_lite, forward_qkv, forward_qv,
    forward_qv_ka, AttentionWeights, ModelConfig, Variant,
};
use attnlab::kvcache::cache_report;
use attnlab::positional::PosScheme;
use attnlab::tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn input(t: usize, d: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[t, d], 1.0, &mut rng(seed))
}

fn all_variants() -> Vec<Variant> {
    vec![
        Variant::Qkv,
        Variant::Qv,
        Variant::Mqa,
        Variant::Gqa { groups: 2 },
        Variant::Qvvv { groups: 2 },
        Variant::MlaLite { d_latent: 12 },
        Variant::VsharedUniqueK { groups: 2 },
        Variant::QvKa { d_ctx: 6 },
    ]
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

#[test]
fn qv_is_qkv_with_keys_copied_from_values() {
    for causal in [false, true] {
        let qv = ModelConfig::new(16, 4, Variant::Qv).with_causal(causal);
        let qkv = qv.clone().with_variant(Variant::Qkv);
        let w = AttentionWeights::init(&qv, &mut rng(1));
        let mut w2 = w.clone();
        w2.w_k = w.w_v.clone();
        let x = input(6, 16, 2);
        let a = attend(&x, &x, &w, &qv).unwrap();
        let b = attend(&x, &x, &w2, &qkv).unwrap();
        assert!(max_diff(&a.out, &b.out) < 1e-12);
    }
}

#[test]
fn grouping_degenerates_to_qkv_and_mqa() {
    let qkv = ModelConfig::new(16, 4, Variant::Qkv).with_causal(true);
    let w = AttentionWeights::init(&qkv, &mut rng(3));
    let x = input(5, 16, 4);
    let full = attend(&x, &x, &w, &qkv).unwrap();
    let gqa_h = attend(
        &x,
        &x,
        &w,
        &qkv.clone().with_variant(Variant::Gqa { groups: 4 }),
    )
    .unwrap();
    assert_eq!(full.out, gqa_h.out);

    let mqa = qkv.clone().with_variant(Variant::Mqa);
    let w1 = AttentionWeights::init(&mqa, &mut rng(5));
    let a = attend(&x, &x, &w1, &mqa).unwrap();
    let b = attend(
        &x,
        &x,
        &w1,
        &mqa.clone().with_variant(Variant::Gqa { groups: 1 }),
    )
    .unwrap();
    assert_eq!(a.out, b.out);
}

#[test]
fn heads_share_contiguous_groups() {
    let cfg = ModelConfig::new(12, 6, Variant::Gqa { groups: 2 });
    let slots: Vec<usize> = (0..6).map(|i| cfg.value_slot(i)).collect();
    assert_eq!(slots, vec![0, 0, 0, 1, 1, 1]);
}

#[test]
fn vshared_with_one_group_per_head_is_qkv() {
    let qkv = ModelConfig::new(16, 4, Variant::Qkv);
    let w = AttentionWeights::init(&qkv, &mut rng(6));
    let x = input(4, 16, 7);
    let a = attend(&x, &x, &w, &qkv).unwrap();
    let b = attend(
        &x,
        &x,
        &w,
        &qkv.clone()
            .with_variant(Variant::VsharedUniqueK { groups: 4 }),
    )
    .unwrap();
    assert_eq!(a.out, b.out);
}

#[test]
fn uncompressed_mla_is_qkv_on_up_projections() {
    let mla = ModelConfig::new(16, 2, Variant::MlaLite { d_latent: 16 }).with_causal(true);
    let mut w = AttentionWeights::init(&mla, &mut rng(8));
    w.w_dkv = Some(Tensor::identity(16));
    let qkv = mla.clone().with_variant(Variant::Qkv);
    let mut w2 = AttentionWeights::init(&qkv, &mut rng(9));
    w2.w_q = w.w_q.clone();
    w2.w_k = w.w_uk.clone();
    w2.w_v = w.w_uv.clone();
    w2.w_o = w.w_o.clone();
    let x = input(5, 16, 10);
    let a = attend(&x, &x, &w, &mla).unwrap();
    let b = attend(&x, &x, &w2, &qkv).unwrap();
    assert!(max_diff(&a.out, &b.out) < 1e-12);
}

#[test]
fn qv_ka_without_context_is_qv() {
    let (dm, h) = (16, 2);
    let d_head = dm / h;
    let ka = ModelConfig::new(dm, h, Variant::QvKa { d_ctx: 3 });
    let mut w = AttentionWeights::init(&ka, &mut rng(11));
    w.w_ctx = Some(Tensor::zeros(&[dm, 3]));
    for wk in &mut w.w_k {
        // rows 0..d_ctx multiply G, rows d_ctx.. multiply V_i
        let mut m = Tensor::zeros(&[3 + d_head, d_head]);
        for j in 0..d_head {
            m.set(3 + j, j, 1.0);
        }
        *wk = m;
    }
    let qv = ka.clone().with_variant(Variant::Qv);
    let mut w2 = AttentionWeights::init(&qv, &mut rng(12));
    w2.w_q = w.w_q.clone();
    w2.w_v = w.w_v.clone();
    w2.w_o = w.w_o.clone();
    let x = input(5, dm, 13);
    let a = attend(&x, &x, &w, &ka).unwrap();
    let b = attend(&x, &x, &w2, &qv).unwrap();
    assert!(max_diff(&a.out, &b.out) < 1e-12);
}

#[test]
fn entry_points_accept_their_variants() {
    let x = input(3, 16, 14);
    for v in all_variants() {
        let cfg = ModelConfig::new(16, 4, v);
        let w = AttentionWeights::init(&cfg, &mut rng(15));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let bound = w.map(&mut |t| g.constant(t.clone()));
        let entry = match v {
            Variant::Qkv => forward_qkv,
            Variant::Qv => forward_qv,
            Variant::MlaLite { .. } => forward_mla_lite,
            Variant::QvKa { .. } => forward_qv_ka,
            _ => forward_grouped,
        };
        let out = entry(&mut g, xv, xv, &bound, &cfg).unwrap();
        assert_eq!(g.value(out.out).shape(), &[3, 16]);
        for a in &out.weights {
            for r in 0..3 {
                let s: f64 = g.value(*a).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn decode_reproduces_forward_with_reported_cache() {
    let schemes = [
        PosScheme::none(),
        PosScheme::agf(1.0, false),
        PosScheme::agf(0.7, true),
        PosScheme::sinusoidal(),
    ];
    for v in all_variants() {
        for s in &schemes {
            let cfg = ModelConfig::new(16, 4, v)
                .with_positions(*s)
                .with_causal(true);
            if cfg.validate().is_err() {
                continue;
            }
            let w = AttentionWeights::init(&cfg, &mut rng(16));
            let x = input(7, 16, 17);
            let full = attend(&x, &x, &w, &cfg).unwrap();
            let (decoded, per_token) = decode_sequence(&cfg, &w, &x).unwrap();
            assert!(max_diff(&full.out, &decoded) < 1e-10, "{v} {}", s.label());
            let report = cache_report(&cfg, 1).unwrap();
            assert_eq!(per_token, report.elements_per_token_layer(), "{v}");
            let measured: usize = full.cacheables.iter().map(|c| c.elements_per_token).sum();
            assert_eq!(measured, per_token, "{v}");
        }
    }
}

#[test]
fn kv_permutation_permutes_weight_columns() {
    let cfg = ModelConfig::new(16, 4, Variant::Qkv);
    let w = AttentionWeights::init(&cfg, &mut rng(18));
    let xq = input(3, 16, 19);
    let xkv = input(5, 16, 20);
    let perm = [3, 0, 4, 1, 2];
    let permuted = xkv.permute_rows(&perm).unwrap();
    let a = attend(&xq, &xkv, &w, &cfg).unwrap();
    let b = attend(&xq, &permuted, &w, &cfg).unwrap();
    assert!(max_diff(&a.out, &b.out) < 1e-14);
    for (wa, wb) in a.weights.iter().zip(&b.weights) {
        for r in 0..3 {
            for (j, &p) in perm.iter().enumerate() {
                assert!((wb.get(r, j) - wa.get(r, p)).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn causal_rows_ignore_the_future() {
    for v in all_variants() {
        let cfg = ModelConfig::new(16, 4, v)
            .with_positions(PosScheme::agf(1.0, true))
            .with_causal(true);
        let w = AttentionWeights::init(&cfg, &mut rng(21));
        let x = input(6, 16, 22);
        let mut y = x.clone();
        for c in 0..16 {
            y.set(4, c, 9.0);
            y.set(5, c, -3.0);
        }
        let a = attend(&x, &x, &w, &cfg).unwrap();
        let b = attend(&y, &y, &w, &cfg).unwrap();
        for r in 0..4 {
            assert_eq!(a.out.row(r), b.out.row(r), "{v}");
        }
        assert_ne!(a.out.row(5), b.out.row(5));
    }
}

#[test]
fn vanishing_agf_matches_no_positions() {
    let cfg = ModelConfig::new(16, 2, Variant::Qkv).with_causal(true);
    let w = AttentionWeights::init(&cfg, &mut rng(23));
    let x = input(6, 16, 24);
    let plain = attend(&x, &x, &w, &cfg).unwrap();
    for pcm in [false, true] {
        let agf = attend(
            &x,
            &x,
            &w,
            &cfg.clone().with_positions(PosScheme::agf(1e-9, pcm)),
        )
        .unwrap();
        assert!(max_diff(&plain.out, &agf.out) < 1e-6);
    }
}

#[test]
fn sinusoidal_positions_reach_qv_weights() {
    let cfg = ModelConfig::new(16, 2, Variant::Qv);
    let w = AttentionWeights::init(&cfg, &mut rng(25));
    // identical tokens: without positions every row is uniform
    let x = Tensor::from_rows(&[&[0.3; 16][..]; 4]);
    let plain = attend(&x, &x, &w, &cfg).unwrap();
    let pe = attend(
        &x,
        &x,
        &w,
        &cfg.clone().with_positions(PosScheme::sinusoidal()),
    )
    .unwrap();
    assert!(plain.weights[0]
        .data()
        .iter()
        .all(|&a| (a - 0.25).abs() < 1e-15));
    assert!(max_diff(&plain.weights[0], &pe.weights[0]) > 1e-3);
}

#[test]
fn invalid_combinations_are_rejected() {
    let bad = [
        ModelConfig::new(16, 4, Variant::Gqa { groups: 3 }),
        ModelConfig::new(16, 4, Variant::Qvvv { groups: 2 })
            .with_positions(PosScheme::sinusoidal()),
        ModelConfig::new(16, 4, Variant::MlaLite { d_latent: 32 }),
        ModelConfig::new(16, 4, Variant::MlaLite { d_latent: 8 })
            .with_positions(PosScheme::sinusoidal()),
        ModelConfig::new(16, 4, Variant::QvKa { d_ctx: 0 }),
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{}", cfg.variant);
    }
}
