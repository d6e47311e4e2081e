use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamvit::attention::{
    cached_attention_step, full_attention, full_causal_attention, AttentionConfig, KVCache, Visibility,
};
use streamvit::rope3d::{plan_axes, Axis, RopePosition};
use streamvit::tokenizer::TokenLayout;
use streamvit::{Error, Scalar, Tensor};

fn random<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<S> {
    Tensor::from_fn([rows, cols], |_| S::lit(rng.gen_range(-1.0..1.0)))
}

fn positions(layout: &TokenLayout) -> Vec<RopePosition> {
    layout.positions().into_iter().map(RopePosition::from).collect()
}

/// Per-query reference: explicit rotation angles, explicit mask test,
/// explicit exponentials.
fn naive_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    cfg: &AttentionConfig,
    layout: &TokenLayout,
    pos: &[RopePosition],
) -> Tensor<f64> {
    let plan = plan_axes(&cfg.rope).unwrap();
    let (n, d, dh) = (layout.total(), cfg.d_model, cfg.d_head());
    let rotate = |row: &[f64], p: RopePosition| -> Vec<f64> {
        let mut out = row.to_vec();
        if let RopePosition::Coord { t, y, x } = p {
            for i in 0..dh / 2 {
                let c = match plan.pair_axis[i] {
                    Axis::T => t,
                    Axis::Y => y,
                    Axis::X => x,
                };
                let a = c * plan.frequencies[i];
                out[2 * i] = row[2 * i] * a.cos() - row[2 * i + 1] * a.sin();
                out[2 * i + 1] = row[2 * i] * a.sin() + row[2 * i + 1] * a.cos();
            }
        }
        out
    };
    let mut out = Tensor::zeros([n, d]);
    for h in 0..cfg.n_heads {
        let sl = |t: &Tensor<f64>, u: usize| t.row(u)[h * dh..(h + 1) * dh].to_vec();
        for u in 0..n {
            let qu = rotate(&sl(q, u), pos[u]);
            let mut logits = Vec::new();
            let mut idx = Vec::new();
            for w in 0..n {
                if layout.tau(u).unwrap() >= layout.tau(w).unwrap() {
                    let kw = rotate(&sl(k, w), pos[w]);
                    logits.push(qu.iter().zip(&kw).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt());
                    idx.push(w);
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (l, &w) in logits.iter().zip(&idx) {
                let p = (l - m).exp() / z;
                for c in 0..dh {
                    out.row_mut(u)[h * dh + c] += p * v.row(w)[h * dh + c];
                }
            }
        }
    }
    out
}

fn stream<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    cfg: &AttentionConfig,
    layout: &TokenLayout,
) -> Result<Tensor<S>, Error> {
    let pf = layout.per_frame();
    let d = cfg.d_model;
    let mut cache = KVCache::new(0, cfg, layout, layout.frames);
    let mut out = Vec::new();
    let all = positions(layout);
    let frame = |t: &Tensor<S>, f: usize| Tensor::new([pf, d], t.data()[f * pf * d..(f + 1) * pf * d].to_vec()).unwrap();
    for f in 0..layout.frames {
        let o = cached_attention_step(&frame(q, f), &frame(k, f), &frame(v, f), &mut cache, cfg, layout, &all[f * pf..(f + 1) * pf])?;
        out.extend_from_slice(o.data());
    }
    Tensor::new([layout.total(), d], out)
}

#[test]
fn full_attention_matches_naive_reference() {
    // a hand-built layout with 2 specials and a 1x2 grid: 4 tokens per frame
    let layout = TokenLayout { frames: 3, special: 2, grid_h: 1, grid_w: 2, patch: 16, cam_enabled: false };
    assert_eq!(layout.per_frame(), 4);
    let cfg = AttentionConfig::new(32, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = layout.total();
    let (q, k, v) = (random(&mut rng, n, 32), random(&mut rng, n, 32), random(&mut rng, n, 32));
    let pos = positions(&layout);
    let got = full_causal_attention(&q, &k, &v, &cfg, &layout, &pos).unwrap();
    let want = naive_attention(&q, &k, &v, &cfg, &layout, &pos);
    assert!(got.max_abs_diff(&want) < 1e-6, "{}", got.max_abs_diff(&want));
}

#[test]
fn constant_values_give_constant_output() {
    let layout = TokenLayout::from_grid(2, 2, 2, 16, true);
    let cfg = AttentionConfig::new(32, 2);
    let n = layout.total();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = Tensor::<f64>::from_fn([n, 32], |i| (i % 32) as f64 * 0.25 - 1.0);
    let out = full_causal_attention(&random(&mut rng, n, 32), &random(&mut rng, n, 32), &v, &cfg, &layout, &positions(&layout)).unwrap();
    assert!(out.max_abs_diff(&v) < 1e-12);
}

#[test]
fn streaming_reproduces_full_attention_over_16_frames() {
    let layout = TokenLayout::from_grid(16, 1, 2, 16, true);
    let cfg = AttentionConfig::new(64, 4);
    let n = layout.total();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (q, k, v) = (random::<f32>(&mut rng, n, 64), random(&mut rng, n, 64), random(&mut rng, n, 64));
    let full = full_causal_attention(&q, &k, &v, &cfg, &layout, &positions(&layout)).unwrap();
    let streamed = stream(&q, &k, &v, &cfg, &layout).unwrap();
    assert!(full.max_abs_diff(&streamed) < 1e-5);
    assert_eq!(full, streamed, "cache and recompute paths share one kernel and should agree exactly");
}

#[test]
fn first_frame_on_empty_cache_equals_single_frame_attention() {
    let layout = TokenLayout::from_grid(1, 2, 2, 16, true);
    let cfg = AttentionConfig::new(32, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = layout.total();
    let (q, k, v) = (random::<f64>(&mut rng, n, 32), random(&mut rng, n, 32), random(&mut rng, n, 32));
    let full = full_causal_attention(&q, &k, &v, &cfg, &layout, &positions(&layout)).unwrap();
    assert_eq!(stream(&q, &k, &v, &cfg, &layout).unwrap(), full);
}

#[test]
fn capacity_overflow_is_explicit_and_leaves_cache_intact() {
    let layout = TokenLayout::from_grid(3, 1, 1, 16, false);
    let cfg = AttentionConfig::new(16, 1);
    let pf = layout.per_frame();
    let mut cache = KVCache::<f32>::new(0, &cfg, &layout, 2);
    let x = Tensor::filled([pf, 16], 0.5f32);
    let pos = positions(&layout);
    for f in 0..2 {
        cached_attention_step(&x, &x, &x, &mut cache, &cfg, &layout, &pos[f * pf..(f + 1) * pf]).unwrap();
    }
    let before = cache.keys(0).to_vec();
    let err = cached_attention_step(&x, &x, &x, &mut cache, &cfg, &layout, &pos[2 * pf..]).unwrap_err();
    assert!(matches!(err, Error::Capacity { needed: 18, capacity: 12 }), "{err}");
    assert_eq!(cache.frames(), 2);
    assert_eq!(cache.keys(0), &before[..]);
}

#[test]
fn cache_rejects_mismatched_heads_and_frames() {
    let layout = TokenLayout::from_grid(2, 1, 1, 16, false);
    let pf = layout.per_frame();
    let cfg = AttentionConfig::new(32, 2);
    let mut cache = KVCache::<f64>::new(3, &AttentionConfig::new(32, 1), &layout, 4);
    let x = Tensor::zeros([pf, 32]);
    let pos = positions(&layout);
    let err = cached_attention_step(&x, &x, &x, &mut cache, &cfg, &layout, &pos[..pf]).unwrap_err();
    assert!(matches!(err, Error::CacheMismatch(ref m) if m.contains("layer 3")), "{err}");
    let mut cache = KVCache::<f64>::new(0, &cfg, &layout, 4);
    let err = cached_attention_step(&x, &x, &x, &mut cache, &cfg, &layout, &pos[pf..]).unwrap_err();
    assert!(matches!(err, Error::CacheMismatch(_)));
}

#[test]
fn future_frames_cannot_influence_the_past() {
    let layout = TokenLayout::from_grid(4, 1, 2, 16, true);
    let cfg = AttentionConfig::new(32, 2);
    let (n, pf) = (layout.total(), layout.per_frame());
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (q, k, v) = (random::<f32>(&mut rng, n, 32), random(&mut rng, n, 32), random(&mut rng, n, 32));
    let scramble = |x: &Tensor<f32>, rng: &mut ChaCha8Rng| {
        let mut y = x.clone();
        y.data_mut()[2 * pf * 32..].iter_mut().for_each(|e| *e = rng.gen_range(-50.0..50.0));
        y
    };
    let (q2, k2, v2) = (scramble(&q, &mut rng), scramble(&k, &mut rng), scramble(&v, &mut rng));
    let pos = positions(&layout);
    let a = full_causal_attention(&q, &k, &v, &cfg, &layout, &pos).unwrap();
    let b = full_causal_attention(&q2, &k2, &v2, &cfg, &layout, &pos).unwrap();
    assert_eq!(&a.data()[..2 * pf * 32], &b.data()[..2 * pf * 32]);
    let a = stream(&q, &k, &v, &cfg, &layout).unwrap();
    let b = stream(&q2, &k2, &v2, &cfg, &layout).unwrap();
    assert_eq!(&a.data()[..2 * pf * 32], &b.data()[..2 * pf * 32]);

    // the bidirectional negative control must leak
    let a = full_attention(&q, &k, &v, &cfg, &layout, &pos, Visibility::Bidirectional).unwrap();
    let b = full_attention(&q2, &k2, &v2, &cfg, &layout, &pos, Visibility::Bidirectional).unwrap();
    assert_ne!(&a.data()[..2 * pf * 32], &b.data()[..2 * pf * 32]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cache_and_recompute_agree(
        frames in 1usize..=32,
        grid in 0usize..=14,
        cam in any::<bool>(),
        heads_pow in 0u32..=2,
        width_mult in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let special = if cam { 6 } else { 5 };
        let grid = grid.min(20 - special);
        let layout = TokenLayout::from_grid(frames, 1, grid, 16, cam);
        prop_assume!(layout.per_frame() <= 20);
        let heads = 1usize << heads_pow;
        let d = heads * 16 * width_mult;
        prop_assume!(d <= 64);
        let cfg = AttentionConfig::new(d, heads);
        let n = layout.total();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k, v) = (random::<f64>(&mut rng, n, d), random(&mut rng, n, d), random(&mut rng, n, d));
        let full = full_causal_attention(&q, &k, &v, &cfg, &layout, &positions(&layout)).unwrap();
        let streamed = stream(&q, &k, &v, &cfg, &layout).unwrap();
        prop_assert!(full.max_abs_diff(&streamed) < 1e-10);
        let (q, k, v) = (q.cast::<f32>(), k.cast::<f32>(), v.cast::<f32>());
        let full = full_causal_attention(&q, &k, &v, &cfg, &layout, &positions(&layout)).unwrap();
        let streamed = stream(&q, &k, &v, &cfg, &layout).unwrap();
        prop_assert!(full.max_abs_diff(&streamed) < 1e-5);
    }
}
