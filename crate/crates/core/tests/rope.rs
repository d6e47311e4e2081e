use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamvit::rope3d::{apply_rope, jitter_positions, plan_axes, RopeConfig, RopePosition};
use streamvit::Tensor;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn logits_depend_only_on_relative_position() {
    let plan = plan_axes(&RopeConfig::new(32)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let q = Tensor::from_fn([1, 32], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn([1, 32], |_| rng.gen_range(-1.0..1.0));
        let mut p = || rng.gen_range(0..40usize);
        let (a, b) = ((p(), p(), p()), (p(), p(), p()));
        let (dt, dy, dx) = (p(), p(), p());
        let rot = |x: &Tensor<f64>, (t, y, z): (usize, usize, usize)| {
            apply_rope(x, &[RopePosition::grid(t, y, z)], &plan).unwrap()
        };
        let before = dot(rot(&q, a).data(), rot(&k, b).data());
        let after = dot(
            rot(&q, (a.0 + dt, a.1 + dy, a.2 + dx)).data(),
            rot(&k, (b.0 + dt, b.1 + dy, b.2 + dx)).data(),
        );
        assert!((before - after).abs() < 1e-5, "{before} vs {after}");
    }
}

#[test]
fn all_special_positions_are_identity() {
    let plan = plan_axes(&RopeConfig::new(64)).unwrap();
    let x = Tensor::<f32>::from_fn([7, 64], |i| (i as f32).sin());
    assert_eq!(apply_rope(&x, &[RopePosition::Special; 7], &plan).unwrap(), x);
}

proptest! {
    #[test]
    fn rotation_preserves_norm(
        width in 1usize..=8,
        t in 0usize..512, y in 0usize..64, x in 0usize..64,
        values in proptest::collection::vec(-10.0f64..10.0, 128),
    ) {
        let d = 16 * width;
        let plan = plan_axes(&RopeConfig::new(d)).unwrap();
        let v = Tensor::new([1, d], values[..d].to_vec()).unwrap();
        let r = apply_rope(&v, &[RopePosition::grid(t, y, x)], &plan).unwrap();
        let norm = |a: &[f64]| dot(a, a).sqrt();
        prop_assert!((norm(v.data()) - norm(r.data())).abs() < 1e-6 * norm(v.data()).max(1.0));
    }

    #[test]
    fn jitter_scales_space_only(scale in 0.0f64..0.99, seed in any::<u64>()) {
        let pos: Vec<_> = (0..5).map(|i| RopePosition::grid(i, 2 * i + 1, i + 3)).collect();
        let j = jitter_positions(&pos, scale, seed);
        let mut factor: Option<f64> = None;
        for (a, b) in pos.iter().zip(&j) {
            match (a, b) {
                (RopePosition::Coord { t, y, x }, RopePosition::Coord { t: t2, y: y2, x: x2 }) => {
                    prop_assert_eq!(t, t2);
                    let f = y2 / y;
                    prop_assert!((x2 / x - f).abs() < 1e-12);
                    prop_assert!(f >= 1.0 - scale - 1e-12 && f <= 1.0 + scale + 1e-12);
                    if let Some(prev) = factor {
                        prop_assert!((f - prev).abs() < 1e-12);
                    }
                    factor = Some(f);
                }
                _ => prop_assert!(false),
            }
        }
    }
}
