use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamvit::losses::*;
use streamvit::numerics::{finite_difference_gradient, relative_error, Tensor};
use streamvit::params::ParamTree;

const FD_EPS: f64 = 1e-6;
const FD_TOL: f64 = 1e-5;

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn positive(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(0.3..2.0))
}

fn head(d: usize, k: usize, rng: &mut ChaCha8Rng) -> PrototypeHead<f64> {
    PrototypeHead { w: random(&[d, k], rng) }
}

fn col_sums(q: &Tensor<f64>) -> Vec<f64> {
    (0..q.cols()).map(|c| (0..q.rows()).map(|r| q.row(r)[c]).sum()).collect()
}

#[test]
fn sinkhorn_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores = random(&[4, 3], &mut rng);
    let q = sinkhorn_center(&scores, 10);
    for r in 0..4 {
        assert!((q.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    for c in col_sums(&q) {
        assert!((c - 4.0 / 3.0).abs() < 1e-6, "column sum {c}");
    }
    assert!(q.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn sinkhorn_residual_shrinks_and_mass_is_kept() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let scores = random(&[6, 4], &mut rng);
        let mut last = f64::INFINITY;
        for it in 1..8 {
            let q = sinkhorn_center(&scores, it);
            assert!((q.sum() - 6.0).abs() < 1e-12);
            let resid = col_sums(&q).iter().map(|c| (c - 1.5).abs()).fold(0.0, f64::max);
            assert!(resid <= last + 1e-15, "residual rose at iteration {it}");
            last = resid;
        }
    }
}

#[test]
fn sinkhorn_three_iterations_on_teacher_scale_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores = Tensor::from_fn([8, 4], |_| rng.gen_range(-0.1..0.1));
    let q = sinkhorn_center(&scores, 3);
    for c in col_sums(&q) {
        assert!((c - 2.0).abs() < 1e-6, "column sum {c}");
    }
}

#[test]
fn dino_uniform_is_ln2_and_pooling() {
    let zeros = Tensor::<f64>::zeros([3, 5, 4]);
    let h = PrototypeHead { w: Tensor::zeros([4, 2]) };
    let out = dino_loss(&zeros, &zeros, &h, &h, &SslConfig::default()).unwrap();
    assert!((out.loss - 2f64.ln()).abs() < 1e-12);

    let pooled = temporal_mean_pool(&Tensor::from_fn([2, 1, 3], |i| i as f64)).unwrap();
    assert_eq!(pooled.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);

    let bad = PrototypeHead { w: Tensor::zeros([4, 3]) };
    assert!(dino_loss(&zeros, &zeros, &h, &bad, &SslConfig::default()).is_err());
}

#[test]
fn dino_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = SslConfig::default();
    let (s, t) = (random(&[3, 2, 4], &mut rng), random(&[3, 2, 4], &mut rng));
    let (hs, ht) = (head(4, 5, &mut rng), head(4, 5, &mut rng));
    let out = dino_loss(&s, &t, &hs, &ht, &cfg).unwrap();
    let fd = finite_difference_gradient(|x| dino_loss(x, &t, &hs, &ht, &cfg).unwrap().loss, &s, FD_EPS).unwrap();
    assert!(relative_error(&out.d_features, &fd) < FD_TOL);
    let fd_w = finite_difference_gradient(
        |w| dino_loss(&s, &t, &PrototypeHead { w: w.clone() }, &ht, &cfg).unwrap().loss,
        &hs.w,
        FD_EPS,
    )
    .unwrap();
    assert!(relative_error(&out.d_head.w, &fd_w) < FD_TOL);
}

fn permute_cols(w: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(w.dims().to_vec(), |i| {
        let (r, c) = (i / w.cols(), i % w.cols());
        w.row(r)[perm[c]]
    })
}

#[test]
fn prototype_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = SslConfig::default();
    let (s, t) = (random(&[4, 3, 6], &mut rng), random(&[4, 3, 6], &mut rng));
    let (hs, ht) = (head(6, 5, &mut rng), head(6, 5, &mut rng));
    let perm = [3, 0, 4, 1, 2];
    let (ps, pt) = (
        PrototypeHead { w: permute_cols(&hs.w, &perm) },
        PrototypeHead { w: permute_cols(&ht.w, &perm) },
    );
    let a = dino_loss(&s, &t, &hs, &ht, &cfg).unwrap().loss;
    let b = dino_loss(&s, &t, &ps, &pt, &cfg).unwrap().loss;
    assert!((a - b).abs() < 1e-12);

    let (sp, tp) = (random(&[7, 6], &mut rng), random(&[7, 6], &mut rng));
    let mask = [0, 2, 5, 6];
    let a = ibot_loss(&sp, &tp, &mask, &hs, &ht, &cfg).unwrap().loss;
    let b = ibot_loss(&sp, &tp, &mask, &ps, &pt, &cfg).unwrap().loss;
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn ibot_examples() {
    let cfg = SslConfig::default();
    let zeros = Tensor::<f64>::zeros([5, 3]);
    let h = PrototypeHead { w: Tensor::zeros([3, 4]) };
    let empty = ibot_loss(&zeros, &zeros, &[], &h, &h, &cfg).unwrap();
    assert_eq!(empty.loss, 0.0);
    assert!(empty.d_features.data().iter().all(|&v| v == 0.0));
    let one = ibot_loss(&zeros, &zeros, &[2], &h, &h, &cfg).unwrap();
    assert!((one.loss - 4f64.ln()).abs() < 1e-12);
    assert!(ibot_loss(&zeros, &zeros, &[5], &h, &h, &cfg).is_err());
}

#[test]
fn ibot_full_mask_is_plain_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = SslConfig::default();
    let (s, t) = (random(&[6, 4], &mut rng), random(&[6, 4], &mut rng));
    let (hs, ht) = (head(4, 3, &mut rng), head(4, 3, &mut rng));
    let all: Vec<usize> = (0..6).collect();
    let got = ibot_loss(&s, &t, &all, &hs, &ht, &cfg).unwrap().loss;

    let ss = streamvit::numerics::matmul(&s, &hs.w).unwrap();
    let mut ts = streamvit::numerics::matmul(&t, &ht.w).unwrap();
    ts.scale(1.0 / cfg.teacher_temp);
    let pt = sinkhorn_center(&ts, cfg.sinkhorn_iters);
    let mut direct = 0.0;
    for r in 0..6 {
        let logits: Vec<f64> = ss.row(r).iter().map(|v| v / cfg.student_temp).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        direct -= (0..3).map(|k| pt.row(r)[k] * (logits[k] - lse)).sum::<f64>();
    }
    assert!((got - direct / 6.0).abs() < 1e-12);
}

#[test]
fn ibot_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = SslConfig::default();
    let (s, t) = (random(&[6, 4], &mut rng), random(&[6, 4], &mut rng));
    let (hs, ht) = (head(4, 3, &mut rng), head(4, 3, &mut rng));
    let mask = [1, 3, 4];
    let out = ibot_loss(&s, &t, &mask, &hs, &ht, &cfg).unwrap();
    let fd = finite_difference_gradient(|x| ibot_loss(x, &t, &mask, &hs, &ht, &cfg).unwrap().loss, &s, FD_EPS).unwrap();
    assert!(relative_error(&out.d_features, &fd) < FD_TOL);
    assert!(out.d_features.row(0).iter().all(|&v| v == 0.0));
}

fn koleo_oracle(x: &Tensor<f64>) -> f64 {
    let n = x.rows();
    let mut total = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for j in 0..n {
            if i != j {
                let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min(d.sqrt());
            }
        }
        total += best.ln();
    }
    -total / n as f64
}

#[test]
fn koleo_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 2..=16 {
        let x = random(&[n, 3], &mut rng);
        let (got, _) = koleo_loss(&x).unwrap();
        assert_eq!(got, koleo_oracle(&x), "n = {n}");
    }
}

#[test]
fn koleo_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[4, 3], &mut rng);
    let (_, g) = koleo_loss(&x).unwrap();
    let fd = finite_difference_gradient(|x| koleo_loss(x).unwrap().0, &x, FD_EPS).unwrap();
    assert!(relative_error(&g, &fd) < FD_TOL);
}

#[test]
fn normalize_rows_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[3, 4], &mut rng);
    let w = random(&[3, 4], &mut rng);
    let f = |x: &Tensor<f64>| {
        let (n, _) = l2_normalize_rows(x).unwrap();
        n.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let (n, norms) = l2_normalize_rows(&x).unwrap();
    let g = l2_normalize_rows_backward(&n, &norms, &w);
    let fd = finite_difference_gradient(f, &x, FD_EPS).unwrap();
    assert!(relative_error(&g, &fd) < FD_TOL);
}

#[test]
fn gram_properties_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (a, b) = (random(&[4, 3], &mut rng), random(&[4, 3], &mut rng));
    assert!((gram_loss(&a, &b).unwrap().0 - gram_loss(&b, &a).unwrap().0).abs() < 1e-12);
    assert_eq!(gram_loss(&a, &a).unwrap().0, 0.0);

    let (c, s) = (0.6f64, 0.8f64);
    let rot = Tensor::new([3, 3], vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let ar = streamvit::numerics::matmul(&a, &rot).unwrap();
    assert!((gram_loss(&ar, &b).unwrap().0 - gram_loss(&a, &b).unwrap().0).abs() < 1e-12);

    let (_, g) = gram_loss(&a, &b).unwrap();
    let fd = finite_difference_gradient(|x| gram_loss(x, &b).unwrap().0, &a, FD_EPS).unwrap();
    assert!(relative_error(&g, &fd) < FD_TOL);
}

#[test]
fn depth_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dims = [2, 4, 4, 1];
    let (pred, target, conf) = (positive(&dims, &mut rng), positive(&dims, &mut rng), positive(&dims, &mut rng));
    let valid = Tensor::from_fn([2, 4, 4], |i| if i % 5 == 3 { 0.0 } else { 1.0 });
    let out = depth_loss(&pred, &target, &conf, 0.2, &valid).unwrap();
    let fd = finite_difference_gradient(|x| depth_loss(x, &target, &conf, 0.2, &valid).unwrap().loss, &pred, FD_EPS).unwrap();
    assert!(relative_error(&out.d_depth, &fd) < FD_TOL);
    let fd_c = finite_difference_gradient(|c| depth_loss(&pred, &target, c, 0.2, &valid).unwrap().loss, &conf, FD_EPS).unwrap();
    assert!(relative_error(&out.d_conf, &fd_c) < FD_TOL);
}

#[test]
fn depth_invalid_pixels_are_ignored() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let dims = [1, 3, 3, 1];
    let (pred, target, conf) = (positive(&dims, &mut rng), positive(&dims, &mut rng), positive(&dims, &mut rng));
    let valid = Tensor::from_fn([1, 3, 3], |i| if i == 4 { 0.0 } else { 1.0 });
    let base = depth_loss(&pred, &target, &conf, 0.2, &valid).unwrap().loss;
    let mut moved = pred.clone();
    moved.data_mut()[4] += 10.0;
    assert_eq!(depth_loss(&moved, &target, &conf, 0.2, &valid).unwrap().loss, base);
}

#[test]
fn l1_matches_direct_mean_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (r, rg) = (random(&[2, 2, 3, 6], &mut rng), random(&[2, 2, 3, 6], &mut rng));
    let (p, pg) = (random(&[2, 2, 3, 3], &mut rng), random(&[2, 2, 3, 3], &mut rng));
    let (g, gg) = (random(&[2, 9], &mut rng), random(&[2, 9], &mut rng));
    let valid = Tensor::filled([2, 2, 3], 1.0);
    let out = ray_point_camera_loss(&r, &rg, &p, &pg, &g, &gg, &valid).unwrap();
    let direct = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    assert_eq!(out.ray, direct(&r, &rg));
    assert_eq!(out.points, direct(&p, &pg));
    assert_eq!(out.camera, direct(&g, &gg));

    let fd = finite_difference_gradient(|x| ray_point_camera_loss(x, &rg, &p, &pg, &g, &gg, &valid).unwrap().ray, &r, FD_EPS).unwrap();
    assert!(relative_error(&out.d_ray, &fd) < FD_TOL);
    let fd = finite_difference_gradient(|x| ray_point_camera_loss(&r, &rg, &p, &pg, x, &gg, &valid).unwrap().camera, &g, FD_EPS).unwrap();
    assert!(relative_error(&out.d_pose, &fd) < FD_TOL);
    assert!(ray_point_camera_loss(&r, &rg, &p, &pg, &g, &Tensor::zeros([2, 8]), &valid).is_err());
}

struct Fixed {
    vocab: usize,
    hit: Option<f64>,
}

impl NextTokenProvider<f64> for Fixed {
    type Grads = ();

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn distributions(&self, _: &Tensor<f64>, _: &[usize], targets: &[usize]) -> streamvit::Result<Tensor<f64>> {
        let v = self.vocab;
        Ok(Tensor::from_fn([targets.len(), v], |i| match self.hit {
            None => 1.0 / v as f64,
            Some(p) if i % v == targets[i / v] => p,
            Some(p) => (1.0 - p) / (v - 1) as f64,
        }))
    }

    fn backward(&self, visual: &Tensor<f64>, _: &[usize], _: &[usize], _: &Tensor<f64>) -> streamvit::Result<(Tensor<f64>, ())> {
        Ok((Tensor::zeros(visual.dims().to_vec()), ()))
    }
}

struct Unnormalized;

impl NextTokenProvider<f64> for Unnormalized {
    type Grads = ();

    fn vocab(&self) -> usize {
        2
    }

    fn distributions(&self, _: &Tensor<f64>, _: &[usize], targets: &[usize]) -> streamvit::Result<Tensor<f64>> {
        Ok(Tensor::filled([targets.len(), 2], 0.6))
    }

    fn backward(&self, visual: &Tensor<f64>, _: &[usize], _: &[usize], _: &Tensor<f64>) -> streamvit::Result<(Tensor<f64>, ())> {
        Ok((visual.clone(), ()))
    }
}

#[test]
fn caption_examples() {
    let visual = Tensor::<f64>::zeros([2, 3]);
    let uniform = Fixed { vocab: 2, hit: None };
    let out = caption_loss(&visual, &[0], &[1, 0, 1, 1], &uniform).unwrap();
    assert!((out.loss - 2f64.ln()).abs() < 1e-12);
    let sure = Fixed { vocab: 5, hit: Some(1.0 - 1e-9) };
    assert!(caption_loss(&visual, &[0], &[3, 1], &sure).unwrap().loss < 1e-8);
    assert!(caption_loss(&visual, &[0], &[1], &Unnormalized).is_err());
}

#[test]
fn toy_decoder_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let visual = random(&[4, 4], &mut rng);
    let mut dec = LinearCaptionDecoder::<f64>::new(16, 8, &mut rng);
    dec.prev_embed = random(&[8, 8], &mut rng);
    dec.inst_embed = random(&[8, 8], &mut rng);
    let (inst, targets) = ([0usize, 6], [2usize, 5, 0]);
    let out = caption_loss(&visual, &inst, &targets, &dec).unwrap();
    let fd = finite_difference_gradient(|z| caption_loss(z, &inst, &targets, &dec).unwrap().loss, &visual, FD_EPS).unwrap();
    assert!(relative_error(&out.d_visual, &fd) < FD_TOL);

    let grads = out.decoder_grads.named();
    for (name, analytic) in grads {
        let base = dec.clone();
        let fd = finite_difference_gradient(
            |p| {
                let mut d = base.clone();
                for (n, t) in d.named_mut() {
                    if n == name {
                        *t = p.clone();
                    }
                }
                caption_loss(&visual, &inst, &targets, &d).unwrap().loss
            },
            base.named().into_iter().find(|(n, _)| *n == name).unwrap().1,
            FD_EPS,
        )
        .unwrap();
        assert!(relative_error(analytic, &fd) < FD_TOL, "{name}");
    }
}

#[test]
fn total_matches_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..50 {
        let mut parts = LossParts::default();
        for t in LossTerm::ALL {
            parts.set(t, rng.gen_range(-2.0..5.0));
        }
        let w = LossWeights {
            lambda_ssl: rng.gen_range(0.0..1.0),
            lambda_geo: rng.gen_range(0.0..2.0),
            lambda_cap: rng.gen_range(0.0..2.0),
            koleo_coeff: rng.gen_range(0.0..1.0),
            alpha: 0.2,
        };
        let (total, report) = total_loss(&parts, &w).unwrap();
        let again: f64 = LossTerm::ALL.iter().map(|&t| w.coefficient(t) * parts.get(t)).sum();
        assert!((total - again).abs() < 1e-12);
        assert_eq!(report.parts, parts);
    }
    let bad = LossWeights { lambda_geo: -1.0, ..LossWeights::default() };
    assert!(total_loss(&LossParts::default(), &bad).is_err());
}

proptest! {
    #[test]
    fn sinkhorn_rows_are_distributions(vals in prop::collection::vec(-3.0f64..3.0, 12), iters in 0usize..6) {
        let q = sinkhorn_center(&Tensor::new([3, 4], vals).unwrap(), iters);
        for r in 0..3 {
            prop_assert!((q.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(q.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn gram_is_nonnegative_and_self_zero(vals in prop::collection::vec(0.1f64..1.0, 12), other in prop::collection::vec(-1.0f64..1.0, 12)) {
        let a = Tensor::new([4, 3], vals).unwrap();
        let b = Tensor::new([4, 3], other.iter().map(|v| v + 1.5).collect()).unwrap();
        prop_assert!(gram_loss(&a, &b).unwrap().0 >= 0.0);
        prop_assert!(gram_loss(&a, &a).unwrap().0.abs() < 1e-12);
    }
}
