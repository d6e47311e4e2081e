use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamvit::heads::{
    camera_head, camera_head_backward, compose_points, compose_points_backward, depth_ray_head,
    depth_ray_head_backward, Mlp2,
};
use streamvit::numerics::{finite_difference_gradient, relative_error};
use streamvit::params::ParamTree;
use streamvit::tokenizer::TokenLayout;
use streamvit::Tensor;

fn random(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-scale..scale))
}

fn weighted(t: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn camera_pose_invariants_over_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let head = Mlp2::<f64>::init(32, 16, 9, &mut rng);
    for _ in 0..100 {
        let z = random(&mut rng, &[3, 32], 5.0);
        let (pose, _) = camera_head(Some(&z), &head).unwrap();
        for t in 0..3 {
            let r = pose.row(t);
            let qn: f64 = r[..4].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((qn - 1.0).abs() < 1e-5);
            assert!(r[7] > 0.0 && r[8] > 0.0);
            assert!(r[..4].iter().find(|v| **v != 0.0).unwrap() >= &0.0);
        }
    }
}

#[test]
fn compose_is_affine_in_depth() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = Tensor::from_fn([2, 3, 4, 1], |_| rng.gen_range(0.1..3.0));
    let r = random(&mut rng, &[2, 3, 4, 6], 1.0);
    let base = compose_points(&Tensor::zeros([2, 3, 4, 1]), &r).unwrap();
    let mut scaled = d.clone();
    scaled.scale(2.5);
    let mut a = compose_points(&scaled, &r).unwrap();
    a.axpy(-1.0, &base).unwrap();
    let mut b = compose_points(&d, &r).unwrap();
    b.axpy(-1.0, &base).unwrap();
    b.scale(2.5);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn compose_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = random(&mut rng, &[1, 2, 2, 1], 2.0);
    let r = random(&mut rng, &[1, 2, 2, 6], 1.0);
    let w = random(&mut rng, &[1, 2, 2, 3], 1.0);
    let (dd, dr) = compose_points_backward(&d, &r, &w).unwrap();
    let nd = finite_difference_gradient(|x| weighted(&compose_points(x, &r).unwrap(), &w), &d, 1e-6).unwrap();
    let nr = finite_difference_gradient(|x| weighted(&compose_points(&d, x).unwrap(), &w), &r, 1e-6).unwrap();
    assert!(relative_error(&dd, &nd) < 1e-8);
    assert!(relative_error(&dr, &nr) < 1e-8);
}

#[test]
fn camera_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut head = Mlp2::<f64>::init(16, 8, 9, &mut rng);
    head.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= 20.0));
    let z = random(&mut rng, &[2, 16], 2.0);
    let w = random(&mut rng, &[2, 9], 1.0);
    let (_, cache) = camera_head(Some(&z), &head).unwrap();
    let mut grads = head.zeros_like();
    let dz = camera_head_backward(&cache, &head, &w, &mut grads).unwrap();
    let nz = finite_difference_gradient(|x| weighted(&camera_head(Some(x), &head).unwrap().0, &w), &z, 1e-6).unwrap();
    assert!(relative_error(&dz, &nz) < 1e-6, "{}", relative_error(&dz, &nz));
    let nw = finite_difference_gradient(
        |x| {
            let mut h = head.clone();
            h.w2 = x.clone();
            weighted(&camera_head(Some(&z), &h).unwrap().0, &w)
        },
        &head.w2,
        1e-6,
    )
    .unwrap();
    assert!(relative_error(&grads.w2, &nw) < 1e-6);
}

#[test]
fn depth_ray_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let layout = TokenLayout::from_grid(2, 2, 2, 2, true);
    let mut head = Mlp2::<f64>::init(16, 8, 8, &mut rng);
    head.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= 20.0));
    let z: BTreeMap<usize, Tensor<f64>> = [(1, random(&mut rng, &[2, 2, 2, 8], 1.0)), (2, random(&mut rng, &[2, 2, 2, 8], 1.0))].into();
    let (wd, wr, wc) = (random(&mut rng, &[2, 4, 4, 1], 1.0), random(&mut rng, &[2, 4, 4, 6], 1.0), random(&mut rng, &[2, 4, 4, 1], 1.0));
    let objective = |z: &BTreeMap<usize, Tensor<f64>>, h: &Mlp2<f64>| {
        let (d, r, c, _) = depth_ray_head(z, &[1, 2], h, &layout).unwrap();
        weighted(&d, &wd) + weighted(&r, &wr) + weighted(&c, &wc)
    };
    let (_, _, _, cache) = depth_ray_head(&z, &[1, 2], &head, &layout).unwrap();
    let mut grads = head.zeros_like();
    let dz = depth_ray_head_backward(&cache, &head, &wd, &wr, &wc, &mut grads).unwrap();
    for l in [1, 2] {
        let nz = finite_difference_gradient(
            |x| {
                let mut z2 = z.clone();
                z2.insert(l, x.clone());
                objective(&z2, &head)
            },
            &z[&l],
            1e-6,
        )
        .unwrap();
        assert!(relative_error(&dz[&l], &nz) < 1e-6, "layer {l}");
    }
    let nb = finite_difference_gradient(
        |x| {
            let mut h = head.clone();
            h.b2 = x.clone();
            objective(&z, &h)
        },
        &head.b2,
        1e-6,
    )
    .unwrap();
    assert!(relative_error(&grads.b2, &nb) < 1e-6);
}
