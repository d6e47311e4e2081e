//! Property suites behind `streamvit verify`. Each suite returns one line
//! per property with the worst deviation it observed.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamvit::attention::Visibility;
use streamvit::backbone::{
    embed, forward_full, forward_full_with, forward_streaming_step, new_caches, BackboneConfig, BackboneOutput, BackboneParams,
};
use streamvit::engine::synth::synth_scene;
use streamvit::engine::{EngineConfig, ModelParams, StreamSession};
use streamvit::heads::{camera_head, compose_points, Mlp2, POSE_DIM};
use streamvit::losses::*;
use streamvit::numerics::{finite_difference_gradient, relative_error, Scalar};
use streamvit::params::ParamTree;
use streamvit::rope3d::{apply_rope, plan_axes, Axis, RopeConfig, RopePosition};
use streamvit::tokenizer::{Frame, FrameStream};
use streamvit::{Result, Tensor};

pub const EQUIVALENCE_TOL_F32: f64 = 1e-5;
pub const EQUIVALENCE_TOL_F64: f64 = 1e-10;
pub const ROPE_SHIFT_TOL: f64 = 1e-5;
pub const ROPE_NORM_TOL: f64 = 1e-6;
pub const GRADIENT_TOL: f64 = 1e-3;
pub const FD_EPS: f64 = 1e-6;
pub const COMPOSE_TOL: f64 = 1e-6;
pub const QUAT_NORM_TOL: f64 = 1e-5;
pub const SINKHORN_TOL: f64 = 1e-6;
pub const TOTAL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Equivalence,
    Causality,
    Rope,
    Gradients,
    Geometry,
    Losses,
    /// Long-stream pushes past the tested clip length.
    Extrapolation,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Equivalence => "equivalence",
            Suite::Causality => "causality",
            Suite::Rope => "rope",
            Suite::Gradients => "gradients",
            Suite::Geometry => "geometry",
            Suite::Losses => "losses",
            Suite::Extrapolation => "extrapolation",
        }
    }

    /// Trials used when `--trials` is not given.
    pub fn default_trials(self) -> usize {
        match self {
            Suite::Equivalence => 20,
            Suite::Causality => 20,
            Suite::Rope => 100,
            Suite::Gradients => 1,
            Suite::Geometry => 5,
            Suite::Losses => 1,
            Suite::Extrapolation => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Property {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    /// `true` when the deviation must be exactly zero.
    pub exact: bool,
}

impl Property {
    fn within(name: impl Into<String>, max_deviation: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_deviation,
            tolerance,
            exact: false,
        }
    }

    fn exact(name: impl Into<String>, max_deviation: f64) -> Self {
        Self {
            name: name.into(),
            max_deviation,
            tolerance: 0.0,
            exact: true,
        }
    }

    pub fn passed(&self) -> bool {
        if self.exact {
            self.max_deviation == 0.0
        } else {
            self.max_deviation < self.tolerance
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        if self.exact {
            write!(f, "{verdict} {} max|Δ|={:e} (exact)", self.name, self.max_deviation)
        } else {
            write!(f, "{verdict} {} max|Δ|={:e} (tol {:e})", self.name, self.max_deviation, self.tolerance)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub trials: Option<usize>,
    /// Negative control: runs the causality suite with bidirectional
    /// attention, which must be caught.
    pub inject_leak: bool,
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<Property>> {
    let trials = opts.trials.unwrap_or_else(|| suite.default_trials()).max(1);
    match suite {
        Suite::Equivalence => equivalence(opts.seed, trials),
        Suite::Causality => causality(opts.seed, trials, opts.inject_leak),
        Suite::Rope => rope(opts.seed, trials),
        Suite::Gradients => gradients(opts.seed),
        Suite::Geometry => geometry(opts.seed, trials),
        Suite::Losses => losses(opts.seed),
        Suite::Extrapolation => extrapolation(opts.seed, trials),
    }
}

/// A random small backbone plus a random clip for it.
struct Trial {
    config: BackboneConfig,
    frames: FrameStream,
}

/// `(d_model, heads)` pairs whose head width the rotary plan accepts.
const WIDTHS: [(usize, usize); 8] = [(16, 1), (32, 1), (32, 2), (48, 1), (48, 3), (64, 1), (64, 2), (64, 4)];

fn random_stream(rng: &mut ChaCha8Rng, t: usize, height: usize, width: usize) -> Result<FrameStream> {
    let frames = (0..t)
        .map(|_| Frame::new(height, width, (0..height * width * 3).map(|_| rng.gen_range(0.0..1.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    FrameStream::new(frames)
}

/// Random configuration with `T ≤ max_t`, at most 20 tokens per frame,
/// `d_model ≤ 64`, 1–4 heads and 1–4 layers.
fn random_trial(rng: &mut ChaCha8Rng, min_t: usize, max_t: usize) -> Result<Trial> {
    let (d, heads) = WIDTHS[rng.gen_range(0..WIDTHS.len())];
    let layers = rng.gen_range(1..=4);
    let cam = rng.gen_bool(0.5);
    let specials = if cam { 2 } else { 1 };
    let (gh, gw) = loop {
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        if h * w + specials <= 20 {
            break (h, w);
        }
    };
    let patch = 2;
    let mut config = BackboneConfig::new(layers, d, heads, patch, cam);
    config.selected_layers = vec![layers.div_ceil(2), layers];
    config.selected_layers.dedup();
    let t = rng.gen_range(min_t..=max_t);
    let frames = random_stream(rng, t, gh * patch, gw * patch)?;
    Ok(Trial { config, frames })
}

fn slice<S: Scalar>(x: &Tensor<S>, t: usize) -> &[S] {
    let per = x.len() / x.dims()[0];
    &x.data()[t * per..(t + 1) * per]
}

fn max_diff<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

/// Worst difference between frame `ta` of `a` and frame `tb` of `b`.
fn output_diff<S: Scalar>(a: &BackboneOutput<S>, ta: usize, b: &BackboneOutput<S>, tb: usize) -> f64 {
    let mut worst = max_diff(slice(&a.z_cls, ta), slice(&b.z_cls, tb));
    if let (Some(x), Some(y)) = (&a.z_cam, &b.z_cam) {
        worst = worst.max(max_diff(slice(x, ta), slice(y, tb)));
    }
    for (layer, z) in &a.z {
        worst = worst.max(max_diff(slice(z, ta), slice(&b.z[layer], tb)));
    }
    worst
}

/// Streams a clip frame by frame and compares against the full forward.
fn stream_vs_full<S: Scalar>(trial: &Trial, seed: u64) -> Result<f64> {
    let cfg = &trial.config;
    let params = BackboneParams::<S>::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let tokens = embed(&trial.frames, &params, cfg, None)?;
    let full = forward_full(&tokens, &params, cfg)?;
    let t = trial.frames.len();
    let layout = tokens.layout;
    let mut caches = new_caches(cfg, &layout, t);
    let mut worst = 0.0f64;
    for f in 0..t {
        let step = forward_streaming_step(&tokens.frame_tokens(f), &mut caches, &params, cfg, &layout)?;
        worst = worst.max(output_diff(&step, 0, &full, f));
    }
    Ok(worst)
}

pub fn equivalence(seed: u64, trials: usize) -> Result<Vec<Property>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut w32, mut w64) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let trial = random_trial(&mut rng, 1, 32)?;
        let init = rng.gen();
        w32 = w32.max(stream_vs_full::<f32>(&trial, init)?);
        w64 = w64.max(stream_vs_full::<f64>(&trial, init)?);
    }
    Ok(vec![
        Property::within(format!("stream_matches_full_f32 ({trials} configs)"), w32, EQUIVALENCE_TOL_F32),
        Property::within(format!("stream_matches_full_f64 ({trials} configs)"), w64, EQUIVALENCE_TOL_F64),
    ])
}

/// Copy of `frames` where every frame after `t` is replaced by noise.
fn randomize_after(frames: &FrameStream, t: usize, rng: &mut ChaCha8Rng) -> Result<FrameStream> {
    let (h, w) = (frames.height(), frames.width());
    let noise = random_stream(rng, frames.len(), h, w)?;
    let mixed = frames
        .frames()
        .iter()
        .zip(noise.frames())
        .enumerate()
        .map(|(i, (a, b))| if i <= t { a.clone() } else { b.clone() })
        .collect();
    FrameStream::new(mixed)
}

pub fn causality(seed: u64, trials: usize, inject_leak: bool) -> Result<Vec<Property>> {
    let visibility = if inject_leak {
        Visibility::Bidirectional
    } else {
        Visibility::Causal
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut offline, mut streaming) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let trial = random_trial(&mut rng, 2, 12)?;
        let cfg = &trial.config;
        let n = trial.frames.len();
        let t = rng.gen_range(0..n - 1);
        let other = randomize_after(&trial.frames, t, &mut rng)?;
        let params = BackboneParams::<f64>::init(cfg, &mut rng)?;

        let ta = embed(&trial.frames, &params, cfg, None)?;
        let tb = embed(&other, &params, cfg, None)?;
        let a = forward_full_with(&ta, &params, cfg, visibility)?;
        let b = forward_full_with(&tb, &params, cfg, visibility)?;
        for f in 0..=t {
            offline = offline.max(output_diff(&a, f, &b, f));
        }

        let layout = ta.layout;
        let (mut ca, mut cb) = (new_caches(cfg, &layout, n), new_caches(cfg, &layout, n));
        let mut outs = Vec::new();
        for f in 0..n {
            let sa = forward_streaming_step(&ta.frame_tokens(f), &mut ca, &params, cfg, &layout)?;
            let sb = forward_streaming_step(&tb.frame_tokens(f), &mut cb, &params, cfg, &layout)?;
            outs.push((sa, sb));
        }
        for (sa, sb) in &outs[..=t] {
            streaming = streaming.max(output_diff(sa, 0, sb, 0));
        }
    }
    let label = if inject_leak { " [leak injected]" } else { "" };
    Ok(vec![
        Property::exact(format!("full_forward_ignores_future_frames{label}"), offline),
        Property::exact("streaming_ignores_future_frames", streaming),
    ])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rope(seed: u64, trials: usize) -> Result<Vec<Property>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut props = Vec::new();
    let mut allocation = 0.0f64;
    for d_head in [16, 32, 64] {
        let plan = plan_axes(&RopeConfig::new(d_head))?;
        let unit = d_head / 16;
        let counts = [plan.count(Axis::T), plan.count(Axis::Y), plan.count(Axis::X)];
        let want = [2 * unit, 3 * unit, 3 * unit];
        allocation = allocation.max(counts.iter().zip(want).map(|(&c, w)| c.abs_diff(w) as f64).fold(0.0, f64::max));
    }
    props.push(Property::exact("axis_split_2_3_3 (d_head 16, 32, 64)", allocation));

    let (mut shift, mut norm) = (0.0f64, 0.0f64);
    for trial in 0..trials {
        let d_head = [16, 32, 64][trial % 3];
        let plan = plan_axes(&RopeConfig::new(d_head))?;
        let q = Tensor::from_fn([1, d_head], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn([1, d_head], |_| rng.gen_range(-1.0..1.0));
        let mut p = || rng.gen_range(0..64usize);
        let (a, b, s) = ((p(), p(), p()), (p(), p(), p()), (p(), p(), p()));
        let rot = |x: &Tensor<f64>, (t, y, z): (usize, usize, usize)| apply_rope(x, &[RopePosition::grid(t, y, z)], &plan);
        let before = dot(rot(&q, a)?.data(), rot(&k, b)?.data());
        let after = dot(
            rot(&q, (a.0 + s.0, a.1 + s.1, a.2 + s.2))?.data(),
            rot(&k, (b.0 + s.0, b.1 + s.1, b.2 + s.2))?.data(),
        );
        shift = shift.max((before - after).abs());
        let r = rot(&q, a)?;
        norm = norm.max((dot(q.data(), q.data()).sqrt() - dot(r.data(), r.data()).sqrt()).abs());
    }
    props.push(Property::within(format!("logits_invariant_under_shift ({trials} trials)"), shift, ROPE_SHIFT_TOL));
    props.push(Property::within("rotation_preserves_norm", norm, ROPE_NORM_TOL));
    Ok(props)
}

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn positive(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(0.3..2.0))
}

fn grad_property(name: &str, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64, at: &Tensor<f64>) -> Result<Property> {
    let numeric = finite_difference_gradient(f, at, FD_EPS)?;
    Ok(Property::within(
        format!("{name} ({} inputs)", at.len()),
        relative_error(analytic, &numeric),
        GRADIENT_TOL,
    ))
}

/// Central finite differences against every hand-written loss gradient.
pub fn gradients(seed: u64) -> Result<Vec<Property>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SslConfig::default();
    let mut props = Vec::new();

    let (s, t) = (random(&[2, 3, 4], &mut rng), random(&[2, 3, 4], &mut rng));
    let (hs, ht) = (
        PrototypeHead { w: random(&[4, 5], &mut rng) },
        PrototypeHead { w: random(&[4, 5], &mut rng) },
    );
    let out = dino_loss(&s, &t, &hs, &ht, &cfg)?;
    props.push(grad_property("dino/features", &out.d_features, |x| dino_loss(x, &t, &hs, &ht, &cfg).map_or(f64::NAN, |o| o.loss), &s)?);
    props.push(grad_property(
        "dino/prototypes",
        &out.d_head.w,
        |w| dino_loss(&s, &t, &PrototypeHead { w: w.clone() }, &ht, &cfg).map_or(f64::NAN, |o| o.loss),
        &hs.w,
    )?);

    let (sp, tp) = (random(&[6, 4], &mut rng), random(&[6, 4], &mut rng));
    let mask = [0usize, 2, 3];
    let out = ibot_loss(&sp, &tp, &mask, &hs, &ht, &cfg)?;
    props.push(grad_property(
        "ibot/features",
        &out.d_features,
        |x| ibot_loss(x, &tp, &mask, &hs, &ht, &cfg).map_or(f64::NAN, |o| o.loss),
        &sp,
    )?);
    props.push(grad_property(
        "ibot/prototypes",
        &out.d_head.w,
        |w| ibot_loss(&sp, &tp, &mask, &PrototypeHead { w: w.clone() }, &ht, &cfg).map_or(f64::NAN, |o| o.loss),
        &hs.w,
    )?);

    let x = random(&[5, 3], &mut rng);
    let (_, g) = koleo_loss(&x)?;
    props.push(grad_property("koleo", &g, |x| koleo_loss(x).map_or(f64::NAN, |o| o.0), &x)?);

    let (xs, xg) = (random(&[4, 4], &mut rng), random(&[4, 4], &mut rng));
    let (_, g) = gram_loss(&xs, &xg)?;
    props.push(grad_property("gram", &g, |x| gram_loss(x, &xg).map_or(f64::NAN, |o| o.0), &xs)?);

    let dims = [1, 3, 4, 1];
    let (pred, target, conf) = (positive(&dims, &mut rng), positive(&dims, &mut rng), positive(&dims, &mut rng));
    let valid = Tensor::from_fn([1, 3, 4], |i| if i == 5 { 0.0 } else { 1.0 });
    let out = depth_loss(&pred, &target, &conf, 0.2, &valid)?;
    props.push(grad_property(
        "depth/depth",
        &out.d_depth,
        |x| depth_loss(x, &target, &conf, 0.2, &valid).map_or(f64::NAN, |o| o.loss),
        &pred,
    )?);
    props.push(grad_property(
        "depth/confidence",
        &out.d_conf,
        |c| depth_loss(&pred, &target, c, 0.2, &valid).map_or(f64::NAN, |o| o.loss),
        &conf,
    )?);

    let (r, rg) = (random(&[1, 2, 3, 6], &mut rng), random(&[1, 2, 3, 6], &mut rng));
    let (p, pg) = (random(&[1, 2, 3, 3], &mut rng), random(&[1, 2, 3, 3], &mut rng));
    let (g, gg) = (random(&[2, POSE_DIM], &mut rng), random(&[2, POSE_DIM], &mut rng));
    let valid = Tensor::filled([1, 2, 3], 1.0);
    let out = ray_point_camera_loss(&r, &rg, &p, &pg, &g, &gg, &valid)?;
    let rpc = |r: &Tensor<f64>, p: &Tensor<f64>, g: &Tensor<f64>| ray_point_camera_loss(r, &rg, p, &pg, g, &gg, &valid);
    props.push(grad_property("ray", &out.d_ray, |x| rpc(x, &p, &g).map_or(f64::NAN, |o| o.ray), &r)?);
    props.push(grad_property("points", &out.d_points, |x| rpc(&r, x, &g).map_or(f64::NAN, |o| o.points), &p)?);
    props.push(grad_property("camera", &out.d_pose, |x| rpc(&r, &p, x).map_or(f64::NAN, |o| o.camera), &g)?);

    let visual = random(&[4, 16], &mut rng);
    let mut dec = LinearCaptionDecoder::<f64>::new(64, 8, &mut rng);
    dec.w_visual = random(&[64, 8], &mut rng);
    dec.prev_embed = random(&[8, 8], &mut rng);
    let (inst, targets) = ([0usize], [3usize, 6, 0]);
    let out = caption_loss(&visual, &inst, &targets, &dec)?;
    props.push(grad_property(
        "caption/visual_tokens",
        &out.d_visual,
        |z| caption_loss(z, &inst, &targets, &dec).map_or(f64::NAN, |o| o.loss),
        &visual,
    )?);
    let named = out.decoder_grads.named();
    let (_, dw) = named.iter().find(|(n, _)| n == "w_visual").expect("decoder has w_visual");
    let w_probe = Tensor::from_fn([8, 8], |i| dec.w_visual.data()[i]);
    let dw_probe = Tensor::from_fn([8, 8], |i| dw.data()[i]);
    props.push(grad_property(
        "caption/decoder_weights",
        &dw_probe,
        |w| {
            let mut d = dec.clone();
            d.w_visual.data_mut()[..64].copy_from_slice(w.data());
            caption_loss(&visual, &inst, &targets, &d).map_or(f64::NAN, |o| o.loss)
        },
        &w_probe,
    )?);
    Ok(props)
}

pub fn geometry(seed: u64, trials: usize) -> Result<Vec<Property>> {
    let mut compose = 0.0f64;
    for s in 0..trials as u64 {
        let scene = synth_scene(seed.wrapping_add(s), 8, 16, 16)?;
        let tg = &scene.targets;
        compose = compose.max(compose_points(&tg.depth, &tg.ray)?.max_abs_diff(&tg.points));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut quat, mut bad_fov) = (0.0f64, 0usize);
    for _ in 0..trials.max(20) {
        let d = 16;
        let mut head = Mlp2::<f64>::init(d, 8, POSE_DIM, &mut rng);
        let spread = rng.gen_range(0.1..20.0);
        head.w2 = Tensor::from_fn(head.w2.dims().to_vec(), |_| rng.gen_range(-spread..spread));
        head.b2 = Tensor::from_fn(head.b2.dims().to_vec(), |_| rng.gen_range(-spread..spread));
        let z = Tensor::from_fn([6, d], |_| rng.gen_range(-3.0..3.0));
        let (pose, _) = camera_head(Some(&z), &head)?;
        for row in 0..pose.rows() {
            let p = pose.row(row);
            let n = (p[..4].iter().map(|v| v * v).sum::<f64>()).sqrt();
            quat = quat.max((n - 1.0).abs());
            bad_fov += p[7..9].iter().filter(|&&f| !(f > 0.0)).count();
        }
    }
    Ok(vec![
        Property::within(format!("compose_points_matches_ground_truth ({trials} scenes, T=8)"), compose, COMPOSE_TOL),
        Property::within("camera_quaternion_unit_norm", quat, QUAT_NORM_TOL),
        Property::exact("camera_fov_positive (violations)", bad_fov as f64),
    ])
}

fn koleo_brute_force(x: &Tensor<f64>) -> f64 {
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

pub fn losses(seed: u64) -> Result<Vec<Property>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut props = Vec::new();

    let mut koleo = 0.0f64;
    for n in 2..=16 {
        let x = random(&[n, 4], &mut rng);
        koleo = koleo.max((koleo_loss(&x)?.0 - koleo_brute_force(&x)).abs());
    }
    props.push(Property::exact("koleo_matches_brute_force (n = 2..16)", koleo));

    let a = random(&[5, 4], &mut rng);
    props.push(Property::exact("gram_zero_on_identical_inputs", gram_loss(&a, &a)?.0.abs()));
    let xs = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let xg = Tensor::new([2, 2], vec![0.6, 0.8, 0.6, 0.8])?;
    props.push(Property::within("gram_hand_case_equals_2", (gram_loss(&xs, &xg)?.0 - 2.0).abs(), TOTAL_TOL));

    let mut marginal = 0.0f64;
    for _ in 0..10 {
        let (b, k) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let q = sinkhorn_center(&random(&[b, k], &mut rng), 10);
        for r in 0..b {
            marginal = marginal.max((q.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        for c in 0..k {
            let col: f64 = (0..b).map(|r| q.row(r)[c]).sum();
            marginal = marginal.max((col - b as f64 / k as f64).abs());
        }
    }
    props.push(Property::within("sinkhorn_marginals_after_10_iterations", marginal, SINKHORN_TOL));

    let mut parts = LossParts {
        dino: 1.0,
        ibot: 1.0,
        koleo: 1.0,
        gram: 1.0,
        caption: 1.0,
        ..LossParts::default()
    };
    for term in [LossTerm::Depth, LossTerm::Ray, LossTerm::Points, LossTerm::Camera] {
        parts.set(term, 0.25);
    }
    let (total, _) = total_loss(&parts, &LossWeights::default())?;
    props.push(Property::within("total_loss_worked_example_2.31", (total - 2.31).abs(), TOTAL_TOL));
    Ok(props)
}

/// A model sized for short clips streams a long video: every output stays
/// finite and earlier frames never see later ones.
pub fn extrapolation(seed: u64, trials: usize) -> Result<Vec<Property>> {
    const STREAM_FRAMES: usize = 110;
    let config = EngineConfig {
        capacity: 128,
        ..EngineConfig::default()
    };
    let params = Arc::new(ModelParams::<f64>::init(&config, seed)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = random_stream(&mut rng, STREAM_FRAMES, config.height, config.width)?;
    let mut reference = StreamSession::new(Arc::clone(&params), &config, config.capacity)?;
    let mut outputs = Vec::with_capacity(STREAM_FRAMES);
    let mut non_finite = 0usize;
    for f in frames.frames() {
        let out = reference.push(f)?;
        if !out.geometry.is_finite() || !out.features.z_cls.is_finite() {
            non_finite += 1;
        }
        outputs.push(out);
    }
    let mut leak = 0.0f64;
    for _ in 0..trials {
        let t = rng.gen_range(0..STREAM_FRAMES - 1);
        let other = randomize_after(&frames, t, &mut rng)?;
        let mut session = StreamSession::new(Arc::clone(&params), &config, config.capacity)?;
        for (f, frame) in other.frames().iter().enumerate().take(t + 1) {
            let out = session.push(frame)?;
            leak = leak.max(output_diff(&out.features, 0, &outputs[f].features, 0));
            leak = leak.max(max_diff(out.geometry.points.data(), outputs[f].geometry.points.data()));
        }
        // the rest of the altered stream must still go through
        for frame in &other.frames()[t + 1..] {
            session.push(frame)?;
        }
    }
    Ok(vec![
        Property::exact(format!("{STREAM_FRAMES}_frames_all_finite"), non_finite as f64),
        Property::exact("long_stream_ignores_future_frames", leak),
    ])
}
