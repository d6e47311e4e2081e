//! Geometric prediction heads.
//!
//! The depth/ray head is a per-patch two-layer MLP over the concatenated
//! selected-layer features. It emits 8 raw values per patch (depth, ray
//! origin, ray direction, confidence), which are upsampled to pixels by
//! nearest neighbour. The camera head is a two-layer MLP on the CAM token
//! producing a 9-vector: unit quaternion, translation, and two positive
//! field-of-view values.

use std::collections::BTreeMap;

use rand::Rng;

use crate::backbone::trunc_normal;
use crate::error::{Error, Result};
use crate::numerics::{gelu, gelu_backward, linear, linear_backward, Scalar, Tensor};
use crate::params::{join, ParamTree};
use crate::tokenizer::TokenLayout;

/// Raw values are clamped to this range before `exp`.
pub const RAW_CLAMP: f64 = 30.0;
const RAW_PER_PATCH: usize = 8;
pub const POSE_DIM: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

/// Intermediate values of an [`Mlp2`] forward, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<S> {
    x: Tensor<S>,
    pre: Tensor<S>,
    act: Tensor<S>,
}

impl<S: Scalar> Mlp2<S> {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: trunc_normal([input, hidden], rng),
            b1: Tensor::zeros([hidden]),
            w2: trunc_normal([hidden, output], rng),
            b2: Tensor::zeros([output]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.dims()[0]
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, MlpCache<S>)> {
        let pre = linear(x, &self.w1, Some(&self.b1))?;
        let act = gelu(&pre);
        let out = linear(&act, &self.w2, Some(&self.b2))?;
        Ok((
            out,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads`, returns `dx`.
    pub fn backward(&self, cache: &MlpCache<S>, dy: &Tensor<S>, grads: &mut Self) -> Result<Tensor<S>> {
        let g2 = linear_backward(&cache.act, &self.w2, dy)?;
        grads.w2.axpy(S::one(), &g2.dw)?;
        grads.b2.axpy(S::one(), &g2.db)?;
        let dpre = gelu_backward(&cache.pre, &g2.dx);
        let g1 = linear_backward(&cache.x, &self.w1, &dpre)?;
        grads.w1.axpy(S::one(), &g1.dw)?;
        grads.b1.axpy(S::one(), &g1.db)?;
        Ok(g1.dx)
    }
}

impl<S: Scalar> ParamTree<S> for Mlp2<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(join(prefix, "w1"), &self.w1);
        f(join(prefix, "b1"), &self.b1);
        f(join(prefix, "w2"), &self.w2);
        f(join(prefix, "b2"), &self.b2);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        f(join(prefix, "w1"), &mut self.w1);
        f(join(prefix, "b1"), &mut self.b1);
        f(join(prefix, "w2"), &mut self.w2);
        f(join(prefix, "b2"), &mut self.b2);
    }
}

/// Dense geometry for a clip. Pixel maps are `[T, H, W, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricPrediction<S> {
    pub depth: Tensor<S>,
    pub ray: Tensor<S>,
    pub conf: Tensor<S>,
    pub points: Tensor<S>,
    /// `[T, 9]`, absent without a CAM token.
    pub pose: Option<Tensor<S>>,
}

impl<S: Scalar> GeometricPrediction<S> {
    pub fn is_finite(&self) -> bool {
        [&self.depth, &self.ray, &self.conf, &self.points]
            .iter()
            .all(|t| t.is_finite())
            && self.pose.as_ref().map_or(true, Tensor::is_finite)
    }
}

/// Per-patch raw head outputs and what the backward pass needs.
#[derive(Clone, Debug)]
pub struct DepthRayCache<S> {
    mlp: MlpCache<S>,
    raw: Tensor<S>,
    layers: Vec<usize>,
    layout: TokenLayout,
}

fn clamp_raw<S: Scalar>(v: S) -> (S, bool) {
    let c = S::lit(RAW_CLAMP);
    if v > c {
        (c, false)
    } else if v < -c {
        (-c, false)
    } else {
        (v, true)
    }
}

/// Normalizes `v` to unit length. Returns the norm used.
fn normalize3<S: Scalar>(v: [S; 3]) -> ([S; 3], S) {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(S::lit(1e-12));
    ([v[0] / n, v[1] / n, v[2] / n], n)
}

fn gather_features<S: Scalar>(z: &BTreeMap<usize, Tensor<S>>, layers: &[usize]) -> Result<Tensor<S>> {
    let feats = layers
        .iter()
        .map(|l| z.get(l).ok_or_else(|| Error::Shape(format!("patch features for layer {l} are missing"))))
        .collect::<Result<Vec<_>>>()?;
    let first = feats.first().ok_or_else(|| Error::Config("depth head needs at least one layer".into()))?;
    let rows = first.rows();
    let d = first.cols();
    if feats.iter().any(|f| f.rows() != rows || f.cols() != d) {
        return Err(Error::Shape("selected-layer features disagree in shape".into()));
    }
    let width = d * feats.len();
    let mut x = Tensor::zeros([rows, width]);
    for r in 0..rows {
        let row = x.row_mut(r);
        for (i, f) in feats.iter().enumerate() {
            row[i * d..(i + 1) * d].copy_from_slice(f.row(r));
        }
    }
    Ok(x)
}

/// Runs the depth/ray head on patch features `z` (`layer → [T, h, w, d]`).
/// Returns `(depth, ray, confidence)` at pixel resolution.
pub fn depth_ray_head<S: Scalar>(
    z: &BTreeMap<usize, Tensor<S>>,
    layers: &[usize],
    head: &Mlp2<S>,
    layout: &TokenLayout,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, DepthRayCache<S>)> {
    let x = gather_features(z, layers)?;
    if x.cols() != head.input_width() {
        return Err(Error::Shape(format!(
            "depth head expects {} input features, got {}",
            head.input_width(),
            x.cols()
        )));
    }
    let frames = x.rows() / layout.patches().max(1);
    let layout = layout.with_frames(frames);
    let (raw, mlp) = head.forward(&x)?;
    if raw.cols() != RAW_PER_PATCH {
        return Err(Error::Shape(format!("depth head emits {} values per patch, expected 8", raw.cols())));
    }
    let (hh, ww, p) = (layout.height(), layout.width(), layout.patch);
    let pixels = frames * hh * ww;
    let mut depth = Tensor::zeros([frames, hh, ww, 1]);
    let mut ray = Tensor::zeros([frames, hh, ww, 6]);
    let mut conf = Tensor::zeros([frames, hh, ww, 1]);
    for px in 0..pixels {
        let t = px / (hh * ww);
        let (y, xx) = ((px / ww) % hh, px % ww);
        let patch = t * layout.patches() + (y / p) * layout.grid_w + xx / p;
        let r = raw.row(patch);
        depth.data_mut()[px] = clamp_raw(r[0]).0.exp();
        let (dir, _) = normalize3([r[4], r[5], r[6]]);
        let ray_px = &mut ray.data_mut()[px * 6..px * 6 + 6];
        ray_px[..3].copy_from_slice(&r[1..4]);
        ray_px[3..].copy_from_slice(&dir);
        conf.data_mut()[px] = clamp_raw(r[7]).0.exp();
    }
    Ok((
        depth,
        ray,
        conf,
        DepthRayCache {
            mlp,
            raw,
            layers: layers.to_vec(),
            layout,
        },
    ))
}

/// Backward of [`depth_ray_head`]. Accumulates head gradients and returns
/// the gradient for each selected layer's patch features.
pub fn depth_ray_head_backward<S: Scalar>(
    cache: &DepthRayCache<S>,
    head: &Mlp2<S>,
    d_depth: &Tensor<S>,
    d_ray: &Tensor<S>,
    d_conf: &Tensor<S>,
    grads: &mut Mlp2<S>,
) -> Result<BTreeMap<usize, Tensor<S>>> {
    let layout = &cache.layout;
    let (hh, ww, p) = (layout.height(), layout.width(), layout.patch);
    let frames = layout.frames;
    let mut draw = Tensor::zeros(cache.raw.dims().to_vec());
    for px in 0..frames * hh * ww {
        let t = px / (hh * ww);
        let (y, xx) = ((px / ww) % hh, px % ww);
        let patch = t * layout.patches() + (y / p) * layout.grid_w + xx / p;
        let r = cache.raw.row(patch).to_vec();
        let g = draw.row_mut(patch);
        let (cd, live_d) = clamp_raw(r[0]);
        if live_d {
            g[0] += d_depth.data()[px] * cd.exp();
        }
        let dr = &d_ray.data()[px * 6..px * 6 + 6];
        for i in 0..3 {
            g[1 + i] += dr[i];
        }
        // d(v/|v|) = (I - u uᵀ) / |v|
        let (u, n) = normalize3([r[4], r[5], r[6]]);
        let dot = u[0] * dr[3] + u[1] * dr[4] + u[2] * dr[5];
        for i in 0..3 {
            g[4 + i] += (dr[3 + i] - u[i] * dot) / n;
        }
        let (cc, live_c) = clamp_raw(r[7]);
        if live_c {
            g[7] += d_conf.data()[px] * cc.exp();
        }
    }
    let dx = head.backward(&cache.mlp, &draw, grads)?;
    let d = dx.cols() / cache.layers.len();
    let mut out = BTreeMap::new();
    for (i, &l) in cache.layers.iter().enumerate() {
        let block = dx.columns(i * d, d);
        out.insert(l, block.reshape([frames, layout.grid_h, layout.grid_w, d])?);
    }
    Ok(out)
}

/// Canonical unit quaternion: L2-normalized, first nonzero component made
/// non-negative. A zero vector maps to the identity rotation.
pub fn normalize_quaternion<S: Scalar>(raw: [S; 4]) -> [S; 4] {
    let n = raw.iter().fold(S::zero(), |a, &b| a + b * b).sqrt();
    if n <= S::lit(1e-12) {
        return [S::one(), S::zero(), S::zero(), S::zero()];
    }
    let sign = quaternion_sign(raw);
    raw.map(|v| sign * v / n)
}

fn quaternion_sign<S: Scalar>(raw: [S; 4]) -> S {
    match raw.iter().find(|v| **v != S::zero()) {
        Some(v) if *v < S::zero() => -S::one(),
        _ => S::one(),
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[derive(Clone, Debug)]
pub struct CameraCache<S> {
    mlp: MlpCache<S>,
    raw: Tensor<S>,
}

/// Pose `[T, 9]` from CAM tokens `[T, d]`. Errors when the model has no CAM
/// token.
pub fn camera_head<S: Scalar>(z_cam: Option<&Tensor<S>>, head: &Mlp2<S>) -> Result<(Tensor<S>, CameraCache<S>)> {
    let z = z_cam.ok_or_else(|| Error::Config("camera head needs the CAM token, which is disabled".into()))?;
    let (raw, mlp) = head.forward(z)?;
    if raw.cols() != POSE_DIM {
        return Err(Error::Shape(format!("camera head emits {} values, expected 9", raw.cols())));
    }
    Ok((pose_from_raw(&raw), CameraCache { mlp, raw }))
}

/// Maps raw camera-head outputs to canonical poses.
pub fn pose_from_raw<S: Scalar>(raw: &Tensor<S>) -> Tensor<S> {
    let mut pose = Tensor::zeros([raw.rows(), POSE_DIM]);
    for t in 0..raw.rows() {
        let r = raw.row(t);
        let q = normalize_quaternion([r[0], r[1], r[2], r[3]]);
        let out = pose.row_mut(t);
        out[..4].copy_from_slice(&q);
        out[4..7].copy_from_slice(&r[4..7]);
        out[7] = softplus(r[7]);
        out[8] = softplus(r[8]);
    }
    pose
}

/// Backward of [`camera_head`]; returns the gradient for `z_cam`.
pub fn camera_head_backward<S: Scalar>(
    cache: &CameraCache<S>,
    head: &Mlp2<S>,
    d_pose: &Tensor<S>,
    grads: &mut Mlp2<S>,
) -> Result<Tensor<S>> {
    let mut draw = Tensor::zeros(cache.raw.dims().to_vec());
    for t in 0..cache.raw.rows() {
        let r = cache.raw.row(t).to_vec();
        let g = d_pose.row(t);
        let out = draw.row_mut(t);
        let n = r[..4].iter().fold(S::zero(), |a, &b| a + b * b).sqrt();
        if n > S::lit(1e-12) {
            let sign = quaternion_sign([r[0], r[1], r[2], r[3]]);
            let u: Vec<S> = r[..4].iter().map(|&v| v / n).collect();
            let dot = (0..4).fold(S::zero(), |a, i| a + u[i] * g[i]);
            for i in 0..4 {
                out[i] = sign * (g[i] - u[i] * dot) / n;
            }
        }
        out[4..7].copy_from_slice(&g[4..7]);
        out[7] = g[7] * sigmoid(r[7]);
        out[8] = g[8] * sigmoid(r[8]);
    }
    head.backward(&cache.mlp, &draw, grads)
}

/// Point map `P = o + D·d` from depth `[.., 1]` and rays `[.., 6]`.
pub fn compose_points<S: Scalar>(depth: &Tensor<S>, ray: &Tensor<S>) -> Result<Tensor<S>> {
    check_compose(depth, ray)?;
    let n = depth.len();
    let mut dims = ray.dims().to_vec();
    *dims.last_mut().expect("rank") = 3;
    let mut out = Tensor::zeros(dims);
    for i in 0..n {
        let r = &ray.data()[i * 6..i * 6 + 6];
        let dv = depth.data()[i];
        for c in 0..3 {
            out.data_mut()[i * 3 + c] = r[c] + dv * r[3 + c];
        }
    }
    Ok(out)
}

fn check_compose<S: Scalar>(depth: &Tensor<S>, ray: &Tensor<S>) -> Result<()> {
    let rank = depth.rank();
    if rank == 0 || rank != ray.rank() || depth.cols() != 1 || ray.cols() != 6 || depth.dims()[..rank - 1] != ray.dims()[..rank - 1] {
        return Err(Error::Shape(format!(
            "compose_points depth {:?} vs ray {:?}",
            depth.dims(),
            ray.dims()
        )));
    }
    Ok(())
}

/// Returns `(d_depth, d_ray)` for upstream `d_points`.
pub fn compose_points_backward<S: Scalar>(
    depth: &Tensor<S>,
    ray: &Tensor<S>,
    d_points: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    check_compose(depth, ray)?;
    let mut dd = Tensor::zeros(depth.dims().to_vec());
    let mut dr = Tensor::zeros(ray.dims().to_vec());
    for i in 0..depth.len() {
        let r = &ray.data()[i * 6..i * 6 + 6];
        let g = &d_points.data()[i * 3..i * 3 + 3];
        let mut acc = S::zero();
        for c in 0..3 {
            acc += g[c] * r[3 + c];
            dr.data_mut()[i * 6 + c] = g[c];
            dr.data_mut()[i * 6 + 3 + c] = depth.data()[i] * g[c];
        }
        dd.data_mut()[i] = acc;
    }
    Ok((dd, dr))
}

/// Ground truth for the geometry losses. `valid` is `[T, H, W]` with 1 for
/// valid pixels and 0 otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricTargets<S> {
    pub depth: Tensor<S>,
    pub ray: Tensor<S>,
    pub points: Tensor<S>,
    pub pose: Tensor<S>,
    pub valid: Tensor<S>,
}

/// Rescales a scene so the mean valid point norm is 1. Depth, ray origins,
/// points and camera translations scale together; directions, rotations
/// and fields of view are unchanged. Returns the scale that was divided out.
pub fn normalize_targets<S: Scalar>(targets: &mut GeometricTargets<S>) -> Result<S> {
    let mut total = S::zero();
    let mut count = 0usize;
    for (i, &v) in targets.valid.data().iter().enumerate() {
        if v > S::zero() {
            let p = &targets.points.data()[i * 3..i * 3 + 3];
            total += (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            count += 1;
        }
    }
    if count == 0 || total <= S::zero() {
        return Err(Error::Degenerate("no valid points to normalize".into()));
    }
    let scale = total / S::lit(count as f64);
    let inv = S::one() / scale;
    targets.depth.scale(inv);
    targets.points.scale(inv);
    for px in 0..targets.ray.len() / 6 {
        for c in 0..3 {
            targets.ray.data_mut()[px * 6 + c] *= inv;
        }
    }
    for t in 0..targets.pose.rows() {
        for c in 4..7 {
            targets.pose.row_mut(t)[c] *= inv;
        }
    }
    Ok(scale)
}

/// The two geometry heads, as one parameter tree.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryHeads<S> {
    pub depth_ray: Mlp2<S>,
    pub camera: Mlp2<S>,
}

impl<S: Scalar> GeometryHeads<S> {
    pub fn init(d_model: usize, n_selected: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            depth_ray: Mlp2::init(n_selected * d_model, hidden, RAW_PER_PATCH, rng),
            camera: Mlp2::init(d_model, hidden, POSE_DIM, rng),
        }
    }
}

impl<S: Scalar> ParamTree<S> for GeometryHeads<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.depth_ray.visit(&join(prefix, "depth_ray"), f);
        self.camera.visit(&join(prefix, "camera"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        self.depth_ray.visit_mut(&join(prefix, "depth_ray"), f);
        self.camera.visit_mut(&join(prefix, "camera"), f);
    }
}
