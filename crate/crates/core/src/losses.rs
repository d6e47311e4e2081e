//! Training objectives, each with a hand-written backward pass.
//!
//! * Self-supervised: DINO on temporally pooled CLS tokens, iBOT on masked
//!   patches, KoLeo spreading, Gram anchoring.
//! * Geometry: confidence-weighted depth with a spatial-gradient term, plus
//!   L1 on rays, points and camera poses.
//! * Captioning: teacher-forced negative log-likelihood under any
//!   [`NextTokenProvider`].
//!
//! Every function returns the scalar value and the gradients of that value
//! with respect to its differentiable inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{layer_norm, layer_norm_backward, matmul, matmul_nt, matmul_tn, LayerNormCache, Scalar, Tensor};
use crate::params::{join, ParamTree};

pub use crate::params::ema_update;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ssl: f64,
    pub lambda_geo: f64,
    pub lambda_cap: f64,
    pub koleo_coeff: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssl: 0.1,
            lambda_geo: 1.0,
            lambda_cap: 1.0,
            koleo_coeff: 0.1,
            alpha: 0.2,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_ssl: 0.0,
            lambda_geo: 0.0,
            lambda_cap: 0.0,
            koleo_coeff: 0.0,
            alpha: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ssl, self.lambda_geo, self.lambda_cap, self.koleo_coeff, self.alpha];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Factor by which `term` enters the total.
    pub fn coefficient(&self, term: LossTerm) -> f64 {
        use LossTerm::*;
        match term {
            Dino | Ibot | Gram => self.lambda_ssl,
            Koleo => self.lambda_ssl * self.koleo_coeff,
            Depth | Ray | Points | Camera => self.lambda_geo,
            Caption => self.lambda_cap,
        }
    }
}

/// Temperatures and centering for the prototype losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub sinkhorn_iters: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            student_temp: 0.1,
            teacher_temp: 0.07,
            sinkhorn_iters: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossTerm {
    Dino,
    Ibot,
    Koleo,
    Gram,
    Depth,
    Ray,
    Points,
    Camera,
    Caption,
}

impl LossTerm {
    pub const ALL: [LossTerm; 9] = [
        LossTerm::Dino,
        LossTerm::Ibot,
        LossTerm::Koleo,
        LossTerm::Gram,
        LossTerm::Depth,
        LossTerm::Ray,
        LossTerm::Points,
        LossTerm::Camera,
        LossTerm::Caption,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Dino => "dino",
            LossTerm::Ibot => "ibot",
            LossTerm::Koleo => "koleo",
            LossTerm::Gram => "gram",
            LossTerm::Depth => "depth",
            LossTerm::Ray => "ray",
            LossTerm::Points => "points",
            LossTerm::Camera => "camera",
            LossTerm::Caption => "caption",
        }
    }
}

/// Unweighted value of every term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub dino: f64,
    pub ibot: f64,
    pub koleo: f64,
    pub gram: f64,
    pub depth: f64,
    pub ray: f64,
    pub points: f64,
    pub camera: f64,
    pub caption: f64,
}

impl LossParts {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Dino => self.dino,
            LossTerm::Ibot => self.ibot,
            LossTerm::Koleo => self.koleo,
            LossTerm::Gram => self.gram,
            LossTerm::Depth => self.depth,
            LossTerm::Ray => self.ray,
            LossTerm::Points => self.points,
            LossTerm::Camera => self.camera,
            LossTerm::Caption => self.caption,
        }
    }

    pub fn set(&mut self, term: LossTerm, value: f64) {
        *match term {
            LossTerm::Dino => &mut self.dino,
            LossTerm::Ibot => &mut self.ibot,
            LossTerm::Koleo => &mut self.koleo,
            LossTerm::Gram => &mut self.gram,
            LossTerm::Depth => &mut self.depth,
            LossTerm::Ray => &mut self.ray,
            LossTerm::Points => &mut self.points,
            LossTerm::Camera => &mut self.camera,
            LossTerm::Caption => &mut self.caption,
        } = value;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub parts: LossParts,
    pub weights: LossWeights,
    pub ssl: f64,
    pub geo: f64,
    pub cap: f64,
    pub total: f64,
}

/// `λ_ssl·(dino + ibot + c·koleo + gram) + λ_geo·(depth + ray + points +
/// camera) + λ_cap·caption`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<(f64, LossReport)> {
    weights.validate()?;
    for term in LossTerm::ALL {
        let v = parts.get(term);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term `{}` is {v}", term.name())));
        }
    }
    let ssl = parts.dino + parts.ibot + weights.koleo_coeff * parts.koleo + parts.gram;
    let geo = parts.depth + parts.ray + parts.points + parts.camera;
    let cap = parts.caption;
    let total = weights.lambda_ssl * ssl + weights.lambda_geo * geo + weights.lambda_cap * cap;
    Ok((
        total,
        LossReport {
            parts: *parts,
            weights: *weights,
            ssl,
            geo,
            cap,
            total,
        },
    ))
}

fn softmax_rows<S: Scalar>(x: &Tensor<S>, temp: f64) -> Tensor<S> {
    let inv = S::lit(1.0 / temp);
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = ((*v - m) * inv).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Sinkhorn-Knopp centering of `[batch, K]` scores: exponentiate, then
/// alternately scale prototype columns to total `batch / K` and sample rows
/// to total 1. Rows of the result sum to 1.
pub fn sinkhorn_center<S: Scalar>(scores: &Tensor<S>, n_iter: usize) -> Tensor<S> {
    let (b, k) = (scores.rows(), scores.cols());
    let m = scores.data().iter().fold(S::neg_infinity(), |a, &v| a.max(v));
    let mut q = Tensor::from_fn([b, k], |i| (scores.data()[i] - m).exp());
    let col_target = S::lit(b as f64 / k as f64);
    let normalize_rows = |q: &mut Tensor<S>| {
        for r in 0..b {
            let row = q.row_mut(r);
            let s = row.iter().fold(S::zero(), |a, &v| a + v);
            row.iter_mut().for_each(|v| *v /= s);
        }
    };
    for _ in 0..n_iter {
        let mut sums = vec![S::zero(); k];
        for r in 0..b {
            for (s, &v) in sums.iter_mut().zip(q.row(r)) {
                *s += v;
            }
        }
        for r in 0..b {
            for (v, &s) in q.row_mut(r).iter_mut().zip(&sums) {
                *v = *v * col_target / s;
            }
        }
        normalize_rows(&mut q);
    }
    if n_iter == 0 {
        normalize_rows(&mut q);
    }
    q
}

/// Mean over rows of `−Σ_k p_t log p_s` with `p_s = softmax(s / τ_s)` and
/// `p_t` given. Returns the value and `d/ds`.
pub fn cross_entropy_to_targets<S: Scalar>(targets: &Tensor<S>, student_scores: &Tensor<S>, student_temp: f64) -> Result<(f64, Tensor<S>)> {
    if targets.dims() != student_scores.dims() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?} prototype scores",
            targets.dims(),
            student_scores.dims()
        )));
    }
    let b = student_scores.rows();
    let ps = softmax_rows(student_scores, student_temp);
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(ps.dims().to_vec());
    let scale = S::lit(1.0 / (b as f64 * student_temp));
    for r in 0..b {
        let (pt, p) = (targets.row(r), ps.row(r));
        for k in 0..p.len() {
            if pt[k] > S::zero() {
                loss -= pt[k].as_f64() * p[k].as_f64().max(f64::MIN_POSITIVE).ln();
            }
        }
        let tsum = pt.iter().fold(S::zero(), |a, &v| a + v);
        for (k, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = (tsum * p[k] - pt[k]) * scale;
        }
    }
    Ok((loss / b.max(1) as f64, grad))
}

/// Linear projection onto `K` prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeHead<S> {
    pub w: Tensor<S>,
}

impl<S: Scalar> PrototypeHead<S> {
    pub fn prototypes(&self) -> usize {
        self.w.cols()
    }
}

impl<S: Scalar> ParamTree<S> for PrototypeHead<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(join(prefix, "w"), &self.w);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        f(join(prefix, "w"), &mut self.w);
    }
}

pub struct PrototypeLoss<S> {
    pub loss: f64,
    /// Gradient w.r.t. the student features fed in.
    pub d_features: Tensor<S>,
    pub d_head: PrototypeHead<S>,
}

fn prototype_loss<S: Scalar>(
    student_feats: &Tensor<S>,
    teacher_feats: &Tensor<S>,
    student_head: &PrototypeHead<S>,
    teacher_head: &PrototypeHead<S>,
    cfg: &SslConfig,
) -> Result<PrototypeLoss<S>> {
    if student_head.prototypes() != teacher_head.prototypes() {
        return Err(Error::Shape(format!(
            "student has {} prototypes, teacher {}",
            student_head.prototypes(),
            teacher_head.prototypes()
        )));
    }
    let s = matmul(student_feats, &student_head.w)?;
    let mut t = matmul(teacher_feats, &teacher_head.w)?;
    t.scale(S::lit(1.0 / cfg.teacher_temp));
    let pt = sinkhorn_center(&t, cfg.sinkhorn_iters);
    let (loss, ds) = cross_entropy_to_targets(&pt, &s, cfg.student_temp)?;
    Ok(PrototypeLoss {
        loss,
        d_features: matmul_nt(&ds, &student_head.w)?,
        d_head: PrototypeHead {
            w: matmul_tn(student_feats, &ds)?,
        },
    })
}

/// Mean over time of `[B, T, d]` → `[B, d]`.
pub fn temporal_mean_pool<S: Scalar>(seq: &Tensor<S>) -> Result<Tensor<S>> {
    if seq.rank() != 3 {
        return Err(Error::Shape(format!("expected [B, T, d], got {:?}", seq.dims())));
    }
    let (b, t, d) = (seq.dims()[0], seq.dims()[1], seq.dims()[2]);
    let inv = S::lit(1.0 / t as f64);
    let mut out = Tensor::zeros([b, d]);
    for i in 0..b {
        for j in 0..t {
            let src = &seq.data()[(i * t + j) * d..(i * t + j + 1) * d];
            for (o, &v) in out.row_mut(i).iter_mut().zip(src) {
                *o += v * inv;
            }
        }
    }
    Ok(out)
}

fn temporal_mean_pool_backward<S: Scalar>(d_pooled: &Tensor<S>, t: usize) -> Tensor<S> {
    let (b, d) = (d_pooled.rows(), d_pooled.cols());
    let inv = S::lit(1.0 / t as f64);
    Tensor::from_fn([b, t, d], |i| d_pooled.data()[(i / (t * d)) * d + i % d] * inv)
}

/// DINO loss between CLS sequences `[B, T, d]`: mean-pool over time, project
/// to prototypes, center the teacher by Sinkhorn-Knopp and take the
/// cross-entropy. `d_features` is shaped like `student_cls`.
pub fn dino_loss<S: Scalar>(
    student_cls: &Tensor<S>,
    teacher_cls: &Tensor<S>,
    student_head: &PrototypeHead<S>,
    teacher_head: &PrototypeHead<S>,
    cfg: &SslConfig,
) -> Result<PrototypeLoss<S>> {
    let t = student_cls.dims().get(1).copied().unwrap_or(1);
    let sp = temporal_mean_pool(student_cls)?;
    let tp = temporal_mean_pool(teacher_cls)?;
    let mut out = prototype_loss(&sp, &tp, student_head, teacher_head, cfg)?;
    out.d_features = temporal_mean_pool_backward(&out.d_features, t);
    Ok(out)
}

/// iBOT loss: cross-entropy between student and teacher prototype
/// distributions at the masked patch rows of `[M, d]` features. The teacher
/// rows are Sinkhorn-centered among themselves. No masked rows gives 0.
pub fn ibot_loss<S: Scalar>(
    student_patches: &Tensor<S>,
    teacher_patches: &Tensor<S>,
    mask_indices: &[usize],
    student_head: &PrototypeHead<S>,
    teacher_head: &PrototypeHead<S>,
    cfg: &SslConfig,
) -> Result<PrototypeLoss<S>> {
    let m = student_patches.rows();
    if teacher_patches.rows() != m {
        return Err(Error::Shape("student and teacher patch counts differ".into()));
    }
    let mut d_features = Tensor::zeros(student_patches.dims().to_vec());
    if mask_indices.is_empty() {
        return Ok(PrototypeLoss {
            loss: 0.0,
            d_features,
            d_head: student_head.zeros_like(),
        });
    }
    if let Some(&bad) = mask_indices.iter().find(|&&i| i >= m) {
        return Err(Error::Index { index: bad, len: m });
    }
    let gather = |x: &Tensor<S>| {
        let d = x.cols();
        Tensor::new([mask_indices.len(), d], mask_indices.iter().flat_map(|&i| x.row(i).to_vec()).collect())
    };
    let out = prototype_loss(&gather(student_patches)?, &gather(teacher_patches)?, student_head, teacher_head, cfg)?;
    for (j, &i) in mask_indices.iter().enumerate() {
        for (a, &g) in d_features.row_mut(i).iter_mut().zip(out.d_features.row(j)) {
            *a += g;
        }
    }
    Ok(PrototypeLoss { d_features, ..out })
}

/// KoLeo spreading loss `−(1/n) Σ log min_{j≠i} ‖x_i − x_j‖`.
pub fn koleo_loss<S: Scalar>(x: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::Degenerate(format!("KoLeo needs at least 2 points, got {n}")));
    }
    let mut grad = Tensor::zeros([n, d]);
    let mut loss = 0.0;
    let inv_n = S::lit(1.0 / n as f64);
    for i in 0..n {
        let mut best = (S::infinity(), 0usize);
        for j in 0..n {
            if j == i {
                continue;
            }
            let dist2 = x.row(i).iter().zip(x.row(j)).fold(S::zero(), |a, (&p, &q)| a + (p - q) * (p - q));
            if dist2 < best.0 {
                best = (dist2, j);
            }
        }
        let (dist2, j) = best;
        if dist2 <= S::zero() {
            return Err(Error::Degenerate(format!("KoLeo points {i} and {j} coincide")));
        }
        loss -= dist2.as_f64().sqrt().ln();
        for c in 0..d {
            let g = (x.row(i)[c] - x.row(j)[c]) / dist2 * inv_n;
            grad.row_mut(i)[c] -= g;
            grad.row_mut(j)[c] += g;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Row-wise L2 normalization. Errors on a zero row.
pub fn l2_normalize_rows<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let n = row.iter().fold(S::zero(), |a, &v| a + v * v).sqrt();
        if n <= S::zero() {
            return Err(Error::Degenerate(format!("row {r} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backward of [`l2_normalize_rows`] given the normalized rows and norms.
pub fn l2_normalize_rows_backward<S: Scalar>(normalized: &Tensor<S>, norms: &[S], dy: &Tensor<S>) -> Tensor<S> {
    let mut dx = Tensor::zeros(dy.dims().to_vec());
    for r in 0..dy.rows() {
        let (u, g) = (normalized.row(r), dy.row(r));
        let dot = u.iter().zip(g).fold(S::zero(), |a, (&p, &q)| a + p * q);
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = (g[c] - u[c] * dot) / norms[r];
        }
    }
    dx
}

/// Gram anchoring `‖N_s N_sᵀ − N_g N_gᵀ‖²_F` on row-normalized features.
/// Returns the value and the gradient w.r.t. `x_s`.
pub fn gram_loss<S: Scalar>(x_s: &Tensor<S>, x_g: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    if x_s.dims() != x_g.dims() || x_s.rank() != 2 {
        return Err(Error::Shape(format!("gram inputs {:?} vs {:?}", x_s.dims(), x_g.dims())));
    }
    let (ns, norms) = l2_normalize_rows(x_s)?;
    let (ng, _) = l2_normalize_rows(x_g)?;
    let mut diff = matmul_nt(&ns, &ns)?;
    diff.axpy(-S::one(), &matmul_nt(&ng, &ng)?)?;
    let loss = diff.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
    let mut dn = matmul(&diff, &ns)?;
    dn.scale(S::lit(4.0));
    Ok((loss, l2_normalize_rows_backward(&ns, &norms, &dn)))
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

pub struct DepthLoss<S> {
    pub loss: f64,
    pub d_depth: Tensor<S>,
    pub d_conf: Tensor<S>,
}

/// Confidence-weighted depth loss over `[T, H, W, 1]` maps:
/// mean over valid pixels of `c·|D̂−D| + c·(|∇_y D̂ − ∇_y D| + |∇_x D̂ − ∇_x D|) − α·log c`.
/// `∇` is a forward difference, zero at the far edge; a gradient term
/// counts only when both pixels are valid.
pub fn depth_loss<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    conf: &Tensor<S>,
    alpha: f64,
    valid: &Tensor<S>,
) -> Result<DepthLoss<S>> {
    if pred.rank() != 4 || pred.dims() != target.dims() || pred.dims() != conf.dims() || valid.len() != pred.len() {
        return Err(Error::Shape(format!(
            "depth loss shapes {:?} {:?} {:?} valid {:?}",
            pred.dims(),
            target.dims(),
            conf.dims(),
            valid.dims()
        )));
    }
    if let Some(i) = conf.data().iter().position(|&c| !(c > S::zero())) {
        return Err(Error::NonFinite(format!("confidence at pixel {i} is not positive")));
    }
    let (t_n, h, w) = (pred.dims()[0], pred.dims()[1], pred.dims()[2]);
    let count = valid.data().iter().filter(|&&v| v > S::zero()).count();
    let mut d_depth = Tensor::zeros(pred.dims().to_vec());
    let mut d_conf = Tensor::zeros(pred.dims().to_vec());
    if count == 0 {
        return Ok(DepthLoss { loss: 0.0, d_depth, d_conf });
    }
    let inv = S::lit(1.0 / count as f64);
    let alpha_s = S::lit(alpha);
    let (p, g, c, m) = (pred.data(), target.data(), conf.data(), valid.data());
    let mut loss = S::zero();
    for t in 0..t_n {
        for y in 0..h {
            for x in 0..w {
                let i = (t * h + y) * w + x;
                if !(m[i] > S::zero()) {
                    continue;
                }
                let e = p[i] - g[i];
                let mut term = e.abs();
                d_depth.data_mut()[i] += c[i] * sign(e) * inv;
                for (ok, j) in [(y + 1 < h, i + w), (x + 1 < w, i + 1)] {
                    if ok && m[j] > S::zero() {
                        let ge = (p[j] - p[i]) - (g[j] - g[i]);
                        term += ge.abs();
                        let s = c[i] * sign(ge) * inv;
                        d_depth.data_mut()[j] += s;
                        d_depth.data_mut()[i] -= s;
                    }
                }
                loss += c[i] * term - alpha_s * c[i].ln();
                d_conf.data_mut()[i] = (term - alpha_s / c[i]) * inv;
            }
        }
    }
    Ok(DepthLoss {
        loss: loss.as_f64() / count as f64,
        d_depth,
        d_conf,
    })
}

/// Mean absolute error over the entries of valid pixels. `valid` has one
/// entry per pixel; each pixel contributes `channels` entries.
pub fn masked_l1<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, valid: Option<&Tensor<S>>) -> Result<(f64, Tensor<S>)> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!("L1 shapes {:?} vs {:?}", pred.dims(), target.dims())));
    }
    let ch = pred.cols();
    if let Some(v) = valid {
        if v.len() * ch != pred.len() {
            return Err(Error::Shape(format!("validity {:?} for {:?}", v.dims(), pred.dims())));
        }
    }
    let live = |px: usize| valid.map_or(true, |v| v.data()[px] > S::zero());
    let count = (0..pred.len() / ch.max(1)).filter(|&px| live(px)).count() * ch;
    let mut grad = Tensor::zeros(pred.dims().to_vec());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = S::lit(1.0 / count as f64);
    let mut sum = S::zero();
    for i in 0..pred.len() {
        if live(i / ch) {
            let e = pred.data()[i] - target.data()[i];
            sum += e.abs();
            grad.data_mut()[i] = sign(e) * inv;
        }
    }
    Ok((sum.as_f64() / count as f64, grad))
}

pub struct RayPointCameraLoss<S> {
    pub ray: f64,
    pub points: f64,
    pub camera: f64,
    pub d_ray: Tensor<S>,
    pub d_points: Tensor<S>,
    pub d_pose: Tensor<S>,
}

/// L1 regression on ray maps, point maps and camera poses. Ray and point
/// entries are averaged over valid pixels, pose entries over all frames.
#[allow(clippy::too_many_arguments)]
pub fn ray_point_camera_loss<S: Scalar>(
    ray: &Tensor<S>,
    ray_gt: &Tensor<S>,
    points: &Tensor<S>,
    points_gt: &Tensor<S>,
    pose: &Tensor<S>,
    pose_gt: &Tensor<S>,
    valid: &Tensor<S>,
) -> Result<RayPointCameraLoss<S>> {
    let (r, d_ray) = masked_l1(ray, ray_gt, Some(valid))?;
    let (p, d_points) = masked_l1(points, points_gt, Some(valid))?;
    let (c, d_pose) = masked_l1(pose, pose_gt, None)?;
    Ok(RayPointCameraLoss {
        ray: r,
        points: p,
        camera: c,
        d_ray,
        d_points,
        d_pose,
    })
}

/// A language model that yields normalized next-token distributions under
/// teacher forcing.
pub trait NextTokenProvider<S: Scalar> {
    type Grads;

    fn vocab(&self) -> usize;

    /// Row `n` is the distribution of target `n` given the visual tokens,
    /// the instruction and `targets[..n]`.
    fn distributions(&self, visual: &Tensor<S>, instruction: &[usize], targets: &[usize]) -> Result<Tensor<S>>;

    /// Pulls `d_dist` (shaped like [`Self::distributions`]) back to the visual
    /// tokens and the provider's own parameters.
    fn backward(
        &self,
        visual: &Tensor<S>,
        instruction: &[usize],
        targets: &[usize],
        d_dist: &Tensor<S>,
    ) -> Result<(Tensor<S>, Self::Grads)>;
}

pub struct CaptionLoss<S, G> {
    pub loss: f64,
    pub d_visual: Tensor<S>,
    pub decoder_grads: G,
}

/// Token-mean negative log-likelihood of `targets`.
pub fn caption_loss<S: Scalar, D: NextTokenProvider<S>>(
    visual: &Tensor<S>,
    instruction: &[usize],
    targets: &[usize],
    decoder: &D,
) -> Result<CaptionLoss<S, D::Grads>> {
    if targets.is_empty() {
        return Err(Error::Shape("caption target is empty".into()));
    }
    let dist = decoder.distributions(visual, instruction, targets)?;
    if dist.dims() != [targets.len(), decoder.vocab()] {
        return Err(Error::Shape(format!(
            "decoder returned {:?} for {} targets over {} tokens",
            dist.dims(),
            targets.len(),
            decoder.vocab()
        )));
    }
    let n = targets.len();
    let mut loss = 0.0;
    let mut d_dist = Tensor::zeros(dist.dims().to_vec());
    for (i, &y) in targets.iter().enumerate() {
        let row = dist.row(i);
        let total: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (total - 1.0).abs() > 1e-5 || row.iter().any(|v| *v < S::zero()) {
            return Err(Error::NonFinite(format!(
                "decoder distribution at step {i} is not normalized (sums to {total})"
            )));
        }
        if y >= decoder.vocab() {
            return Err(Error::Index {
                index: y,
                len: decoder.vocab(),
            });
        }
        let p = row[y].as_f64();
        loss -= p.ln();
        d_dist.row_mut(i)[y] = S::lit(-1.0 / (n as f64 * p));
    }
    let (d_visual, decoder_grads) = decoder.backward(visual, instruction, targets, &d_dist)?;
    Ok(CaptionLoss {
        loss: loss / n as f64,
        d_visual,
        decoder_grads,
    })
}

const VISUAL_NORM_EPS: f64 = 1e-6;

/// Toy decoder: `logits_n = flatten(norm(visual))·W / √width + E_prev[y_{n−1}] + Σ E_inst + b`,
/// where the first step conditions on the last instruction token.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCaptionDecoder<S> {
    pub w_visual: Tensor<S>,
    pub prev_embed: Tensor<S>,
    pub inst_embed: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LinearCaptionDecoder<S> {
    pub fn new(visual_width: usize, vocab: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            w_visual: crate::backbone::trunc_normal([visual_width, vocab], rng),
            prev_embed: Tensor::zeros([vocab, vocab]),
            inst_embed: Tensor::zeros([vocab, vocab]),
            bias: Tensor::zeros([vocab]),
        }
    }

    fn check(&self, visual: &Tensor<S>, instruction: &[usize], targets: &[usize]) -> Result<()> {
        if visual.len() != self.w_visual.dims()[0] {
            return Err(Error::Shape(format!(
                "decoder expects {} visual values, got {:?}",
                self.w_visual.dims()[0],
                visual.dims()
            )));
        }
        let v = self.vocab_size();
        if let Some(&bad) = instruction.iter().chain(targets).find(|&&t| t >= v) {
            return Err(Error::Index { index: bad, len: v });
        }
        if instruction.is_empty() {
            return Err(Error::Shape("instruction must hold at least one token".into()));
        }
        Ok(())
    }

    fn vocab_size(&self) -> usize {
        self.bias.len()
    }

    /// Normalizes every visual token (no affine), then flattens and scales
    /// by `1/√width` so the visual logit term starts at unit scale.
    fn flat_visual(&self, visual: &Tensor<S>) -> Result<(Tensor<S>, LayerNormCache<S>)> {
        let d = visual.cols();
        let (normed, cache) = layer_norm(visual, &Tensor::filled([d], S::one()), &Tensor::zeros([d]), VISUAL_NORM_EPS)?;
        let scale = S::lit(1.0 / (visual.rows() as f64).sqrt());
        let flat = Tensor::new([1, visual.len()], normed.data().iter().map(|&v| v * scale).collect())?;
        Ok((flat, cache))
    }

    fn prev_tokens(instruction: &[usize], targets: &[usize]) -> Vec<usize> {
        std::iter::once(*instruction.last().expect("instruction"))
            .chain(targets[..targets.len() - 1].iter().copied())
            .collect()
    }
}

impl<S: Scalar> NextTokenProvider<S> for LinearCaptionDecoder<S> {
    type Grads = LinearCaptionDecoder<S>;

    fn vocab(&self) -> usize {
        self.vocab_size()
    }

    fn distributions(&self, visual: &Tensor<S>, instruction: &[usize], targets: &[usize]) -> Result<Tensor<S>> {
        self.check(visual, instruction, targets)?;
        let base = matmul(&self.flat_visual(visual)?.0, &self.w_visual)?;
        let v = self.vocab_size();
        let mut logits = Tensor::zeros([targets.len(), v]);
        for (n, &prev) in Self::prev_tokens(instruction, targets).iter().enumerate() {
            let row = logits.row_mut(n);
            for k in 0..v {
                row[k] = base.data()[k] + self.prev_embed.row(prev)[k] + self.bias.data()[k];
                for &i in instruction {
                    row[k] += self.inst_embed.row(i)[k];
                }
            }
        }
        Ok(softmax_rows(&logits, 1.0))
    }

    fn backward(
        &self,
        visual: &Tensor<S>,
        instruction: &[usize],
        targets: &[usize],
        d_dist: &Tensor<S>,
    ) -> Result<(Tensor<S>, Self::Grads)> {
        let p = self.distributions(visual, instruction, targets)?;
        let v = self.vocab_size();
        let mut grads = self.zeros_like();
        let mut d_base = vec![S::zero(); v];
        for (n, &prev) in Self::prev_tokens(instruction, targets).iter().enumerate() {
            let (pr, dr) = (p.row(n), d_dist.row(n));
            let dot = pr.iter().zip(dr).fold(S::zero(), |a, (&x, &y)| a + x * y);
            for k in 0..v {
                let dl = pr[k] * (dr[k] - dot);
                d_base[k] += dl;
                grads.prev_embed.row_mut(prev)[k] += dl;
                grads.bias.data_mut()[k] += dl;
                for &i in instruction {
                    grads.inst_embed.row_mut(i)[k] += dl;
                }
            }
        }
        let db = Tensor::new([1, v], d_base)?;
        let (flat, cache) = self.flat_visual(visual)?;
        grads.w_visual = matmul_tn(&flat, &db)?;
        let mut d_normed = matmul_nt(&db, &self.w_visual)?.reshape(cache.xhat.dims().to_vec())?;
        d_normed.scale(S::lit(1.0 / (visual.rows() as f64).sqrt()));
        let d = visual.cols();
        let (d_visual, _, _) = layer_norm_backward(&d_normed, &Tensor::filled([d], S::one()), &cache);
        Ok((d_visual, grads))
    }
}

impl<S: Scalar> ParamTree<S> for LinearCaptionDecoder<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(join(prefix, "w_visual"), &self.w_visual);
        f(join(prefix, "prev_embed"), &self.prev_embed);
        f(join(prefix, "inst_embed"), &self.inst_embed);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        f(join(prefix, "w_visual"), &mut self.w_visual);
        f(join(prefix, "prev_embed"), &mut self.prev_embed);
        f(join(prefix, "inst_embed"), &mut self.inst_embed);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
