//! Causal spatiotemporal attention.
//!
//! Tokens attend to every token of their own frame and of earlier frames.
//! Two execution paths compute the same function:
//!
//! * [`full_causal_attention`] runs over a whole clip. For each query frame it
//!   only touches the key prefix the mask leaves visible.
//! * [`cached_attention_step`] processes one new frame against a [`KVCache`]
//!   holding the rotated keys and values of all earlier frames.
//!
//! Both paths feed identical operands to the same kernel in the same order,
//! so the streaming output reproduces the full-sequence output bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, softmax_backward_row, softmax_block_update, softmax_row_in_place, MatRef, Scalar, Tensor};
use crate::rope3d::{plan_axes, AxisPlan, RopeConfig, RopePosition, RopeTable};
use crate::tokenizer::TokenLayout;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub rope: RopeConfig,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Self {
        let d_head = if n_heads == 0 { 0 } else { d_model / n_heads };
        Self {
            d_model,
            n_heads,
            rope: RopeConfig::new(d_head),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.rope.d_head != self.d_head() {
            return Err(Error::Config(format!(
                "rotary width {} differs from head width {}",
                self.rope.d_head,
                self.d_head()
            )));
        }
        self.rope.validate()
    }

    pub fn plan(&self) -> Result<AxisPlan> {
        self.validate()?;
        plan_axes(&self.rope)
    }
}

/// Which keys a query frame may see. `Bidirectional` exists only as a
/// negative control for the causality checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    Causal,
    Bidirectional,
}

/// The frame-causal additive mask, evaluated on demand from the layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CausalMask {
    layout: TokenLayout,
}

pub fn build_mask(layout: &TokenLayout) -> CausalMask {
    CausalMask { layout: *layout }
}

impl CausalMask {
    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    /// `true` when query `u` may attend to key `v`.
    pub fn allows(&self, u: usize, v: usize) -> Result<bool> {
        Ok(self.layout.tau(u)? >= self.layout.tau(v)?)
    }

    pub fn entry<S: Scalar>(&self, u: usize, v: usize) -> Result<S> {
        Ok(if self.allows(u, v)? {
            S::zero()
        } else {
            S::neg_infinity()
        })
    }

    /// Keys visible to query `u` form the prefix `0..visible_keys(u)`.
    pub fn visible_keys(&self, u: usize) -> Result<usize> {
        Ok((self.layout.tau(u)? + 1) * self.layout.per_frame())
    }

    /// Materialized `[N, N]` mask.
    pub fn dense<S: Scalar>(&self) -> Tensor<S> {
        let n = self.layout.total();
        let pf = self.layout.per_frame();
        Tensor::from_fn([n, n], |i| {
            if (i / n) / pf >= (i % n) / pf {
                S::zero()
            } else {
                S::neg_infinity()
            }
        })
    }
}

/// Persistent key/value store of one layer. Keys are stored after rotation,
/// one contiguous row-major `[tokens, d_head]` buffer per head.
#[derive(Clone, Debug)]
pub struct KVCache<S> {
    layer: usize,
    n_heads: usize,
    d_head: usize,
    per_frame: usize,
    capacity_tokens: usize,
    frames: usize,
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    scores: Vec<S>,
}

impl<S: Scalar> KVCache<S> {
    pub fn new(layer: usize, config: &AttentionConfig, layout: &TokenLayout, capacity_frames: usize) -> Self {
        Self {
            layer,
            n_heads: config.n_heads,
            d_head: config.d_head(),
            per_frame: layout.per_frame(),
            capacity_tokens: capacity_frames * layout.per_frame(),
            frames: 0,
            keys: vec![Vec::new(); config.n_heads],
            values: vec![Vec::new(); config.n_heads],
            scores: Vec::new(),
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.per_frame
    }

    pub fn capacity_tokens(&self) -> usize {
        self.capacity_tokens
    }

    /// Bytes held by cached keys and values.
    pub fn bytes(&self) -> usize {
        2 * self.tokens() * self.n_heads * self.d_head * S::DTYPE.size_of()
    }

    pub fn keys(&self, head: usize) -> &[S] {
        &self.keys[head]
    }

    pub fn values(&self, head: usize) -> &[S] {
        &self.values[head]
    }

    pub fn reset(&mut self) {
        self.frames = 0;
        self.keys.iter_mut().chain(&mut self.values).for_each(Vec::clear);
    }

    /// Drops every frame at index `frames` and later.
    pub fn truncate_frames(&mut self, frames: usize) {
        if frames < self.frames {
            let len = frames * self.per_frame * self.d_head;
            self.keys.iter_mut().chain(&mut self.values).for_each(|v| v.truncate(len));
            self.frames = frames;
        }
    }

    /// Fails with a capacity error if one more frame does not fit.
    pub fn check_room(&self) -> Result<()> {
        let needed = self.tokens() + self.per_frame;
        if needed > self.capacity_tokens {
            return Err(Error::Capacity {
                needed,
                capacity: self.capacity_tokens,
            });
        }
        Ok(())
    }

    fn check_compatible(&self, config: &AttentionConfig, layout: &TokenLayout) -> Result<()> {
        if self.n_heads != config.n_heads || self.d_head != config.d_head() {
            return Err(Error::CacheMismatch(format!(
                "layer {} cache has {}x{} heads, config wants {}x{}",
                self.layer,
                self.n_heads,
                self.d_head,
                config.n_heads,
                config.d_head()
            )));
        }
        if self.per_frame != layout.per_frame() {
            return Err(Error::CacheMismatch(format!(
                "layer {} cache built for {} tokens per frame, got {}",
                self.layer,
                self.per_frame,
                layout.per_frame()
            )));
        }
        Ok(())
    }
}

/// Keys per block of the streaming softmax in [`attend`]; sized so a block
/// of scores for one frame of queries stays in L2.
const KEY_BLOCK: usize = 512;

/// Scaled-dot-product attention of `m` rotated queries against the first
/// `n_keys` cached rows, written into `out` with row stride `ldo`.
///
/// Keys are visited in blocks of [`KEY_BLOCK`] with a running max and sum
/// per query, so the score buffer never grows past `m × KEY_BLOCK`.
#[allow(clippy::too_many_arguments)]
fn attend<S: Scalar>(
    m: usize,
    n_keys: usize,
    d_head: usize,
    q: &[S],
    keys: &[S],
    values: &[S],
    out: &mut [S],
    ldo: usize,
    scores: &mut Vec<S>,
) -> Result<()> {
    let kb_max = n_keys.min(KEY_BLOCK);
    if scores.len() < m * kb_max {
        scores.resize(m * kb_max, S::zero());
    }
    let mut acc = vec![S::zero(); m * d_head];
    let mut row_max = vec![S::neg_infinity(); m];
    let mut row_sum = vec![S::zero(); m];
    let mut nan_row = None;
    for k0 in (0..n_keys).step_by(KEY_BLOCK) {
        let kb = KEY_BLOCK.min(n_keys - k0);
        let s = &mut scores[..m * kb];
        gemm(
            m,
            kb,
            d_head,
            MatRef::row_major(q, d_head),
            MatRef::transposed(&keys[k0 * d_head..], d_head),
            s,
            kb,
            false,
        );
        for (row, chunk) in s.chunks_mut(kb).enumerate() {
            let (max, sum) = softmax_block_update(chunk, row_max[row]);
            if sum.is_nan() && nan_row.is_none() {
                nan_row = Some(row);
            }
            if max != row_max[row] {
                // rescale what earlier blocks accumulated to the new max
                let c = (row_max[row] - max).exp_fast();
                row_sum[row] *= c;
                acc[row * d_head..(row + 1) * d_head].iter_mut().for_each(|v| *v *= c);
                row_max[row] = max;
            }
            row_sum[row] += sum;
        }
        gemm(
            m,
            d_head,
            kb,
            MatRef::row_major(s, kb),
            MatRef::row_major(&values[k0 * d_head..], d_head),
            &mut acc,
            d_head,
            true,
        );
    }
    if let Some(row) = nan_row {
        return Err(Error::NonFinite(format!("attention scores of query {row}")));
    }
    for row in 0..m {
        if row_max[row] == S::neg_infinity() {
            return Err(Error::FullyMasked { row });
        }
        let inv = S::one() / row_sum[row];
        for (o, &a) in out[row * ldo..row * ldo + d_head].iter_mut().zip(&acc[row * d_head..]) {
            *o = a * inv;
        }
    }
    Ok(())
}

/// Copies head `h` of `x` (`[rows, d_model]`) into a contiguous buffer and
/// rotates it; `scale` multiplies the result.
fn head_slice<S: Scalar>(x: &[S], rows: usize, d_model: usize, h: usize, d_head: usize, table: Option<&RopeTable<S>>, scale: S) -> Vec<S> {
    let mut out = Vec::with_capacity(rows * d_head);
    for r in 0..rows {
        out.extend_from_slice(&x[r * d_model + h * d_head..r * d_model + (h + 1) * d_head]);
    }
    if let Some(t) = table {
        t.rotate(&mut out, d_head, 0, false);
    }
    if scale != S::one() {
        out.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

fn check_qkv<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, rows: usize, config: &AttentionConfig) -> Result<()> {
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rank() != 2 || t.dims() != [rows, config.d_model] {
            return Err(Error::Shape(format!(
                "{name} has shape {:?}, expected [{rows}, {}]",
                t.dims(),
                config.d_model
            )));
        }
    }
    Ok(())
}

fn query_scale<S: Scalar>(config: &AttentionConfig) -> S {
    S::lit(1.0 / (config.d_head() as f64).sqrt())
}

pub fn full_causal_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    config: &AttentionConfig,
    layout: &TokenLayout,
    positions: &[RopePosition],
) -> Result<Tensor<S>> {
    full_attention(q, k, v, config, layout, positions, Visibility::Causal)
}

pub fn full_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    config: &AttentionConfig,
    layout: &TokenLayout,
    positions: &[RopePosition],
    visibility: Visibility,
) -> Result<Tensor<S>> {
    let plan = config.plan()?;
    if positions.len() != layout.total() {
        return Err(Error::Shape(format!(
            "{} positions for {} tokens",
            positions.len(),
            layout.total()
        )));
    }
    let table = RopeTable::new(&plan, positions);
    full_attention_with_table(q, k, v, config, layout, &table, visibility)
}

/// [`full_attention`] with a precomputed rotation table for all tokens.
pub fn full_attention_with_table<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    config: &AttentionConfig,
    layout: &TokenLayout,
    table: &RopeTable<S>,
    visibility: Visibility,
) -> Result<Tensor<S>> {
    config.validate()?;
    let n = layout.total();
    check_qkv(q, k, v, n, config)?;
    if table.tokens() != n || table.cos.cols() * 2 != config.d_head() {
        return Err(Error::Shape(format!(
            "rotation table {:?} for {n} tokens of head width {}",
            table.cos.dims(),
            config.d_head()
        )));
    }
    let (d, dh, pf) = (config.d_model, config.d_head(), layout.per_frame());
    let scale = query_scale::<S>(config);
    let mut out = Tensor::zeros([n, d]);
    let mut scores = Vec::new();
    for h in 0..config.n_heads {
        let qh = head_slice(q.data(), n, d, h, dh, Some(table), scale);
        let kh = head_slice(k.data(), n, d, h, dh, Some(table), S::one());
        let vh = head_slice(v.data(), n, d, h, dh, None, S::one());
        for t in 0..layout.frames {
            let n_keys = match visibility {
                Visibility::Causal => (t + 1) * pf,
                Visibility::Bidirectional => n,
            };
            attend(
                pf,
                n_keys,
                dh,
                &qh[t * pf * dh..(t + 1) * pf * dh],
                &kh,
                &vh,
                &mut out.data_mut()[t * pf * d + h * dh..],
                d,
                &mut scores,
            )?;
        }
    }
    Ok(out)
}

/// Attention output for one new frame, using and extending `cache`.
/// `positions` covers the frame's `per_frame` tokens.
pub fn cached_attention_step<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    cache: &mut KVCache<S>,
    config: &AttentionConfig,
    layout: &TokenLayout,
    positions: &[RopePosition],
) -> Result<Tensor<S>> {
    let plan = config.plan()?;
    if positions.len() != layout.per_frame() {
        return Err(Error::Shape(format!(
            "{} positions for a {}-token frame",
            positions.len(),
            layout.per_frame()
        )));
    }
    if let Some(RopePosition::Coord { t, .. }) = positions.iter().find(|p| matches!(p, RopePosition::Coord { .. })) {
        if *t != cache.frames() as f64 {
            return Err(Error::CacheMismatch(format!(
                "frame at time {t} pushed to layer {} cache holding {} frames",
                cache.layer(),
                cache.frames()
            )));
        }
    }
    let table = RopeTable::new(&plan, positions);
    cached_attention_step_with_table(q, k, v, cache, config, layout, &table)
}

/// [`cached_attention_step`] with a precomputed rotation table for the frame.
pub fn cached_attention_step_with_table<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    cache: &mut KVCache<S>,
    config: &AttentionConfig,
    layout: &TokenLayout,
    table: &RopeTable<S>,
) -> Result<Tensor<S>> {
    config.validate()?;
    cache.check_compatible(config, layout)?;
    let pf = layout.per_frame();
    check_qkv(q, k, v, pf, config)?;
    if table.tokens() != pf {
        return Err(Error::Shape(format!("rotation table for {} tokens, frame has {pf}", table.tokens())));
    }
    cache.check_room()?;
    let (d, dh) = (config.d_model, config.d_head());
    let scale = query_scale::<S>(config);
    let mut out = Tensor::zeros([pf, d]);
    let n_keys = cache.tokens() + pf;
    for h in 0..config.n_heads {
        let qh = head_slice(q.data(), pf, d, h, dh, Some(table), scale);
        let kh = head_slice(k.data(), pf, d, h, dh, Some(table), S::one());
        let vh = head_slice(v.data(), pf, d, h, dh, None, S::one());
        cache.keys[h].extend_from_slice(&kh);
        cache.values[h].extend_from_slice(&vh);
        let KVCache { keys, values, scores, .. } = cache;
        let result = attend(pf, n_keys, dh, &qh, &keys[h], &values[h], &mut out.data_mut()[h * dh..], d, scores);
        if let Err(e) = result {
            // roll back so a failed step leaves the cache untouched
            for g in 0..=h {
                cache.keys[g].truncate(cache.frames * pf * dh);
                cache.values[g].truncate(cache.frames * pf * dh);
            }
            return Err(e);
        }
    }
    cache.frames += 1;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Cache,
    Recompute,
}

/// Multiply-accumulates one attention layer spends to produce frame `t`'s
/// output: the q/k/v/output projections plus the score and value products.
/// Recompute mode runs the whole causal prefix `0..=t`, skipping masked key
/// blocks; cache mode runs only frame `t`'s tokens against `(t+1)` frames of
/// keys.
pub fn attention_flops(mode: AttentionMode, layout: &TokenLayout, config: &AttentionConfig, t: usize) -> u128 {
    let pf = layout.per_frame() as u128;
    let d = config.d_model as u128;
    let t = t as u128;
    let projections = 4 * pf * d * d;
    match mode {
        AttentionMode::Cache => projections + 2 * pf * (t + 1) * pf * d,
        // sum over j in 0..=t of 2·pf·(j+1)·pf·d
        AttentionMode::Recompute => (t + 1) * projections + pf * pf * d * (t + 1) * (t + 2),
    }
}

/// Gradients of [`full_attention`] with respect to its `q`, `k`, `v` inputs.
pub struct AttentionGrads<S> {
    pub dq: Tensor<S>,
    pub dk: Tensor<S>,
    pub dv: Tensor<S>,
}

/// Backward pass of [`full_attention_with_table`]. Recomputes the
/// probabilities densely, which is fine at training-clip sizes.
#[allow(clippy::too_many_arguments)]
pub fn full_attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    d_out: &Tensor<S>,
    config: &AttentionConfig,
    layout: &TokenLayout,
    table: &RopeTable<S>,
    visibility: Visibility,
) -> Result<AttentionGrads<S>> {
    config.validate()?;
    let n = layout.total();
    check_qkv(q, k, v, n, config)?;
    check_qkv(d_out, d_out, d_out, n, config)?;
    let (d, dh, pf) = (config.d_model, config.d_head(), layout.per_frame());
    let scale = query_scale::<S>(config);
    let mut dq = Tensor::zeros([n, d]);
    let mut dk = Tensor::zeros([n, d]);
    let mut dv = Tensor::zeros([n, d]);
    let visible = |u: usize| match visibility {
        Visibility::Causal => (u / pf + 1) * pf,
        Visibility::Bidirectional => n,
    };
    for h in 0..config.n_heads {
        let qh = head_slice(q.data(), n, d, h, dh, Some(table), scale);
        let kh = head_slice(k.data(), n, d, h, dh, Some(table), S::one());
        let vh = head_slice(v.data(), n, d, h, dh, None, S::one());
        let doh = head_slice(d_out.data(), n, d, h, dh, None, S::one());
        let mut dqh = vec![S::zero(); n * dh];
        let mut dkh = vec![S::zero(); n * dh];
        let mut dvh = vec![S::zero(); n * dh];
        let mut p = vec![S::zero(); n];
        let mut dp = vec![S::zero(); n];
        let mut ds = vec![S::zero(); n];
        for u in 0..n {
            let nk = visible(u);
            let qu = &qh[u * dh..(u + 1) * dh];
            for j in 0..nk {
                p[j] = qu.iter().zip(&kh[j * dh..(j + 1) * dh]).fold(S::zero(), |s, (&a, &b)| s + a * b);
            }
            if !softmax_row_in_place(&mut p[..nk]) {
                return Err(masked_row_error(&p[..nk], u));
            }
            let du = &doh[u * dh..(u + 1) * dh];
            for j in 0..nk {
                let vj = &vh[j * dh..(j + 1) * dh];
                dp[j] = du.iter().zip(vj).fold(S::zero(), |s, (&a, &b)| s + a * b);
                for (acc, &g) in dvh[j * dh..(j + 1) * dh].iter_mut().zip(du) {
                    *acc += p[j] * g;
                }
            }
            softmax_backward_row(&p[..nk], &dp[..nk], &mut ds[..nk]);
            for j in 0..nk {
                let kj = &kh[j * dh..(j + 1) * dh];
                for c in 0..dh {
                    dqh[u * dh + c] += ds[j] * kj[c];
                    dkh[j * dh + c] += ds[j] * qu[c];
                }
            }
        }
        dqh.iter_mut().for_each(|g| *g *= scale);
        table.rotate(&mut dqh, dh, 0, true);
        table.rotate(&mut dkh, dh, 0, true);
        for r in 0..n {
            let dst = r * d + h * dh;
            dq.data_mut()[dst..dst + dh].copy_from_slice(&dqh[r * dh..(r + 1) * dh]);
            dk.data_mut()[dst..dst + dh].copy_from_slice(&dkh[r * dh..(r + 1) * dh]);
            dv.data_mut()[dst..dst + dh].copy_from_slice(&dvh[r * dh..(r + 1) * dh]);
        }
    }
    Ok(AttentionGrads { dq, dk, dv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_layout(frames: usize) -> TokenLayout {
        // 5 specials (no cam) + 1x1 grid = 6 tokens per frame
        TokenLayout::from_grid(frames, 1, 1, 16, false)
    }

    fn random(rng: &mut ChaCha8Rng, dims: [usize; 2]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn mask_examples() {
        let single = build_mask(&small_layout(1));
        assert!(single.dense::<f64>().data().iter().all(|&v| v == 0.0));
        let l = TokenLayout { frames: 2, special: 3, grid_h: 0, grid_w: 0, patch: 16, cam_enabled: false };
        assert_eq!(l.per_frame(), 3);
        let m = build_mask(&l);
        assert_eq!(m.entry::<f32>(0, 4).unwrap(), f32::NEG_INFINITY);
        assert_eq!(m.entry::<f32>(4, 0).unwrap(), 0.0);
        assert_eq!(m.visible_keys(4).unwrap(), 6);
    }

    #[test]
    fn mask_matches_double_loop() {
        let l = TokenLayout::from_grid(3, 2, 2, 16, true);
        let dense = build_mask(&l).dense::<f64>();
        let n = l.total();
        for u in 0..n {
            for v in 0..n {
                let want = if l.tau(u).unwrap() >= l.tau(v).unwrap() { 0.0 } else { f64::NEG_INFINITY };
                assert_eq!(dense.data()[u * n + v], want);
            }
        }
    }

    #[test]
    fn flops_closed_form() {
        let l = TokenLayout::from_grid(512, 14, 14, 16, true);
        let c = AttentionConfig::new(256, 4);
        for m in [AttentionMode::Cache, AttentionMode::Recompute] {
            assert_eq!(attention_flops(AttentionMode::Cache, &l, &c, 0), attention_flops(m, &l, &c, 0));
        }
        let ratio = |m, k: usize| attention_flops(m, &l, &c, 2 * k) as f64 / attention_flops(m, &l, &c, k) as f64;
        assert!((ratio(AttentionMode::Cache, 64) - 2.0).abs() < 0.06);
        assert!((ratio(AttentionMode::Cache, 128) - 2.0).abs() < 0.05);
        assert!((ratio(AttentionMode::Recompute, 128) - 4.0).abs() < 0.15);
        assert!((ratio(AttentionMode::Recompute, 4096) - 4.0).abs() < 0.01);
        // cache mode is affine, recompute has a constant positive second difference
        let f = |m, t| attention_flops(m, &l, &c, t) as i128;
        for t in 1..40 {
            assert_eq!(f(AttentionMode::Cache, t + 1) - 2 * f(AttentionMode::Cache, t) + f(AttentionMode::Cache, t - 1), 0);
            let d2 = f(AttentionMode::Recompute, t + 1) - 2 * f(AttentionMode::Recompute, t) + f(AttentionMode::Recompute, t - 1);
            assert_eq!(d2, 2 * 202 * 202 * 256);
        }
    }

    #[test]
    fn single_token_returns_value_row() {
        let l = TokenLayout { frames: 1, special: 1, grid_h: 0, grid_w: 0, patch: 1, cam_enabled: false };
        let cfg = AttentionConfig::new(16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (random(&mut rng, [1, 16]), random(&mut rng, [1, 16]), random(&mut rng, [1, 16]));
        let out = full_causal_attention(&q, &k, &v, &cfg, &l, &[RopePosition::Special]).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let l = small_layout(2);
        let cfg = AttentionConfig::new(32, 2);
        let n = l.total();
        let pos: Vec<_> = (0..n).map(|u| RopePosition::grid(u / 6, u % 3, u % 2)).collect();
        let table = RopeTable::new(&cfg.plan().unwrap(), &pos);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (random(&mut rng, [n, 32]), random(&mut rng, [n, 32]), random(&mut rng, [n, 32]));
        let w = random(&mut rng, [n, 32]);
        let objective = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
            let o = full_attention_with_table(q, k, v, &cfg, &l, &table, Visibility::Causal).unwrap();
            o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = full_attention_backward(&q, &k, &v, &w, &cfg, &l, &table, Visibility::Causal).unwrap();
        let nq = finite_difference_gradient(|x| objective(x, &k, &v), &q, 1e-5).unwrap();
        let nk = finite_difference_gradient(|x| objective(&q, x, &v), &k, 1e-5).unwrap();
        let nv = finite_difference_gradient(|x| objective(&q, &k, x), &v, 1e-5).unwrap();
        assert!(relative_error(&g.dq, &nq) < 1e-6);
        assert!(relative_error(&g.dk, &nk) < 1e-6);
        assert!(relative_error(&g.dv, &nv) < 1e-6);
    }
}

/// A row that failed softmax is either fully masked or poisoned by NaN.
fn masked_row_error<S: Scalar>(scores: &[S], row: usize) -> Error {
    if scores.iter().any(|v| v.is_nan()) {
        Error::NonFinite(format!("attention scores of query {row}"))
    } else {
        Error::FullyMasked { row }
    }
}
