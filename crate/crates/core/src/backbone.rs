//! Pre-norm transformer stack over frame tokens.
//!
//! Each block computes `x += Attn(LN(x))` then `x += MLP(LN(x))` with a GELU
//! MLP. Layer index `ℓ` names the residual stream after `ℓ` blocks, so layer
//! 0 is the token embedding itself. Patch features are captured at the
//! configured layers; CLS and CAM tokens are read after the last block.
//!
//! The full-clip and streaming paths run the same per-row operations and the
//! same attention kernel, so they agree exactly.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    cached_attention_step_with_table, full_attention_backward, full_attention_with_table, AttentionConfig,
    KVCache, Visibility,
};
use crate::error::{Error, Result};
use crate::numerics::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward,
    LayerNormCache, Scalar, Tensor,
};
use crate::params::{join, ParamTree};
use crate::rope3d::{scale_positions, RopePosition, RopeTable};
use crate::tokenizer::{extract_patches, special_tokens, FrameStream, TokenLayout, TokenSequence};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub attention: AttentionConfig,
    pub mlp_ratio: usize,
    pub selected_layers: Vec<usize>,
    pub patch: usize,
    pub cam_enabled: bool,
}

impl BackboneConfig {
    /// A config with the default layer selection `{n_layers / 2, n_layers}`.
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, patch: usize, cam_enabled: bool) -> Self {
        let mut selected = vec![n_layers / 2, n_layers];
        selected.dedup();
        Self {
            n_layers,
            attention: AttentionConfig::new(d_model, n_heads),
            mlp_ratio: 4,
            selected_layers: selected,
            patch,
            cam_enabled,
        }
    }

    pub fn d_model(&self) -> usize {
        self.attention.d_model
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.d_model()
    }

    pub fn special(&self) -> usize {
        special_tokens(self.cam_enabled)
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.patch == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("patch size and MLP ratio must be positive".into()));
        }
        if self.selected_layers.is_empty() {
            return Err(Error::Config("at least one layer must be selected".into()));
        }
        if self.selected_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "selected layers {:?} must be strictly ascending",
                self.selected_layers
            )));
        }
        if let Some(&last) = self.selected_layers.last() {
            if last > self.n_layers {
                return Err(Error::Config(format!(
                    "selected layer {last} exceeds the {} layers of the model",
                    self.n_layers
                )));
            }
        }
        Ok(())
    }

    pub fn layout(&self, frames: usize, height: usize, width: usize) -> Result<TokenLayout> {
        TokenLayout::new(frames, height, width, self.patch, self.cam_enabled)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<S> {
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub w_qkv: Tensor<S>,
    pub b_qkv: Tensor<S>,
    pub w_o: Tensor<S>,
    pub b_o: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
    pub w_fc1: Tensor<S>,
    pub b_fc1: Tensor<S>,
    pub w_fc2: Tensor<S>,
    pub b_fc2: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<S> {
    pub patch_w: Tensor<S>,
    pub patch_b: Tensor<S>,
    pub special: Tensor<S>,
    pub mask_token: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
}

/// Truncated normal draw (σ = 0.02, cut at ±2σ).
pub fn trunc_normal<S: Scalar>(dims: impl Into<Vec<usize>>, rng: &mut impl Rng) -> Tensor<S> {
    let normal = Normal::new(0.0, 0.02).expect("valid sigma");
    Tensor::from_fn(dims, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 0.04 {
            break S::lit(v);
        }
    })
}

impl<S: Scalar> BlockParams<S> {
    fn init(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1_g: Tensor::filled([d], S::one()),
            ln1_b: Tensor::zeros([d]),
            w_qkv: trunc_normal([d, 3 * d], rng),
            b_qkv: Tensor::zeros([3 * d]),
            w_o: trunc_normal([d, d], rng),
            b_o: Tensor::zeros([d]),
            ln2_g: Tensor::filled([d], S::one()),
            ln2_b: Tensor::zeros([d]),
            w_fc1: trunc_normal([d, hidden], rng),
            b_fc1: Tensor::zeros([hidden]),
            w_fc2: trunc_normal([hidden, d], rng),
            b_fc2: Tensor::zeros([d]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<S>); 12] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w_qkv", &self.w_qkv),
            ("b_qkv", &self.b_qkv),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w_fc1", &self.w_fc1),
            ("b_fc1", &self.b_fc1),
            ("w_fc2", &self.w_fc2),
            ("b_fc2", &self.b_fc2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<S>); 12] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("w_qkv", &mut self.w_qkv),
            ("b_qkv", &mut self.b_qkv),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w_fc1", &mut self.w_fc1),
            ("b_fc1", &mut self.b_fc1),
            ("w_fc2", &mut self.w_fc2),
            ("b_fc2", &mut self.b_fc2),
        ]
    }

    fn expected_dims(d: usize, hidden: usize) -> [Vec<usize>; 12] {
        [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, hidden],
            vec![hidden],
            vec![hidden, d],
            vec![d],
        ]
    }
}

impl<S: Scalar> BackboneParams<S> {
    pub fn init(config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, p) = (config.d_model(), config.patch);
        Ok(Self {
            patch_w: trunc_normal([3 * p * p, d], rng),
            patch_b: Tensor::zeros([d]),
            special: trunc_normal([config.special(), d], rng),
            mask_token: Tensor::zeros([d]),
            blocks: (0..config.n_layers)
                .map(|_| BlockParams::init(d, config.hidden(), rng))
                .collect(),
        })
    }

    /// Checks every tensor against `config`; the error names the offending
    /// layer and tensor.
    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        let (d, p) = (config.d_model(), config.patch);
        let check = |name: String, t: &Tensor<S>, want: &[usize]| {
            if t.dims() != want {
                Err(Error::Shape(format!("{name}: shape {:?}, expected {want:?}", t.dims())))
            } else {
                Ok(())
            }
        };
        check("patch_w".into(), &self.patch_w, &[3 * p * p, d])?;
        check("patch_b".into(), &self.patch_b, &[d])?;
        check("special".into(), &self.special, &[config.special(), d])?;
        check("mask_token".into(), &self.mask_token, &[d])?;
        if self.blocks.len() != config.n_layers {
            return Err(Error::Shape(format!(
                "{} blocks for a {}-layer config",
                self.blocks.len(),
                config.n_layers
            )));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let want = BlockParams::<S>::expected_dims(d, config.hidden());
            for ((name, t), dims) in b.fields().into_iter().zip(want.iter()) {
                check(format!("layer {} {name}", l + 1), t, dims)?;
            }
        }
        Ok(())
    }
}

impl<S: Scalar> ParamTree<S> for BackboneParams<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(join(prefix, "patch_w"), &self.patch_w);
        f(join(prefix, "patch_b"), &self.patch_b);
        f(join(prefix, "special"), &self.special);
        f(join(prefix, "mask_token"), &self.mask_token);
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.fields() {
                f(join(prefix, &format!("blocks.{l}.{name}")), t);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        f(join(prefix, "patch_w"), &mut self.patch_w);
        f(join(prefix, "patch_b"), &mut self.patch_b);
        f(join(prefix, "special"), &mut self.special);
        f(join(prefix, "mask_token"), &mut self.mask_token);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.fields_mut() {
                f(join(prefix, &format!("blocks.{l}.{name}")), t);
            }
        }
    }
}

/// Patch features at the selected layers plus final-layer special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput<S> {
    /// `layer → [T, h, w, d]`.
    pub z: BTreeMap<usize, Tensor<S>>,
    /// `[T, d]`.
    pub z_cls: Tensor<S>,
    /// `[T, d]`, absent without a CAM token.
    pub z_cam: Option<Tensor<S>>,
}

impl<S: Scalar> BackboneOutput<S> {
    pub fn frames(&self) -> usize {
        self.z_cls.rows()
    }

    /// Concatenates per-frame outputs along time.
    pub fn concat(parts: &[BackboneOutput<S>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("no outputs to concatenate".into()))?;
        let cat = |ts: Vec<&Tensor<S>>| -> Result<Tensor<S>> {
            let mut dims = ts[0].dims().to_vec();
            dims[0] = ts.iter().map(|t| t.dims()[0]).sum();
            Tensor::new(dims, ts.iter().flat_map(|t| t.data().iter().copied()).collect())
        };
        let mut z = BTreeMap::new();
        for &l in first.z.keys() {
            z.insert(l, cat(parts.iter().map(|p| &p.z[&l]).collect())?);
        }
        let z_cam = match &first.z_cam {
            Some(_) => Some(cat(parts.iter().map(|p| p.z_cam.as_ref().expect("cam")).collect())?),
            None => None,
        };
        Ok(Self {
            z,
            z_cls: cat(parts.iter().map(|p| &p.z_cls).collect())?,
            z_cam,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m = self.z_cls.max_abs_diff(&other.z_cls);
        for (l, t) in &self.z {
            m = m.max(t.max_abs_diff(&other.z[l]));
        }
        if let (Some(a), Some(b)) = (&self.z_cam, &other.z_cam) {
            m = m.max(a.max_abs_diff(b));
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.z_cls.is_finite()
            && self.z.values().all(Tensor::is_finite)
            && self.z_cam.as_ref().map_or(true, Tensor::is_finite)
    }
}

/// Tokenizes a clip. `patch_mask` (length `T·h·w`) swaps the embedding of
/// each flagged patch for the learned mask token.
pub fn embed<S: Scalar>(
    stream: &FrameStream,
    params: &BackboneParams<S>,
    config: &BackboneConfig,
    patch_mask: Option<&[bool]>,
) -> Result<TokenSequence<S>> {
    let layout = config.layout(stream.len(), stream.height(), stream.width())?;
    let d = config.d_model();
    let (pf, hw, ns) = (layout.per_frame(), layout.patches(), layout.special);
    if let Some(m) = patch_mask {
        if m.len() != layout.frames * hw {
            return Err(Error::Shape(format!("patch mask of {} for {} patches", m.len(), layout.frames * hw)));
        }
    }
    let mut emb = Tensor::zeros([layout.frames, pf, d]);
    for (t, frame) in stream.frames().iter().enumerate() {
        let patches = extract_patches::<S>(frame, config.patch)?;
        let proj = linear(&patches, &params.patch_w, Some(&params.patch_b))?;
        let base = t * pf * d;
        let out = emb.data_mut();
        out[base..base + ns * d].copy_from_slice(params.special.data());
        out[base + ns * d..base + pf * d].copy_from_slice(proj.data());
        if let Some(m) = patch_mask {
            for i in 0..hw {
                if m[t * hw + i] {
                    let r = base + (ns + i) * d;
                    out[r..r + d].copy_from_slice(params.mask_token.data());
                }
            }
        }
    }
    Ok(TokenSequence {
        embeddings: emb,
        layout,
        slots: layout.slot_kinds(),
    })
}

fn split_qkv<S: Scalar>(qkv: &Tensor<S>, d: usize) -> [Tensor<S>; 3] {
    [0, 1, 2].map(|i| qkv.columns(i * d, d))
}

fn merge_qkv<S: Scalar>(dq: &Tensor<S>, dk: &Tensor<S>, dv: &Tensor<S>) -> Tensor<S> {
    let (n, d) = (dq.rows(), dq.cols());
    let mut out = Tensor::zeros([n, 3 * d]);
    for r in 0..n {
        let row = out.row_mut(r);
        row[..d].copy_from_slice(dq.row(r));
        row[d..2 * d].copy_from_slice(dk.row(r));
        row[2 * d..].copy_from_slice(dv.row(r));
    }
    out
}

/// One block over `x`, with the attention supplied by the caller (full clip
/// or cached step).
fn block_forward<S: Scalar>(
    x: &mut Tensor<S>,
    b: &BlockParams<S>,
    d: usize,
    attend: impl FnOnce(&Tensor<S>, &Tensor<S>, &Tensor<S>) -> Result<Tensor<S>>,
) -> Result<()> {
    let (h, _) = layer_norm(x, &b.ln1_g, &b.ln1_b, LN_EPS)?;
    let qkv = linear(&h, &b.w_qkv, Some(&b.b_qkv))?;
    let [q, k, v] = split_qkv(&qkv, d);
    let a = attend(&q, &k, &v)?;
    x.axpy(S::one(), &linear(&a, &b.w_o, Some(&b.b_o))?)?;
    let (h2, _) = layer_norm(x, &b.ln2_g, &b.ln2_b, LN_EPS)?;
    let f = gelu(&linear(&h2, &b.w_fc1, Some(&b.b_fc1))?);
    x.axpy(S::one(), &linear(&f, &b.w_fc2, Some(&b.b_fc2))?)?;
    Ok(())
}

/// Patch rows of a `[T·pf, d]` stream reshaped to `[T, h, w, d]`.
pub fn patch_features<S: Scalar>(x: &Tensor<S>, layout: &TokenLayout) -> Tensor<S> {
    let (pf, ns, d) = (layout.per_frame(), layout.special, x.cols());
    let frames = x.rows() / pf;
    let mut out = Vec::with_capacity(frames * layout.patches() * d);
    for t in 0..frames {
        out.extend_from_slice(&x.data()[(t * pf + ns) * d..(t + 1) * pf * d]);
    }
    Tensor::new([frames, layout.grid_h, layout.grid_w, d], out).expect("patch block")
}

fn slot_rows<S: Scalar>(x: &Tensor<S>, layout: &TokenLayout, slot: usize) -> Tensor<S> {
    let (pf, d) = (layout.per_frame(), x.cols());
    let frames = x.rows() / pf;
    Tensor::from_fn([frames, d], |i| x.data()[((i / d) * pf + slot) * d + i % d])
}

fn capture_special<S: Scalar>(x: &Tensor<S>, layout: &TokenLayout) -> (Tensor<S>, Option<Tensor<S>>) {
    (
        slot_rows(x, layout, layout.cls_slot()),
        layout.cam_slot().map(|s| slot_rows(x, layout, s)),
    )
}

fn check_tokens<S: Scalar>(tokens: &TokenSequence<S>, config: &BackboneConfig) -> Result<()> {
    if tokens.width() != config.d_model() {
        return Err(Error::Shape(format!(
            "token width {} vs d_model {}",
            tokens.width(),
            config.d_model()
        )));
    }
    if tokens.layout.cam_enabled != config.cam_enabled {
        return Err(Error::Config("token layout and backbone disagree on the CAM token".into()));
    }
    Ok(())
}

pub fn rope_positions(layout: &TokenLayout) -> Vec<RopePosition> {
    layout.positions().into_iter().map(RopePosition::from).collect()
}

pub fn forward_full<S: Scalar>(
    tokens: &TokenSequence<S>,
    params: &BackboneParams<S>,
    config: &BackboneConfig,
) -> Result<BackboneOutput<S>> {
    forward_full_with(tokens, params, config, Visibility::Causal)
}

/// [`forward_full`] with a selectable attention visibility. Only the
/// causality negative control uses `Bidirectional`.
pub fn forward_full_with<S: Scalar>(
    tokens: &TokenSequence<S>,
    params: &BackboneParams<S>,
    config: &BackboneConfig,
    visibility: Visibility,
) -> Result<BackboneOutput<S>> {
    config.validate()?;
    params.validate(config)?;
    check_tokens(tokens, config)?;
    let layout = tokens.layout;
    let d = config.d_model();
    let table = RopeTable::new(&config.attention.plan()?, &rope_positions(&layout));
    let mut x = tokens.embeddings.clone().reshape([layout.total(), d])?;
    let mut z = BTreeMap::new();
    if config.selected_layers.contains(&0) {
        z.insert(0, patch_features(&x, &layout));
    }
    for (l, b) in params.blocks.iter().enumerate() {
        block_forward(&mut x, b, d, |q, k, v| {
            full_attention_with_table(q, k, v, &config.attention, &layout, &table, visibility)
        })?;
        if config.selected_layers.contains(&(l + 1)) {
            z.insert(l + 1, patch_features(&x, &layout));
        }
    }
    let (z_cls, z_cam) = capture_special(&x, &layout);
    Ok(BackboneOutput { z, z_cls, z_cam })
}

/// Peak transient bytes of one [`forward_full`] pass over `layout`: the
/// residual stream, q/k/v, the attention output, the MLP hidden layer, the
/// per-head rotated copies and the largest score block (one frame of queries
/// against the whole causal prefix).
pub fn recompute_activation_bytes(config: &BackboneConfig, layout: &TokenLayout, scalar_bytes: usize) -> usize {
    let (n, d) = (layout.total(), config.d_model());
    let dh = config.attention.d_head();
    let activations = n * d * (5 + config.mlp_ratio);
    let head_copies = 3 * n * dh;
    let scores = layout.per_frame() * n;
    (activations + head_copies + scores) * scalar_bytes
}

/// Fresh per-layer caches for a stream of up to `capacity_frames` frames.
pub fn new_caches<S: Scalar>(config: &BackboneConfig, layout: &TokenLayout, capacity_frames: usize) -> Vec<KVCache<S>> {
    (0..config.n_layers)
        .map(|l| KVCache::new(l, &config.attention, layout, capacity_frames))
        .collect()
}

/// Pushes one frame's tokens (`[per_frame, d]`) through every layer, reading
/// and extending `caches`. On error no cache is modified.
pub fn forward_streaming_step<S: Scalar>(
    frame_tokens: &Tensor<S>,
    caches: &mut [KVCache<S>],
    params: &BackboneParams<S>,
    config: &BackboneConfig,
    layout: &TokenLayout,
) -> Result<BackboneOutput<S>> {
    config.validate()?;
    let (pf, d) = (layout.per_frame(), config.d_model());
    if frame_tokens.rows() != pf || frame_tokens.cols() != d {
        return Err(Error::Shape(format!(
            "frame tokens {:?}, expected [{pf}, {d}]",
            frame_tokens.dims()
        )));
    }
    if caches.len() != config.n_layers {
        return Err(Error::CacheMismatch(format!(
            "{} caches for {} layers",
            caches.len(),
            config.n_layers
        )));
    }
    let t = caches.first().map_or(0, |c| c.frames());
    if let Some(c) = caches.iter().find(|c| c.frames() != t) {
        return Err(Error::CacheMismatch(format!(
            "desynchronized caches: layer {} holds {} frames, layer 0 holds {t}",
            c.layer(),
            c.frames()
        )));
    }
    for c in caches.iter() {
        c.check_room()?;
    }
    let positions: Vec<RopePosition> = layout.frame_positions(t).into_iter().map(RopePosition::from).collect();
    let table = RopeTable::new(&config.attention.plan()?, &positions);
    let mut x = Tensor::new([pf, d], frame_tokens.data().to_vec())?;
    let frame_layout = layout.with_frames(1);
    let mut z = BTreeMap::new();
    if config.selected_layers.contains(&0) {
        z.insert(0, patch_features(&x, &frame_layout));
    }
    for (l, b) in params.blocks.iter().enumerate() {
        let step = block_forward(&mut x, b, d, |q, k, v| {
            cached_attention_step_with_table(q, k, v, &mut caches[l], &config.attention, layout, &table)
        });
        if let Err(e) = step {
            // undo the layers that already appended this frame
            for c in caches.iter_mut() {
                c.truncate_frames(t);
            }
            return Err(e);
        }
        if config.selected_layers.contains(&(l + 1)) {
            z.insert(l + 1, patch_features(&x, &frame_layout));
        }
    }
    let (z_cls, z_cam) = capture_special(&x, &frame_layout);
    Ok(BackboneOutput { z, z_cls, z_cam })
}

/// Activations saved by [`forward_train`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockTape<S> {
    ln1: LayerNormCache<S>,
    h1: Tensor<S>,
    q: Tensor<S>,
    k: Tensor<S>,
    v: Tensor<S>,
    attn: Tensor<S>,
    ln2: LayerNormCache<S>,
    h2: Tensor<S>,
    f_pre: Tensor<S>,
    f_act: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct BackboneTape<S> {
    pub layout: TokenLayout,
    table: RopeTable<S>,
    patches: Vec<Tensor<S>>,
    patch_mask: Option<Vec<bool>>,
    blocks: Vec<BlockTape<S>>,
}

/// Training-time forward output: the residual stream after every layer,
/// `[T·pf, d]` each, plus the tape.
pub struct TrainForward<S> {
    pub streams: Vec<Tensor<S>>,
    pub tape: BackboneTape<S>,
}

impl<S: Scalar> TrainForward<S> {
    pub fn last(&self) -> &Tensor<S> {
        self.streams.last().expect("stream after embedding")
    }

    pub fn output(&self, config: &BackboneConfig) -> BackboneOutput<S> {
        let layout = &self.tape.layout;
        let z = config
            .selected_layers
            .iter()
            .map(|&l| (l, patch_features(&self.streams[l], layout)))
            .collect();
        let (z_cls, z_cam) = capture_special(self.last(), layout);
        BackboneOutput { z, z_cls, z_cam }
    }
}

/// Forward pass that records what [`backward`] needs. `spatial_scale`
/// multiplies the `(y, x)` rotary coordinates (position jitter).
pub fn forward_train<S: Scalar>(
    stream: &FrameStream,
    params: &BackboneParams<S>,
    config: &BackboneConfig,
    patch_mask: Option<&[bool]>,
    spatial_scale: f64,
) -> Result<TrainForward<S>> {
    config.validate()?;
    params.validate(config)?;
    let tokens = embed(stream, params, config, patch_mask)?;
    let layout = tokens.layout;
    let d = config.d_model();
    let positions = scale_positions(&rope_positions(&layout), spatial_scale);
    let table = RopeTable::new(&config.attention.plan()?, &positions);
    let patches = stream
        .frames()
        .iter()
        .map(|f| extract_patches::<S>(f, config.patch))
        .collect::<Result<Vec<_>>>()?;
    let mut x = tokens.embeddings.reshape([layout.total(), d])?;
    let mut streams = vec![x.clone()];
    let mut tapes = Vec::with_capacity(config.n_layers);
    for b in &params.blocks {
        let (h1, ln1) = layer_norm(&x, &b.ln1_g, &b.ln1_b, LN_EPS)?;
        let qkv = linear(&h1, &b.w_qkv, Some(&b.b_qkv))?;
        let [q, k, v] = split_qkv(&qkv, d);
        let attn = full_attention_with_table(&q, &k, &v, &config.attention, &layout, &table, Visibility::Causal)?;
        x.axpy(S::one(), &linear(&attn, &b.w_o, Some(&b.b_o))?)?;
        let (h2, ln2) = layer_norm(&x, &b.ln2_g, &b.ln2_b, LN_EPS)?;
        let f_pre = linear(&h2, &b.w_fc1, Some(&b.b_fc1))?;
        let f_act = gelu(&f_pre);
        x.axpy(S::one(), &linear(&f_act, &b.w_fc2, Some(&b.b_fc2))?)?;
        streams.push(x.clone());
        tapes.push(BlockTape {
            ln1,
            h1,
            q,
            k,
            v,
            attn,
            ln2,
            h2,
            f_pre,
            f_act,
        });
    }
    Ok(TrainForward {
        streams,
        tape: BackboneTape {
            layout,
            table,
            patches,
            patch_mask: patch_mask.map(<[bool]>::to_vec),
            blocks: tapes,
        },
    })
}

/// Gradient of some objective with respect to the residual streams. Entries
/// are keyed by layer index and shaped `[T·pf, d]`.
#[derive(Clone, Debug, Default)]
pub struct StreamGrads<S> {
    pub by_layer: BTreeMap<usize, Tensor<S>>,
}

impl<S: Scalar> StreamGrads<S> {
    fn slot(&mut self, layer: usize, layout: &TokenLayout, d: usize) -> &mut Tensor<S> {
        self.by_layer
            .entry(layer)
            .or_insert_with(|| Tensor::zeros([layout.total(), d]))
    }

    /// Adds `dz` (`[T, h, w, d]`) onto the patch rows of `layer`.
    pub fn add_patches(&mut self, layer: usize, layout: &TokenLayout, dz: &Tensor<S>) {
        let d = dz.cols();
        let (pf, ns, hw) = (layout.per_frame(), layout.special, layout.patches());
        let g = self.slot(layer, layout, d);
        for t in 0..layout.frames {
            for i in 0..hw {
                let dst = ((t * pf + ns + i) * d)..((t * pf + ns + i + 1) * d);
                let src = &dz.data()[(t * hw + i) * d..(t * hw + i + 1) * d];
                for (a, &b) in g.data_mut()[dst].iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
    }

    /// Adds `dx` (`[T, d]`) onto slot `slot` of every frame at `layer`.
    pub fn add_slot(&mut self, layer: usize, layout: &TokenLayout, slot: usize, dx: &Tensor<S>) {
        let d = dx.cols();
        let pf = layout.per_frame();
        let g = self.slot(layer, layout, d);
        for t in 0..layout.frames {
            let dst = (t * pf + slot) * d;
            for (a, &b) in g.data_mut()[dst..dst + d].iter_mut().zip(dx.row(t)) {
                *a += b;
            }
        }
    }
}

/// Backward pass of [`forward_train`], accumulating into `grads`.
pub fn backward<S: Scalar>(
    tape: &BackboneTape<S>,
    params: &BackboneParams<S>,
    config: &BackboneConfig,
    upstream: &StreamGrads<S>,
    grads: &mut BackboneParams<S>,
) -> Result<()> {
    let layout = &tape.layout;
    let (n, d) = (layout.total(), config.d_model());
    let n_layers = config.n_layers;
    let mut dx = upstream
        .by_layer
        .get(&n_layers)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros([n, d]));
    for l in (0..n_layers).rev() {
        let (b, bt, g) = (&params.blocks[l], &tape.blocks[l], &mut grads.blocks[l]);
        // MLP branch
        let fc2 = linear_backward(&bt.f_act, &b.w_fc2, &dx)?;
        g.w_fc2.axpy(S::one(), &fc2.dw)?;
        g.b_fc2.axpy(S::one(), &fc2.db)?;
        let d_pre = gelu_backward(&bt.f_pre, &fc2.dx);
        let fc1 = linear_backward(&bt.h2, &b.w_fc1, &d_pre)?;
        g.w_fc1.axpy(S::one(), &fc1.dw)?;
        g.b_fc1.axpy(S::one(), &fc1.db)?;
        let (dln2, dg2, db2) = layer_norm_backward(&fc1.dx, &b.ln2_g, &bt.ln2);
        g.ln2_g.axpy(S::one(), &dg2)?;
        g.ln2_b.axpy(S::one(), &db2)?;
        dx.axpy(S::one(), &dln2)?;
        // attention branch
        let o = linear_backward(&bt.attn, &b.w_o, &dx)?;
        g.w_o.axpy(S::one(), &o.dw)?;
        g.b_o.axpy(S::one(), &o.db)?;
        let ag = full_attention_backward(
            &bt.q,
            &bt.k,
            &bt.v,
            &o.dx,
            &config.attention,
            layout,
            &tape.table,
            Visibility::Causal,
        )?;
        let dqkv = merge_qkv(&ag.dq, &ag.dk, &ag.dv);
        let qkv = linear_backward(&bt.h1, &b.w_qkv, &dqkv)?;
        g.w_qkv.axpy(S::one(), &qkv.dw)?;
        g.b_qkv.axpy(S::one(), &qkv.db)?;
        let (dln1, dg1, db1) = layer_norm_backward(&qkv.dx, &b.ln1_g, &bt.ln1);
        g.ln1_g.axpy(S::one(), &dg1)?;
        g.ln1_b.axpy(S::one(), &db1)?;
        dx.axpy(S::one(), &dln1)?;
        if let Some(extra) = upstream.by_layer.get(&l) {
            dx.axpy(S::one(), extra)?;
        }
    }
    // embedding
    let (pf, ns, hw) = (layout.per_frame(), layout.special, layout.patches());
    for t in 0..layout.frames {
        let base = t * pf * d;
        for s in 0..ns {
            for (a, &v) in grads.special.row_mut(s).iter_mut().zip(&dx.data()[base + s * d..base + (s + 1) * d]) {
                *a += v;
            }
        }
        let mut dy = Tensor::zeros([hw, d]);
        for i in 0..hw {
            let row = &dx.data()[base + (ns + i) * d..base + (ns + i + 1) * d];
            let masked = tape.patch_mask.as_ref().is_some_and(|m| m[t * hw + i]);
            if masked {
                for (a, &v) in grads.mask_token.data_mut().iter_mut().zip(row) {
                    *a += v;
                }
            } else {
                dy.row_mut(i).copy_from_slice(row);
            }
        }
        let pg = linear_backward(&tape.patches[t], &params.patch_w, &dy)?;
        grads.patch_w.axpy(S::one(), &pg.dw)?;
        grads.patch_b.axpy(S::one(), &pg.db)?;
    }
    Ok(())
}
