//! Toy multi-task training: self-distillation, geometry and captioning
//! interleaved in every step, one gradient-descent update per step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backward, forward_train, patch_features, BackboneConfig, BackboneParams, StreamGrads, TrainForward};
use crate::error::{Error, Result};
use crate::heads::{
    camera_head, camera_head_backward, compose_points, compose_points_backward, depth_ray_head, depth_ray_head_backward,
    normalize_targets,
};
use crate::losses::{
    caption_loss, depth_loss, dino_loss, gram_loss, ibot_loss, koleo_loss, l2_normalize_rows,
    l2_normalize_rows_backward, ray_point_camera_loss, temporal_mean_pool, total_loss, LinearCaptionDecoder, LossParts,
    LossTerm, LossWeights, PrototypeHead,
};
use crate::numerics::{with_intra_op_threads, Tensor};
use crate::params::{add_scaled, ema_update, join, sgd_step, ParamTree};
use crate::rope3d::jitter_factors;
use crate::tokenizer::{FrameStream, TokenLayout};

use super::config::{EngineConfig, ModelParams};
use super::synth::{caption_sample, photometric_view, synth_scene, CAPTION_INSTRUCTION, CAPTION_VOCAB};

/// Everything the student optimizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub model: ModelParams<f64>,
    pub dino: PrototypeHead<f64>,
    pub ibot: PrototypeHead<f64>,
    pub caption: LinearCaptionDecoder<f64>,
}

impl ToyModel {
    pub fn init(config: &EngineConfig, seed: u64) -> Result<Self> {
        let model = ModelParams::init(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
        let k = config.train.prototypes;
        let d = config.d_model;
        let visual = (config.height / config.patch) * (config.width / config.patch) * d;
        Ok(Self {
            model,
            dino: PrototypeHead {
                w: crate::backbone::trunc_normal([d, k], &mut rng),
            },
            ibot: PrototypeHead {
                w: crate::backbone::trunc_normal([d, k], &mut rng),
            },
            caption: LinearCaptionDecoder::new(visual, CAPTION_VOCAB, &mut rng),
        })
    }

    fn teacher_view(&self) -> Teacher {
        Teacher {
            backbone: self.model.backbone.clone(),
            dino: self.dino.clone(),
            ibot: self.ibot.clone(),
        }
    }
}

impl ParamTree<f64> for ToyModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<f64>)) {
        self.model.visit(prefix, f);
        self.dino.visit(&join(prefix, "dino_head"), f);
        self.ibot.visit(&join(prefix, "ibot_head"), f);
        self.caption.visit(&join(prefix, "caption"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<f64>)) {
        self.model.visit_mut(prefix, f);
        self.dino.visit_mut(&join(prefix, "dino_head"), f);
        self.ibot.visit_mut(&join(prefix, "ibot_head"), f);
        self.caption.visit_mut(&join(prefix, "caption"), f);
    }
}

/// EMA copy of the student's backbone and prototype heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub backbone: BackboneParams<f64>,
    pub dino: PrototypeHead<f64>,
    pub ibot: PrototypeHead<f64>,
}

impl ParamTree<f64> for Teacher {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<f64>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.dino.visit(&join(prefix, "dino_head"), f);
        self.ibot.visit(&join(prefix, "ibot_head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<f64>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.dino.visit_mut(&join(prefix, "dino_head"), f);
        self.ibot.visit_mut(&join(prefix, "ibot_head"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based step number.
    pub step: usize,
    pub total: f64,
    pub parts: LossParts,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub history: Vec<StepRecord>,
    pub student: ToyModel,
    pub teacher: Teacher,
}

/// Runs `steps` interleaved steps single-threaded. Fully determined by
/// `(steps, seed, config)`.
pub fn toy_train(steps: usize, seed: u64, config: &EngineConfig) -> Result<TrainRun> {
    toy_train_with(steps, seed, config, |_| {})
}

/// [`toy_train`] with a callback after every step.
pub fn toy_train_with(
    steps: usize,
    seed: u64,
    config: &EngineConfig,
    mut on_step: impl FnMut(&StepRecord) + Send,
) -> Result<TrainRun> {
    if steps == 0 {
        return Err(Error::Config("toy training needs at least one step".into()));
    }
    config.validate()?;
    with_intra_op_threads(1, || {
        let mut trainer = Trainer::new(config, seed)?;
        let mut history = Vec::with_capacity(steps);
        for step in 1..=steps {
            let record = trainer.step(step)?;
            on_step(&record);
            history.push(record);
        }
        Ok(TrainRun {
            history,
            student: trainer.student,
            teacher: trainer.teacher,
        })
    })
}

struct Trainer<'a> {
    config: &'a EngineConfig,
    backbone: BackboneConfig,
    weights: LossWeights,
    seed: u64,
    student: ToyModel,
    teacher: Teacher,
    gram_teacher: BackboneParams<f64>,
}

/// Last-layer CLS rows `[T, d]` and patch features `[T, h, w, d]`.
fn final_tokens(run: &TrainForward<f64>, config: &BackboneConfig) -> (Tensor<f64>, Tensor<f64>) {
    let out = run.output(config);
    (out.z_cls, patch_features(run.last(), &run.tape.layout))
}

fn stack(parts: &[Tensor<f64>], dims: Vec<usize>) -> Result<Tensor<f64>> {
    Tensor::new(dims, parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Rows `[b·rows, (b+1)·rows)` of a flat tensor, reshaped.
fn chunk(t: &Tensor<f64>, b: usize, dims: Vec<usize>) -> Result<Tensor<f64>> {
    let n: usize = dims.iter().product();
    Tensor::new(dims, t.data()[b * n..(b + 1) * n].to_vec())
}

/// Rescales `grads` so its global L2 norm is at most `max_norm` (0 = off).
fn clip_global_norm<P: ParamTree<f64>>(grads: &mut P, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.visit_mut("", &mut |_, t| t.scale(s));
    }
}

fn scaled(mut t: Tensor<f64>, c: f64) -> Tensor<f64> {
    t.scale(c);
    t
}

impl<'a> Trainer<'a> {
    fn new(config: &'a EngineConfig, seed: u64) -> Result<Self> {
        let student = ToyModel::init(config, seed)?;
        Ok(Self {
            config,
            backbone: config.backbone(),
            weights: config.loss_weights,
            seed,
            teacher: student.teacher_view(),
            gram_teacher: student.model.backbone.clone(),
            student,
        })
    }

    fn scene_seed(&self, task: u64, index: usize) -> u64 {
        let slot = (index % self.config.train.scene_pool) as u64;
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(task << 32).wrapping_add(slot)
    }

    fn step(&mut self, step: usize) -> Result<StepRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(1_000_003).wrapping_add(step as u64));
        let mut grads = self.student.zeros_like();
        let mut parts = LossParts::default();
        let total = (|| {
            self.ssl_batch(step, &mut rng, &mut grads, &mut parts)?;
            self.geo_batch(step, &mut grads, &mut parts)?;
            self.caption_batch(&mut rng, &mut grads, &mut parts)?;
            let (total, _) = total_loss(&parts, &self.weights)?;
            if let Some((name, _)) = grads.named().into_iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            Ok(total)
        })()
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
            other => other,
        })?;
        clip_global_norm(&mut grads, self.config.train.grad_clip);
        sgd_step(&mut self.student, &grads, self.config.train.learning_rate)?;
        ema_update(&mut self.teacher, &self.student.teacher_view(), self.config.train.ema_momentum)?;
        Ok(StepRecord { step, total, parts })
    }

    fn coeff(&self, term: LossTerm) -> f64 {
        self.weights.coefficient(term)
    }

    fn ssl_batch(&self, step: usize, rng: &mut ChaCha8Rng, grads: &mut ToyModel, parts: &mut LossParts) -> Result<()> {
        let cfg = self.config;
        let (clips, frames) = (cfg.train.clips, cfg.train.frames);
        let (d, bb) = (cfg.d_model, &self.backbone);
        let mut student_a = Vec::with_capacity(clips);
        let mut student_b = Vec::with_capacity(clips);
        let (mut cls_sa, mut cls_sb, mut cls_ta, mut cls_tb) = (vec![], vec![], vec![], vec![]);
        let (mut patch_sa, mut patch_ta, mut patch_sb, mut patch_gb) = (vec![], vec![], vec![], vec![]);
        let mut mask_indices = Vec::new();
        let mut layout = None;
        for b in 0..clips {
            let scene = synth_scene(self.scene_seed(1, step * clips + b), frames, cfg.height, cfg.width)?;
            let view_a = photometric_view(&scene.frames, rng)?;
            let view_b = photometric_view(&scene.frames, rng)?;
            let hw = (cfg.height / cfg.patch) * (cfg.width / cfg.patch);
            let mut mask: Vec<bool> = (0..frames * hw).map(|_| rng.gen_bool(cfg.train.mask_ratio)).collect();
            if !mask.iter().any(|&m| m) {
                let i = rng.gen_range(0..mask.len());
                mask[i] = true;
            }
            mask_indices.extend(mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| b * frames * hw + i));
            let jitter = jitter_factors(2, cfg.train.rope_jitter, rng.gen());
            let sa = forward_train(&view_a, &self.student.model.backbone, bb, Some(&mask), jitter[0])?;
            let sb = forward_train(&view_b, &self.student.model.backbone, bb, None, jitter[1])?;
            let ta = forward_train(&view_a, &self.teacher.backbone, bb, None, 1.0)?;
            let tb = forward_train(&view_b, &self.teacher.backbone, bb, None, 1.0)?;
            let gb = forward_train(&view_b, &self.gram_teacher, bb, None, 1.0)?;
            for (run, cls, patches) in [
                (&sa, &mut cls_sa, Some(&mut patch_sa)),
                (&sb, &mut cls_sb, Some(&mut patch_sb)),
                (&ta, &mut cls_ta, Some(&mut patch_ta)),
                (&tb, &mut cls_tb, None),
            ] {
                let (c, p) = final_tokens(run, bb);
                cls.push(c);
                if let Some(dst) = patches {
                    dst.push(p);
                }
            }
            patch_gb.push(final_tokens(&gb, bb).1);
            layout = Some(sa.tape.layout);
            student_a.push(sa);
            student_b.push(sb);
        }
        let layout = layout.expect("at least two clips");
        let hw = layout.patches();
        let cls_dims = vec![clips, frames, d];
        let (sa, sb) = (stack(&cls_sa, cls_dims.clone())?, stack(&cls_sb, cls_dims.clone())?);
        let (ta, tb) = (stack(&cls_ta, cls_dims.clone())?, stack(&cls_tb, cls_dims)?);
        let s = &self.student;
        let t = &self.teacher;
        let ssl = &cfg.ssl;

        // DINO, symmetrized over the two views.
        let d1 = dino_loss(&sa, &tb, &s.dino, &t.dino, ssl)?;
        let d2 = dino_loss(&sb, &ta, &s.dino, &t.dino, ssl)?;
        parts.dino = 0.5 * (d1.loss + d2.loss);
        let c_dino = self.coeff(LossTerm::Dino);
        add_scaled(&mut grads.dino, 0.5 * c_dino, &d1.d_head)?;
        add_scaled(&mut grads.dino, 0.5 * c_dino, &d2.d_head)?;

        // iBOT on the masked patches of view A.
        let rows = clips * frames * hw;
        let ps = stack(&patch_sa, vec![rows, d])?;
        let pt = stack(&patch_ta, vec![rows, d])?;
        let ib = ibot_loss(&ps, &pt, &mask_indices, &s.ibot, &t.ibot, ssl)?;
        parts.ibot = ib.loss;
        let c_ibot = self.coeff(LossTerm::Ibot);
        add_scaled(&mut grads.ibot, c_ibot, &ib.d_head)?;

        // KoLeo on L2-normalized, time-pooled student CLS of view A.
        let pooled = temporal_mean_pool(&sa)?;
        let (unit, norms) = l2_normalize_rows(&pooled)?;
        let (koleo, d_unit) = koleo_loss(&unit)?;
        parts.koleo = koleo;
        let d_pooled = l2_normalize_rows_backward(&unit, &norms, &d_unit);

        // Gram anchoring of view B patches against the frozen snapshot.
        let mut gram = 0.0;
        let mut d_gram = Vec::with_capacity(clips);
        for (student_p, anchor_p) in patch_sb.iter().zip(&patch_gb) {
            let mut g = Tensor::zeros(student_p.dims().to_vec());
            for f in 0..frames {
                let xs = chunk(student_p, f, vec![hw, d])?;
                let xg = chunk(anchor_p, f, vec![hw, d])?;
                let (v, dg) = gram_loss(&xs, &xg)?;
                gram += v;
                g.data_mut()[f * hw * d..(f + 1) * hw * d].copy_from_slice(dg.data());
            }
            d_gram.push(g);
        }
        let per = (clips * frames) as f64;
        parts.gram = gram / per;

        let c_koleo = self.coeff(LossTerm::Koleo);
        let c_gram = self.coeff(LossTerm::Gram) / per;
        let last = bb.n_layers;
        let cls = layout.cls_slot();
        for b in 0..clips {
            let mut up_a = StreamGrads::default();
            let mut d_cls = scaled(chunk(&d1.d_features, b, vec![frames, d])?, 0.5 * c_dino);
            let koleo_row = Tensor::from_fn([frames, d], |i| d_pooled.row(b)[i % d] * c_koleo / frames as f64);
            d_cls.axpy(1.0, &koleo_row)?;
            up_a.add_slot(last, &layout, cls, &d_cls);
            let d_patch = scaled(chunk(&ib.d_features, b, vec![frames, layout.grid_h, layout.grid_w, d])?, c_ibot);
            up_a.add_patches(last, &layout, &d_patch);
            backward(&student_a[b].tape, &s.model.backbone, bb, &up_a, &mut grads.model.backbone)?;

            let mut up_b = StreamGrads::default();
            up_b.add_slot(last, &layout, cls, &scaled(chunk(&d2.d_features, b, vec![frames, d])?, 0.5 * c_dino));
            up_b.add_patches(last, &layout, &scaled(d_gram[b].clone(), c_gram));
            backward(&student_b[b].tape, &s.model.backbone, bb, &up_b, &mut grads.model.backbone)?;
        }
        Ok(())
    }

    fn geo_batch(&self, step: usize, grads: &mut ToyModel, parts: &mut LossParts) -> Result<()> {
        let cfg = self.config;
        let bb = &self.backbone;
        let mut scene = synth_scene(self.scene_seed(2, step), cfg.train.frames, cfg.height, cfg.width)?;
        normalize_targets(&mut scene.targets)?;
        let gt = &scene.targets;
        let heads = &self.student.model.heads;
        let run = forward_train(&scene.frames, &self.student.model.backbone, bb, None, 1.0)?;
        let layout: TokenLayout = run.tape.layout;
        let out = run.output(bb);
        let (depth, ray, conf, cache) = depth_ray_head(&out.z, &bb.selected_layers, &heads.depth_ray, &layout)?;
        let points = compose_points(&depth, &ray)?;
        let dl = depth_loss(&depth, &gt.depth, &conf, self.weights.alpha, &gt.valid)?;
        let camera = match &out.z_cam {
            Some(z) => Some(camera_head(Some(z), &heads.camera)?),
            None => None,
        };
        let pose = camera.as_ref().map_or_else(|| gt.pose.clone(), |(p, _)| p.clone());
        let rpc = ray_point_camera_loss(&ray, &gt.ray, &points, &gt.points, &pose, &gt.pose, &gt.valid)?;
        parts.depth = dl.loss;
        parts.ray = rpc.ray;
        parts.points = rpc.points;
        parts.camera = rpc.camera;

        let (c_depth, c_ray) = (self.coeff(LossTerm::Depth), self.coeff(LossTerm::Ray));
        let (c_points, c_cam) = (self.coeff(LossTerm::Points), self.coeff(LossTerm::Camera));
        let (dd_points, dr_points) = compose_points_backward(&depth, &ray, &rpc.d_points)?;
        let mut d_depth = scaled(dl.d_depth, c_depth);
        d_depth.axpy(c_points, &dd_points)?;
        let mut d_ray = scaled(rpc.d_ray, c_ray);
        d_ray.axpy(c_points, &dr_points)?;
        let d_conf = scaled(dl.d_conf, c_depth);
        let dz = depth_ray_head_backward(&cache, &heads.depth_ray, &d_depth, &d_ray, &d_conf, &mut grads.model.heads.depth_ray)?;
        let mut up = StreamGrads::default();
        for (layer, g) in &dz {
            up.add_patches(*layer, &layout, g);
        }
        if let (Some((_, cam_cache)), Some(slot)) = (&camera, layout.cam_slot()) {
            let d_pose = scaled(rpc.d_pose, c_cam);
            let dz_cam = camera_head_backward(cam_cache, &heads.camera, &d_pose, &mut grads.model.heads.camera)?;
            up.add_slot(bb.n_layers, &layout, slot, &dz_cam);
        }
        backward(&run.tape, &self.student.model.backbone, bb, &up, &mut grads.model.backbone)
    }

    fn caption_batch(&self, rng: &mut ChaCha8Rng, grads: &mut ToyModel, parts: &mut LossParts) -> Result<()> {
        let cfg = self.config;
        let bb = &self.backbone;
        let n = cfg.train.caption_batch;
        let c_cap = self.coeff(LossTerm::Caption) / n as f64;
        parts.caption = 0.0;
        for _ in 0..n {
            let sample = caption_sample(rng, cfg.height, cfg.width)?;
            let stream = FrameStream::new(vec![sample.frame])?;
            let run = forward_train(&stream, &self.student.model.backbone, bb, None, 1.0)?;
            let layout = run.tape.layout;
            let visual = patch_features(run.last(), &layout);
            let cap = caption_loss(&visual, &CAPTION_INSTRUCTION, &sample.tokens, &self.student.caption)?;
            parts.caption += cap.loss / n as f64;
            add_scaled(&mut grads.caption, c_cap, &cap.decoder_grads)?;
            let mut up = StreamGrads::default();
            up.add_patches(bb.n_layers, &layout, &scaled(cap.d_visual, c_cap));
            backward(&run.tape, &self.student.model.backbone, bb, &up, &mut grads.model.backbone)?;
        }
        Ok(())
    }
}
