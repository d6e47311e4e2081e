use std::sync::Arc;

use crate::attention::KVCache;
use crate::backbone::{embed, forward_full, forward_streaming_step, new_caches, BackboneConfig, BackboneOutput};
use crate::error::{Error, Result};
use crate::heads::{camera_head, compose_points, depth_ray_head, GeometricPrediction};
use crate::numerics::{Scalar, Tensor};
use crate::tokenizer::{Frame, FrameStream, TokenLayout};

use super::config::{EngineConfig, ModelParams};

/// Everything produced for one pushed frame.
#[derive(Clone, Debug)]
pub struct FrameOutput<S> {
    pub features: BackboneOutput<S>,
    pub geometry: GeometricPrediction<S>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub frames: usize,
    pub tokens: usize,
    /// Scalars held in keys and values over all layers.
    pub resident_values: usize,
    pub bytes: usize,
}

/// Incremental inference over a live stream. Parameters are shared, caches
/// are owned.
pub struct StreamSession<S> {
    params: Arc<ModelParams<S>>,
    backbone: BackboneConfig,
    layout: TokenLayout,
    caches: Vec<KVCache<S>>,
    cls_history: Vec<Tensor<S>>,
    cam_history: Vec<Tensor<S>>,
}

impl<S: Scalar> StreamSession<S> {
    pub fn new(params: Arc<ModelParams<S>>, config: &EngineConfig, capacity_frames: usize) -> Result<Self> {
        if capacity_frames == 0 {
            return Err(Error::Config("session capacity must be at least one frame".into()));
        }
        config.validate()?;
        params.validate(config)?;
        let backbone = config.backbone();
        let layout = backbone.layout(capacity_frames, config.height, config.width)?;
        let caches = new_caches(&backbone, &layout, capacity_frames);
        Ok(Self {
            params,
            backbone,
            layout,
            caches,
            cls_history: Vec::new(),
            cam_history: Vec::new(),
        })
    }

    pub fn frames(&self) -> usize {
        self.caches.first().map_or(0, KVCache::frames)
    }

    pub fn capacity(&self) -> usize {
        self.layout.frames
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn params(&self) -> &Arc<ModelParams<S>> {
        &self.params
    }

    /// Processes the next frame. On error the session is unchanged.
    pub fn push(&mut self, frame: &Frame) -> Result<FrameOutput<S>> {
        if frame.height != self.layout.height() || frame.width != self.layout.width() {
            return Err(Error::Shape(format!(
                "frame {}x{}, session expects {}x{}",
                frame.height,
                frame.width,
                self.layout.height(),
                self.layout.width()
            )));
        }
        for c in &self.caches {
            c.check_room()?;
        }
        let stream = FrameStream::new(vec![frame.clone()])?;
        let tokens = embed(&stream, &self.params.backbone, &self.backbone, None)?;
        let step = tokens.frame_tokens(0);
        let features = forward_streaming_step(&step, &mut self.caches, &self.params.backbone, &self.backbone, &self.layout)?;
        let geometry = predict(&features, &self.params, &self.backbone, &self.layout.with_frames(1))?;
        self.cls_history.push(features.z_cls.clone());
        if let Some(c) = &features.z_cam {
            self.cam_history.push(c.clone());
        }
        Ok(FrameOutput { features, geometry })
    }

    /// CLS tokens of every frame pushed so far, `[frames, d]`.
    pub fn cls_history(&self) -> Result<Tensor<S>> {
        stack(&self.cls_history, self.backbone.d_model())
    }

    pub fn cam_history(&self) -> Result<Option<Tensor<S>>> {
        if !self.backbone.cam_enabled {
            return Ok(None);
        }
        stack(&self.cam_history, self.backbone.d_model()).map(Some)
    }

    pub fn cache_stats(&self) -> CacheStats {
        let tokens = self.frames() * self.layout.per_frame();
        let resident_values = tokens * 2 * self.backbone.n_layers * self.backbone.d_model();
        CacheStats {
            frames: self.frames(),
            tokens,
            resident_values,
            bytes: resident_values * S::DTYPE.size_of(),
        }
    }

    /// Forgets the stream; the capacity is kept.
    pub fn reset(&mut self) {
        self.caches.iter_mut().for_each(KVCache::reset);
        self.cls_history.clear();
        self.cam_history.clear();
    }
}

fn stack<S: Scalar>(rows: &[Tensor<S>], d: usize) -> Result<Tensor<S>> {
    Tensor::new([rows.len(), d], rows.iter().flat_map(|r| r.data().iter().copied()).collect())
}

/// Geometry heads applied to backbone features for `layout.frames` frames.
pub fn predict<S: Scalar>(
    features: &BackboneOutput<S>,
    params: &ModelParams<S>,
    backbone: &BackboneConfig,
    layout: &TokenLayout,
) -> Result<GeometricPrediction<S>> {
    let (depth, ray, conf, _) = depth_ray_head(&features.z, &backbone.selected_layers, &params.heads.depth_ray, layout)?;
    let points = compose_points(&depth, &ray)?;
    let pose = match &features.z_cam {
        Some(z) => Some(camera_head(Some(z), &params.heads.camera)?.0),
        None => None,
    };
    Ok(GeometricPrediction {
        depth,
        ray,
        conf,
        points,
        pose,
    })
}

/// Offline reference: full causal forward over a whole clip, then the heads.
pub fn run_offline<S: Scalar>(
    params: &ModelParams<S>,
    config: &EngineConfig,
    stream: &FrameStream,
) -> Result<(BackboneOutput<S>, GeometricPrediction<S>)> {
    let backbone = config.backbone();
    let tokens = embed(stream, &params.backbone, &backbone, None)?;
    let features = forward_full(&tokens, &params.backbone, &backbone)?;
    let geometry = predict(&features, params, &backbone, &tokens.layout)?;
    Ok((features, geometry))
}
