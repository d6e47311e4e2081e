use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::heads::GeometryHeads;
use crate::losses::{LossWeights, SslConfig};
use crate::numerics::{Scalar, Tensor};
use crate::params::{join, ParamTree};

/// Hyper-parameters of the toy multi-task harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub ema_momentum: f64,
    /// Clips per self-supervised batch (KoLeo needs at least 2).
    pub clips: usize,
    /// Frames per clip for the SSL and geometry batches.
    pub frames: usize,
    pub prototypes: usize,
    pub mask_ratio: f64,
    /// Distinct scenes per task that the step sampler cycles through.
    pub scene_pool: usize,
    /// Half-width of the per-clip rotary position jitter on student views;
    /// 0 disables it.
    pub rope_jitter: f64,
    /// Global L2 norm the step gradient is clipped to; 0 disables clipping.
    pub grad_clip: f64,
    /// Caption samples per step.
    pub caption_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.2,
            ema_momentum: 0.996,
            clips: 4,
            frames: 2,
            prototypes: 16,
            mask_ratio: 0.3,
            scene_pool: 4,
            rope_jitter: 0.1,
            grad_clip: 2.0,
            caption_batch: 4,
        }
    }
}

/// Everything needed to rebuild a model, serialized as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub patch: usize,
    /// Layers fed to the depth/ray head; `None` means `{n/2, n}`.
    #[serde(default)]
    pub selected_layers: Option<Vec<usize>>,
    pub cam_enabled: bool,
    pub rope_base: f64,
    pub capacity: usize,
    pub loss_weights: LossWeights,
    #[serde(default = "default_image")]
    pub height: usize,
    #[serde(default = "default_image")]
    pub width: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default)]
    pub ssl: SslConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_image() -> usize {
    16
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_head_hidden() -> usize {
    32
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            patch: 4,
            selected_layers: None,
            cam_enabled: true,
            rope_base: 10_000.0,
            capacity: 128,
            loss_weights: LossWeights::default(),
            height: default_image(),
            width: default_image(),
            mlp_ratio: default_mlp_ratio(),
            head_hidden: default_head_hidden(),
            ssl: SslConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn backbone(&self) -> BackboneConfig {
        let mut cfg = BackboneConfig::new(self.n_layers, self.d_model, self.n_heads, self.patch, self.cam_enabled);
        cfg.mlp_ratio = self.mlp_ratio;
        cfg.attention.rope.base = self.rope_base;
        if let Some(l) = &self.selected_layers {
            cfg.selected_layers = l.clone();
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        self.loss_weights.validate()?;
        if self.capacity == 0 {
            return Err(Error::Config("capacity must be at least one frame".into()));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not a positive multiple of patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        let t = &self.train;
        if t.clips < 2 || t.frames == 0 || t.caption_batch == 0 || t.prototypes < 2 || t.scene_pool == 0 {
            return Err(Error::Config(format!("invalid training setup {t:?}")));
        }
        if !(0.0..1.0).contains(&t.mask_ratio) || !(0.0..=1.0).contains(&t.ema_momentum) || !(t.learning_rate >= 0.0)
            || !(0.0..1.0).contains(&t.rope_jitter)
            || !(t.grad_clip >= 0.0)
        {
            return Err(Error::Config(format!("invalid training rates {t:?}")));
        }
        if !(self.ssl.student_temp > 0.0 && self.ssl.teacher_temp > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone plus geometry heads: everything a streaming session needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub backbone: BackboneParams<S>,
    pub heads: GeometryHeads<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(config: &EngineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bb = config.backbone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            backbone: BackboneParams::init(&bb, &mut rng)?,
            heads: GeometryHeads::init(config.d_model, bb.selected_layers.len(), config.head_hidden, &mut rng),
        })
    }

    /// Checks every tensor shape against `config`.
    pub fn validate(&self, config: &EngineConfig) -> Result<()> {
        self.backbone.validate(&config.backbone())?;
        let template = Self::init(config, 0)?;
        for ((name, mine), (_, want)) in self.heads.named().into_iter().zip(template.heads.named()) {
            if mine.dims() != want.dims() {
                return Err(Error::Shape(format!(
                    "heads.{name}: shape {:?}, expected {:?}",
                    mine.dims(),
                    want.dims()
                )));
            }
        }
        Ok(())
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<T: Scalar>(&self, config: &EngineConfig) -> Result<ModelParams<T>> {
        self.validate(config)?;
        let mut out = ModelParams::<T>::init(config, 0)?;
        for ((_, dst), (_, src)) in out.named_mut().into_iter().zip(self.named()) {
            *dst = src.cast();
        }
        Ok(out)
    }
}

impl<S: Scalar> ParamTree<S> for ModelParams<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.heads.visit(&join(prefix, "heads"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.heads.visit_mut(&join(prefix, "heads"), f);
    }
}
