//! Per-frame latency and memory of cached streaming versus full recompute.
//!
//! Cache mode fills the KV caches with `T − 1` frames once and then times
//! the push of frame `T`, rolling the caches back after every repetition.
//! Recompute mode times a full causal forward over all `T` frames.
//!
//! Each mode runs one discarded warmup before its first row. Later rows
//! reuse warm code and allocator state, and a second full pass at the
//! longest context would cost minutes without changing the median.
//!
//! `reps` is a floor. Rows that finish quickly keep repeating until
//! [`MIN_ROW_SECONDS`] of timed work or [`MAX_REPS`] samples, so the median
//! of a cheap row is not decided by two or three noisy samples.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamvit::attention::AttentionMode;
use streamvit::backbone::{
    embed, forward_full, forward_streaming_step, new_caches, recompute_activation_bytes, BackboneConfig, BackboneOutput,
    BackboneParams,
};
use streamvit::tokenizer::{Frame, FrameStream, TokenSequence};
use streamvit::{Error, Result, Tensor};

/// Patch edge used for bench images; a 14×14 grid is a 224×224 frame.
pub const BENCH_PATCH: usize = 16;

/// Largest deviation tolerated between the cached and recomputed outputs
/// when verifying during a benchmark (32-bit).
pub const BENCH_VERIFY_TOL: f64 = 1e-5;

/// Timed seconds a row keeps sampling for once `reps` samples are in.
pub const MIN_ROW_SECONDS: f64 = 8.0;

/// Upper bound on samples per row.
pub const MAX_REPS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub frames: Vec<usize>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub modes: Vec<AttentionMode>,
    /// Timed repetitions per row.
    pub reps: usize,
    pub seed: u64,
    /// Compare every cached output against the full forward.
    pub verify: bool,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            frames: vec![16, 32, 64, 128, 256],
            grid_h: 14,
            grid_w: 14,
            dim: 256,
            heads: 4,
            layers: 4,
            modes: vec![AttentionMode::Cache, AttentionMode::Recompute],
            reps: 3,
            seed: 0,
            verify: false,
        }
    }
}

impl BenchSpec {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig::new(self.layers, self.dim, self.heads, BENCH_PATCH, true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() || self.frames.contains(&0) {
            return Err(Error::Config("--frames needs positive context lengths".into()));
        }
        if self.reps < 3 {
            return Err(Error::Config(format!("--reps must be at least 3, got {}", self.reps)));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config("--grid must be positive".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("no bench mode selected".into()));
        }
        self.backbone().validate()
    }
}

/// One CSV row: timing of frame `t` given `t − 1` frames of history.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub mode: AttentionMode,
    pub t: usize,
    pub median_s: f64,
    pub iqr_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub reps: usize,
    /// Resident cache bytes (cache) or peak transient activation bytes
    /// (recompute), from the engine's own accounting.
    pub bytes: usize,
    /// Worst deviation from the full forward, when verification ran.
    pub max_deviation: Option<f64>,
}

pub const CSV_HEADER: &str = "mode,T,median_s,iqr_s,bytes";

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        let mode = match self.mode {
            AttentionMode::Cache => "cache",
            AttentionMode::Recompute => "recompute",
        };
        format!("{mode},{},{:.9},{:.9},{}", self.t, self.median_s, self.iqr_s, self.bytes)
    }
}

/// Linear-interpolated quantile of sorted samples.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingStats {
    pub median: f64,
    pub iqr: f64,
    pub min: f64,
    pub max: f64,
}

pub fn timing_stats(samples: &[f64]) -> TimingStats {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    TimingStats {
        median: quantile(&s, 0.5),
        iqr: quantile(&s, 0.75) - quantile(&s, 0.25),
        min: s[0],
        max: s[s.len() - 1],
    }
}

/// Times `f` at least `reps` times, after one untimed call when `warmup` is
/// set, and keeps sampling while the total is under [`MIN_ROW_SECONDS`].
fn time_reps<T>(reps: usize, warmup: bool, mut f: impl FnMut() -> Result<T>) -> Result<(Vec<f64>, T)> {
    if warmup {
        f()?;
    }
    let mut samples: Vec<f64> = Vec::with_capacity(reps);
    let mut last = None;
    while samples.len() < reps
        || (samples.len() < MAX_REPS && samples.iter().sum::<f64>() < MIN_ROW_SECONDS)
    {
        let start = Instant::now();
        last = Some(f()?);
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok((samples, last.expect("reps >= 1")))
}

fn random_frames(n: usize, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<FrameStream> {
    let frames = (0..n)
        .map(|_| Frame::new(height, width, (0..height * width * 3).map(|_| rng.gen_range(0.0..1.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    FrameStream::new(frames)
}

/// Max abs difference between a single-frame output and frame `t` of a
/// full-forward output.
fn frame_deviation(step: &BackboneOutput<f32>, full: &BackboneOutput<f32>, t: usize) -> f64 {
    fn slice(x: &Tensor<f32>, t: usize) -> &[f32] {
        let per = x.len() / x.dims()[0];
        &x.data()[t * per..(t + 1) * per]
    }
    fn diff(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
    }
    let mut worst = diff(step.z_cls.data(), slice(&full.z_cls, t));
    if let (Some(a), Some(b)) = (&step.z_cam, &full.z_cam) {
        worst = worst.max(diff(a.data(), slice(b, t)));
    }
    for (layer, z) in &full.z {
        worst = worst.max(diff(step.z[layer].data(), slice(z, t)));
    }
    worst
}

/// Runs every `(T, mode)` pair and hands each finished row to `on_record`
/// before starting the next, so a failure never leaves half a row behind.
pub fn run_bench(spec: &BenchSpec, mut on_record: impl FnMut(&BenchRecord) -> Result<()>) -> Result<Vec<BenchRecord>> {
    spec.validate()?;
    let cfg = spec.backbone();
    let (height, width) = (spec.grid_h * BENCH_PATCH, spec.grid_w * BENCH_PATCH);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params = BackboneParams::<f32>::init(&cfg, &mut rng)?;
    let max_t = *spec.frames.iter().max().expect("validated non-empty");
    let stream = random_frames(max_t, height, width, &mut rng)?;
    let tokens = embed(&stream, &params, &cfg, None)?;

    let cache_layout = cfg.layout(max_t, height, width)?;
    let mut caches = new_caches::<f32>(&cfg, &cache_layout, max_t);
    let mut records = Vec::new();
    let mut warmed: Vec<AttentionMode> = Vec::new();
    for &t in &spec.frames {
        let mut cached = None;
        let mut full = None;
        for &mode in &spec.modes {
            let warmup = !warmed.contains(&mode);
            warmed.push(mode);
            let (samples, bytes) = match mode {
                AttentionMode::Cache => {
                    // caches only ever hold a prefix of the same stream
                    caches.iter_mut().for_each(|c| c.truncate_frames(t - 1));
                    while caches[0].frames() < t - 1 {
                        let f = caches[0].frames();
                        forward_streaming_step(&tokens.frame_tokens(f), &mut caches, &params, &cfg, &cache_layout)?;
                    }
                    let step_tokens = tokens.frame_tokens(t - 1);
                    let (samples, out) = time_reps(spec.reps, warmup, || {
                        caches.iter_mut().for_each(|c| c.truncate_frames(t - 1));
                        forward_streaming_step(&step_tokens, &mut caches, &params, &cfg, &cache_layout)
                    })?;
                    let bytes = caches.iter().map(|c| c.bytes()).sum();
                    cached = Some(out);
                    (samples, bytes)
                }
                AttentionMode::Recompute => {
                    let prefix = prefix_tokens(&tokens, t)?;
                    let (samples, out) = time_reps(spec.reps, warmup, || forward_full(&prefix, &params, &cfg))?;
                    full = Some(out);
                    (samples, recompute_activation_bytes(&cfg, &prefix.layout, 4))
                }
            };
            let stats = timing_stats(&samples);
            records.push(BenchRecord {
                mode,
                t,
                median_s: stats.median,
                iqr_s: stats.iqr,
                min_s: stats.min,
                max_s: stats.max,
                reps: samples.len(),
                bytes,
                max_deviation: None,
            });
        }
        if spec.verify {
            let step = match cached {
                Some(s) => s,
                None => {
                    caches.iter_mut().for_each(|c| c.truncate_frames(0));
                    let mut last = None;
                    for f in 0..t {
                        last = Some(forward_streaming_step(&tokens.frame_tokens(f), &mut caches, &params, &cfg, &cache_layout)?);
                    }
                    last.expect("t >= 1")
                }
            };
            let full = match full {
                Some(f) => f,
                None => forward_full(&prefix_tokens(&tokens, t)?, &params, &cfg)?,
            };
            let dev = frame_deviation(&step, &full, t - 1);
            let n = spec.modes.len();
            let start = records.len() - n;
            for r in &mut records[start..] {
                r.max_deviation = Some(dev);
            }
        }
        let n = spec.modes.len();
        for r in &records[records.len() - n..] {
            on_record(r)?;
        }
    }
    Ok(records)
}

/// The first `t` frames of an embedded stream.
fn prefix_tokens(tokens: &TokenSequence<f32>, t: usize) -> Result<TokenSequence<f32>> {
    let layout = tokens.layout.with_frames(t);
    let width = tokens.width();
    let data = tokens.embeddings.data()[..layout.total() * width].to_vec();
    Ok(TokenSequence {
        embeddings: Tensor::new([layout.total(), width], data)?,
        layout,
        slots: tokens.slots.clone(),
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}
