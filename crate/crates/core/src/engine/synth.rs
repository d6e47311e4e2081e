//! Deterministic synthetic data: ray-cast box rooms with exact geometry,
//! colour-quadrant caption images and photometric views for
//! self-distillation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::{normalize_quaternion, GeometricTargets, POSE_DIM};
use crate::numerics::Tensor;
use crate::tokenizer::{Frame, FrameStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraMotion {
    Static,
    /// Smooth sway of the centre combined with a slow yaw.
    Orbit,
}

/// A rendered clip with per-pixel ground truth. Rays carry world-frame
/// origins (the camera centre) and unit directions through pixel centres.
/// Poses are `(qw, qx, qy, qz, tx, ty, tz, fov_x, fov_y)` with the rotation
/// mapping camera to world axes and angles in radians.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub frames: FrameStream,
    pub targets: GeometricTargets<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
}

struct Room {
    walls: Aabb,
    object: Aabb,
    palette: [[f64; 3]; 7],
    checker: f64,
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn rotate(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
    let p = quat_mul(quat_mul(q, [0.0, v[0], v[1], v[2]]), [q[0], -q[1], -q[2], -q[3]]);
    [p[1], p[2], p[3]]
}

/// Distance to the inside wall hit by a ray starting within `b`, and the
/// wall id (`2·axis + side`).
fn exit_distance(b: &Aabb, o: [f64; 3], d: [f64; 3]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for a in 0..3 {
        if d[a] == 0.0 {
            continue;
        }
        let (bound, side) = if d[a] > 0.0 { (b.hi[a], 1) } else { (b.lo[a], 0) };
        let t = (bound - o[a]) / d[a];
        if t < best.0 {
            best = (t, 2 * a + side);
        }
    }
    best
}

/// Slab test for a ray entering `b` from outside.
fn entry_distance(b: &Aabb, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < b.lo[a] || o[a] > b.hi[a] {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((b.lo[a] - o[a]) / d[a], (b.hi[a] - o[a]) / d[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

impl Room {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let half = [rng.gen_range(2.0..3.0), rng.gen_range(1.2..1.8), rng.gen_range(2.0..3.0)];
        let size = [rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.6)];
        let cx = rng.gen_range(-1.0..1.0);
        let cz = rng.gen_range(1.3..1.6);
        let mut palette = [[0.0; 3]; 7];
        for c in palette.iter_mut() {
            for v in c.iter_mut() {
                *v = rng.gen_range(0.15..0.95);
            }
        }
        Self {
            walls: Aabb {
                lo: [-half[0], -half[1], -half[2]],
                hi: half,
            },
            object: Aabb {
                lo: [cx - size[0], half[1] - 2.0 * size[1], cz - size[2]],
                hi: [cx + size[0], half[1], cz + size[2]],
            },
            palette,
            checker: rng.gen_range(1.5..3.0),
        }
    }

    /// `(distance, rgb)` of the first surface along a unit ray.
    fn trace(&self, o: [f64; 3], d: [f64; 3]) -> (f64, [f64; 3]) {
        let (mut t, wall) = exit_distance(&self.walls, o, d);
        let mut surface = wall;
        if let Some(te) = entry_distance(&self.object, o, d) {
            if te < t {
                t = te;
                surface = 6;
            }
        }
        let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
        let cells: i64 = p.iter().map(|&c| (c * self.checker).floor() as i64).sum();
        let tex = if cells.rem_euclid(2) == 0 { 1.0 } else { 0.65 };
        let shade = tex / (1.0 + 0.08 * t);
        let base = self.palette[surface];
        (t, [base[0] * shade, base[1] * shade, base[2] * shade])
    }
}

struct Trajectory {
    sway: [f64; 3],
    phase: f64,
    speed: f64,
    yaw0: f64,
    yaw_rate: f64,
    pitch: f64,
}

impl Trajectory {
    fn sample(rng: &mut ChaCha8Rng, motion: CameraMotion) -> Self {
        let moving = motion == CameraMotion::Orbit;
        Self {
            sway: [rng.gen_range(0.1..0.3), rng.gen_range(0.05..0.2), rng.gen_range(0.1..0.3)],
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            speed: if moving { rng.gen_range(0.15..0.35) } else { 0.0 },
            yaw0: rng.gen_range(-0.4..0.4),
            yaw_rate: if moving { rng.gen_range(-0.08..0.08) } else { 0.0 },
            pitch: rng.gen_range(-0.15..0.15),
        }
    }

    fn pose(&self, t: usize) -> ([f64; 4], [f64; 3]) {
        let s = self.phase + self.speed * t as f64;
        let centre = [
            self.sway[0] * (s.sin() - self.phase.sin()),
            self.sway[1] * ((0.5 * s).sin() - (0.5 * self.phase).sin()),
            self.sway[2] * (s.cos() - self.phase.cos()),
        ];
        let yaw = self.yaw0 + self.yaw_rate * t as f64;
        let qy = [(yaw / 2.0).cos(), 0.0, (yaw / 2.0).sin(), 0.0];
        let qx = [(self.pitch / 2.0).cos(), (self.pitch / 2.0).sin(), 0.0, 0.0];
        (normalize_quaternion(quat_mul(qy, qx)), centre)
    }
}

pub fn synth_scene(seed: u64, frames: usize, height: usize, width: usize) -> Result<SyntheticScene> {
    synth_scene_with(seed, frames, height, width, CameraMotion::Orbit)
}

pub fn synth_scene_with(seed: u64, frames: usize, height: usize, width: usize, motion: CameraMotion) -> Result<SyntheticScene> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!("scene of {frames} frames at {height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = Room::sample(&mut rng);
    let path = Trajectory::sample(&mut rng, motion);
    let fov_y: f64 = rng.gen_range(0.8..1.1);
    let tan_y = (fov_y / 2.0).tan();
    let tan_x = tan_y * width as f64 / height as f64;
    let fov_x = 2.0 * tan_x.atan();

    let px = frames * height * width;
    let mut depth = Vec::with_capacity(px);
    let mut ray = Vec::with_capacity(px * 6);
    let mut points = Vec::with_capacity(px * 3);
    let mut pose = Vec::with_capacity(frames * POSE_DIM);
    let mut images = Vec::with_capacity(frames);
    for t in 0..frames {
        let (q, o) = path.pose(t);
        pose.extend_from_slice(&q);
        pose.extend_from_slice(&o);
        pose.extend_from_slice(&[fov_x, fov_y]);
        let mut rgb = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let u = 2.0 * (x as f64 + 0.5) / width as f64 - 1.0;
                let v = 2.0 * (y as f64 + 0.5) / height as f64 - 1.0;
                let c = [u * tan_x, v * tan_y, 1.0];
                let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                let d = rotate(q, [c[0] / n, c[1] / n, c[2] / n]);
                let (dist, colour) = room.trace(o, d);
                depth.push(dist);
                ray.extend_from_slice(&o);
                ray.extend_from_slice(&d);
                points.extend((0..3).map(|k| o[k] + dist * d[k]));
                rgb.extend(colour.iter().map(|&c| c.clamp(0.0, 1.0) as f32));
            }
        }
        images.push(Frame::new(height, width, rgb)?);
    }
    Ok(SyntheticScene {
        frames: FrameStream::new(images)?,
        targets: GeometricTargets {
            depth: Tensor::new([frames, height, width, 1], depth)?,
            ray: Tensor::new([frames, height, width, 6], ray)?,
            points: Tensor::new([frames, height, width, 3], points)?,
            pose: Tensor::new([frames, POSE_DIM], pose)?,
            valid: Tensor::filled([frames, height, width], 1.0),
        },
    })
}

pub const CAPTION_VOCAB: usize = 8;
pub const EOS: usize = 0;
/// Quadrant tokens, in order top-left, top-right, bottom-left, bottom-right.
pub const QUADRANT_TOKENS: [usize; 4] = [1, 2, 3, 4];
/// Colour tokens: red, green, blue.
pub const COLOUR_TOKENS: [usize; 3] = [5, 6, 7];
pub const CAPTION_INSTRUCTION: [usize; 1] = [EOS];

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionSample {
    pub frame: Frame,
    pub quadrant: usize,
    pub colour: usize,
    /// `[quadrant token, colour token, EOS]`.
    pub tokens: Vec<usize>,
}

/// A noisy grey image with one quadrant painted red, green or blue.
pub fn caption_sample(rng: &mut impl Rng, height: usize, width: usize) -> Result<CaptionSample> {
    if height < 2 || width < 2 {
        return Err(Error::Config(format!("caption image {height}x{width} has no quadrants")));
    }
    let quadrant = rng.gen_range(0..4);
    let colour = rng.gen_range(0..3);
    let (qy, qx) = (quadrant / 2, quadrant % 2);
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let inside = (2 * y / height) == qy && (2 * x / width) == qx;
            for c in 0..3 {
                let base = if !inside {
                    0.35
                } else if c == colour {
                    0.9
                } else {
                    0.1
                };
                data.push((base + rng.gen_range(-0.05..0.05f32)).clamp(0.0, 1.0));
            }
        }
    }
    Ok(CaptionSample {
        frame: Frame::new(height, width, data)?,
        quadrant,
        colour,
        tokens: vec![QUADRANT_TOKENS[quadrant], COLOUR_TOKENS[colour], EOS],
    })
}

/// Random brightness, contrast and per-channel gain, shared by all frames of
/// the clip.
pub fn photometric_view(stream: &FrameStream, rng: &mut impl Rng) -> Result<FrameStream> {
    let brightness: f32 = rng.gen_range(-0.1..0.1);
    let contrast: f32 = rng.gen_range(0.8..1.2);
    let gain: [f32; 3] = [rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1)];
    let frames = stream
        .frames()
        .iter()
        .map(|f| {
            let data = f
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| (((v - 0.5) * contrast + 0.5 + brightness) * gain[i % 3]).clamp(0.0, 1.0))
                .collect();
            Frame::new(f.height, f.width, data)
        })
        .collect::<Result<Vec<_>>>()?;
    FrameStream::new(frames)
}
