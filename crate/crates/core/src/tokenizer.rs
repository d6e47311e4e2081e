//! Frame streams to token sequences.
//!
//! Each frame becomes `N_s` special tokens followed by its `h·w` patch
//! tokens. The special tokens come first in the fixed order
//! `[CLS, R1, R2, R3, R4, CAM?]`; patches follow in row-major grid order.
//! [`TokenLayout::tau`] maps a global token index to its frame and is the
//! only definition of "which frame does this token belong to" used by the
//! attention mask and the KV-cache.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{linear, Scalar, Tensor};

pub const REGISTER_TOKENS: usize = 4;

/// One RGB frame, row-major `H×W×3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Image(format!(
                "{}x{} frame needs {} values, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Decodes a binary PPM (P6, maxval 255). Each byte maps to `v / 255`.
    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Image("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P6" {
            return Err(Error::Image(format!("expected P6 magic, got {}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Image(format!("bad PPM header field `{s}`")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Image(format!("only 8-bit PPM supported, maxval {maxval}")));
        }
        let need = width * height * 3;
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::Image("truncated PPM raster".into()))?;
        Ok(Self {
            height,
            width,
            data: raster.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ppm_bytes(&std::fs::read(path)?)
    }

    /// Encodes as P6, rounding each value to the nearest of 256 levels.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}

/// An ordered clip of equally sized frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStream {
    frames: Vec<Frame>,
}

impl FrameStream {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if frames
                .iter()
                .any(|f| f.height != first.height || f.width != first.width)
            {
                return Err(Error::Image("frames in a stream must share H and W".into()));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Cls,
    Register(u8),
    Cam,
    Patch { row: usize, col: usize },
}

impl SlotKind {
    pub fn is_patch(self) -> bool {
        matches!(self, SlotKind::Patch { .. })
    }
}

/// Integer spatiotemporal coordinates of a token. Special tokens carry only
/// their frame index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenPosition {
    Special { t: usize },
    Grid { t: usize, y: usize, x: usize },
}

impl TokenPosition {
    pub fn frame(self) -> usize {
        match self {
            TokenPosition::Special { t } | TokenPosition::Grid { t, .. } => t,
        }
    }
}

/// Layout of a tokenized clip: `frames × (N_s + h·w)` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub frames: usize,
    pub special: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub cam_enabled: bool,
}

impl TokenLayout {
    pub fn new(frames: usize, height: usize, width: usize, patch: usize, cam_enabled: bool) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if height % patch != 0 || width % patch != 0 {
            return Err(Error::Config(format!(
                "{height}x{width} frame is not divisible by patch size {patch}"
            )));
        }
        Ok(Self::from_grid(frames, height / patch, width / patch, patch, cam_enabled))
    }

    pub fn from_grid(frames: usize, grid_h: usize, grid_w: usize, patch: usize, cam_enabled: bool) -> Self {
        Self {
            frames,
            special: special_tokens(cam_enabled),
            grid_h,
            grid_w,
            patch,
            cam_enabled,
        }
    }

    pub fn with_frames(self, frames: usize) -> Self {
        Self { frames, ..self }
    }

    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn per_frame(&self) -> usize {
        self.special + self.patches()
    }

    pub fn total(&self) -> usize {
        self.frames * self.per_frame()
    }

    pub fn height(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn width(&self) -> usize {
        self.grid_w * self.patch
    }

    pub fn cls_slot(&self) -> usize {
        0
    }

    pub fn cam_slot(&self) -> Option<usize> {
        self.cam_enabled.then_some(1 + REGISTER_TOKENS)
    }

    /// Slot of the patch at grid cell `(row, col)`.
    pub fn patch_slot(&self, row: usize, col: usize) -> usize {
        self.special + row * self.grid_w + col
    }

    /// Frame index of global token `u`.
    pub fn tau(&self, u: usize) -> Result<usize> {
        if u >= self.total() {
            return Err(Error::Index {
                index: u,
                len: self.total(),
            });
        }
        Ok(u / self.per_frame())
    }

    pub fn slot_kind(&self, slot: usize) -> SlotKind {
        debug_assert!(slot < self.per_frame());
        if slot == 0 {
            SlotKind::Cls
        } else if slot <= REGISTER_TOKENS {
            SlotKind::Register(slot as u8)
        } else if slot < self.special {
            SlotKind::Cam
        } else {
            let p = slot - self.special;
            SlotKind::Patch {
                row: p / self.grid_w,
                col: p % self.grid_w,
            }
        }
    }

    pub fn slot_kinds(&self) -> Vec<SlotKind> {
        (0..self.per_frame()).map(|s| self.slot_kind(s)).collect()
    }

    pub fn position_of(&self, u: usize) -> Result<TokenPosition> {
        let t = self.tau(u)?;
        Ok(match self.slot_kind(u % self.per_frame()) {
            SlotKind::Patch { row, col } => TokenPosition::Grid { t, y: row, x: col },
            _ => TokenPosition::Special { t },
        })
    }

    /// Positions of all tokens of frame `t`.
    pub fn frame_positions(&self, t: usize) -> Vec<TokenPosition> {
        (0..self.per_frame())
            .map(|s| match self.slot_kind(s) {
                SlotKind::Patch { row, col } => TokenPosition::Grid { t, y: row, x: col },
                _ => TokenPosition::Special { t },
            })
            .collect()
    }

    pub fn positions(&self) -> Vec<TokenPosition> {
        (0..self.frames).flat_map(|t| self.frame_positions(t)).collect()
    }
}

pub fn special_tokens(cam_enabled: bool) -> usize {
    1 + REGISTER_TOKENS + usize::from(cam_enabled)
}

/// Embedded clip, `embeddings` shaped `[T, per_frame, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<S> {
    pub embeddings: Tensor<S>,
    pub layout: TokenLayout,
    pub slots: Vec<SlotKind>,
}

impl<S: Scalar> TokenSequence<S> {
    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    /// Token rows of frame `t`, shaped `[per_frame, d]`.
    pub fn frame_tokens(&self, t: usize) -> Tensor<S> {
        let pf = self.layout.per_frame();
        let d = self.width();
        let rows = &self.embeddings.data()[t * pf * d..(t + 1) * pf * d];
        Tensor::new([pf, d], rows.to_vec()).expect("frame slice")
    }
}

/// Flattened patches of one frame, `[h·w, 3·p·p]`; each patch is flattened
/// over `(dy, dx, channel)`.
pub fn extract_patches<S: Scalar>(frame: &Frame, patch: usize) -> Result<Tensor<S>> {
    if patch == 0 || frame.height % patch != 0 || frame.width % patch != 0 {
        return Err(Error::Config(format!(
            "{}x{} frame is not divisible by patch size {patch}",
            frame.height, frame.width
        )));
    }
    let (gh, gw) = (frame.height / patch, frame.width / patch);
    let pdim = 3 * patch * patch;
    let mut out = Tensor::zeros([gh * gw, pdim]);
    for r in 0..gh {
        for c in 0..gw {
            let row = out.row_mut(r * gw + c);
            for dy in 0..patch {
                let src = ((r * patch + dy) * frame.width + c * patch) * 3;
                let dst = dy * patch * 3;
                for (o, &v) in row[dst..dst + patch * 3]
                    .iter_mut()
                    .zip(&frame.data[src..src + patch * 3])
                {
                    *o = S::lit(v as f64);
                }
            }
        }
    }
    Ok(out)
}

/// Tokenizes a clip: project each patch with `projection` (`[3·p·p, d]`)
/// plus `bias`, then prepend the shared `special_embeds` (`[N_s, d]`).
pub fn patchify<S: Scalar>(
    stream: &FrameStream,
    patch: usize,
    projection: &Tensor<S>,
    bias: &Tensor<S>,
    special_embeds: &Tensor<S>,
) -> Result<TokenSequence<S>> {
    let n_special = special_embeds.dims().first().copied().unwrap_or(0);
    let cam_enabled = match n_special {
        n if n == special_tokens(true) => true,
        n if n == special_tokens(false) => false,
        n => {
            return Err(Error::Shape(format!(
                "expected {} or {} special embeddings, got {n}",
                special_tokens(false),
                special_tokens(true)
            )))
        }
    };
    let layout = TokenLayout::new(stream.len(), stream.height(), stream.width(), patch, cam_enabled)?;
    let d = projection.cols();
    if projection.rank() != 2 || projection.dims()[0] != 3 * patch * patch || d == 0 {
        return Err(Error::Shape(format!(
            "projection {:?} for patch size {patch}",
            projection.dims()
        )));
    }
    if special_embeds.cols() != d || bias.len() != d {
        return Err(Error::Shape(format!(
            "special {:?} / bias {:?} vs width {d}",
            special_embeds.dims(),
            bias.dims()
        )));
    }
    let pf = layout.per_frame();
    let mut emb = Tensor::zeros([layout.frames, pf, d]);
    for (t, frame) in stream.frames().iter().enumerate() {
        let patches = extract_patches::<S>(frame, patch)?;
        let proj = linear(&patches, projection, Some(bias))?;
        let base = t * pf * d;
        let out = emb.data_mut();
        out[base..base + layout.special * d].copy_from_slice(special_embeds.data());
        out[base + layout.special * d..base + pf * d].copy_from_slice(proj.data());
    }
    Ok(TokenSequence {
        embeddings: emb,
        layout,
        slots: layout.slot_kinds(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(frames: usize, cam: bool) -> TokenLayout {
        TokenLayout::new(frames, 32, 32, 16, cam).unwrap()
    }

    #[test]
    fn grid_arithmetic() {
        let l = layout(1, false);
        assert_eq!((l.grid_h, l.grid_w), (2, 2));
        assert_eq!(l.patches(), 4);
        assert_eq!(l.per_frame(), 5 + 4);
        assert_eq!(layout(1, true).per_frame(), 6 + 4);
    }

    #[test]
    fn indivisible_frames_rejected() {
        assert!(matches!(TokenLayout::new(1, 30, 32, 16, true), Err(Error::Config(_))));
    }

    #[test]
    fn tau_floor_division() {
        // per_frame = 10 with cam enabled and a 2x2 grid
        let l = layout(4, true);
        assert_eq!(l.per_frame(), 10);
        assert_eq!(l.tau(0).unwrap(), 0);
        assert_eq!(l.tau(12).unwrap(), 1);
        assert_eq!(l.tau(29).unwrap(), 2);
        assert_eq!(l.tau(30).unwrap(), 3);
        assert!(matches!(l.tau(40), Err(Error::Index { index: 40, len: 40 })));
    }

    #[test]
    fn tau_matches_per_frame_enumeration() {
        let l = layout(4, true);
        let mut oracle = Vec::new();
        for t in 0..4 {
            oracle.extend(std::iter::repeat(t).take(l.per_frame()));
        }
        let got: Vec<usize> = (0..l.total()).map(|u| l.tau(u).unwrap()).collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn positions() {
        let l = TokenLayout::new(4, 32, 32, 16, true).unwrap();
        assert_eq!(l.position_of(l.special).unwrap(), TokenPosition::Grid { t: 0, y: 0, x: 0 });
        assert_eq!(l.position_of(3 * l.per_frame()).unwrap(), TokenPosition::Special { t: 3 });
        let l2 = l.with_frames(2);
        let mut last = None;
        for t in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    last = Some(TokenPosition::Grid { t, y, x });
                }
            }
        }
        assert_eq!(l2.position_of(l2.total() - 1).unwrap(), last.unwrap());
    }

    #[test]
    fn slot_order_is_fixed() {
        let kinds = layout(1, true).slot_kinds();
        assert_eq!(kinds[0], SlotKind::Cls);
        assert_eq!(&kinds[1..5], &[1, 2, 3, 4].map(SlotKind::Register));
        assert_eq!(kinds[5], SlotKind::Cam);
        assert_eq!(kinds[6], SlotKind::Patch { row: 0, col: 0 });
        assert_eq!(kinds[7], SlotKind::Patch { row: 0, col: 1 });
        assert_eq!(kinds.iter().filter(|k| k.is_patch()).count(), 4);
    }

    #[test]
    fn zero_frame_gives_zero_patches_and_raw_specials() {
        let stream = FrameStream::new(vec![Frame::constant(32, 32, 0.0)]).unwrap();
        let proj = Tensor::<f64>::from_fn([3 * 16 * 16, 8], |i| (i % 13) as f64 * 0.1);
        let bias = Tensor::zeros([8]);
        let specials = Tensor::from_fn([6, 8], |i| i as f64);
        let seq = patchify(&stream, 16, &proj, &bias, &specials).unwrap();
        let f = seq.frame_tokens(0);
        assert_eq!(&f.data()[..48], specials.data());
        assert!(f.data()[48..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_permutation_permutes_token_blocks() {
        let mk = |v: f32| {
            Frame::new(16, 16, (0..16 * 16 * 3).map(|i| (i as f32 * 0.37 + v) % 1.0).collect())
                .unwrap()
        };
        let (a, b) = (mk(0.1), mk(0.6));
        let proj = Tensor::<f64>::from_fn([3 * 8 * 8, 4], |i| ((i * 7) % 11) as f64 * 0.01);
        let bias = Tensor::from_fn([4], |i| i as f64);
        let specials = Tensor::from_fn([5, 4], |i| -(i as f64));
        let ab = patchify(&FrameStream::new(vec![a.clone(), b.clone()]).unwrap(), 8, &proj, &bias, &specials).unwrap();
        let ba = patchify(&FrameStream::new(vec![b, a]).unwrap(), 8, &proj, &bias, &specials).unwrap();
        assert_eq!(ab.frame_tokens(0), ba.frame_tokens(1));
        assert_eq!(ab.frame_tokens(1), ba.frame_tokens(0));
    }

    #[test]
    fn wrong_projection_shape() {
        let stream = FrameStream::new(vec![Frame::constant(32, 32, 0.5)]).unwrap();
        let proj = Tensor::<f32>::zeros([10, 8]);
        let r = patchify(&stream, 16, &proj, &Tensor::zeros([8]), &Tensor::zeros([5, 8]));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let mut bytes = b"P6\n# fixture\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 7, 8, 9]);
        let f = Frame::from_ppm_bytes(&bytes).unwrap();
        assert_eq!((f.width, f.height), (2, 1));
        assert_eq!(f.data[1], 128.0 / 255.0);
        assert_eq!(f.data[2], 1.0);
        let again = Frame::from_ppm_bytes(&f.to_ppm_bytes()).unwrap();
        assert_eq!(again, f);
        assert!(Frame::from_ppm_bytes(b"P5\n1 1\n255\n\0").is_err());
        assert!(Frame::from_ppm_bytes(b"P6\n2 2\n255\n\0\0").is_err());
    }
}
