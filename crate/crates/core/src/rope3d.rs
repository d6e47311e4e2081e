//! Rotary position embeddings over `(t, y, x)`.
//!
//! A head of width `d_head` has `d_head / 2` rotary pairs; pair `i` rotates
//! dims `(2i, 2i+1)`. Pairs with `i % 4 == 3` carry time, the rest alternate
//! between the y and x axes starting with y. Each axis has its own
//! frequency ladder `θ_j = base^(-2j / d_axis)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::tokenizer::TokenPosition;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub d_head: usize,
    pub base: f64,
    pub jitter_enabled: bool,
    pub jitter_scale: f64,
}

impl RopeConfig {
    pub fn new(d_head: usize) -> Self {
        Self {
            d_head,
            base: 10_000.0,
            jitter_enabled: false,
            jitter_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Odd multiples of 8 leave an odd number of spatial pairs, so the y/x
        // alternation cannot split them evenly (8 gives 1:2:1, 24 gives 3:5:4).
        if self.d_head == 0 || self.d_head % 16 != 0 {
            return Err(Error::Config(format!(
                "rotary head width must be a positive multiple of 16, got {}",
                self.d_head
            )));
        }
        if !(self.base > 1.0) {
            return Err(Error::Config(format!("rotary base must exceed 1, got {}", self.base)));
        }
        if !(0.0..1.0).contains(&self.jitter_scale) {
            return Err(Error::Config(format!(
                "jitter scale must lie in [0, 1), got {}",
                self.jitter_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    T,
    Y,
    X,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AxisPlan {
    pub pair_axis: Vec<Axis>,
    /// Angular frequency of each pair, in pair order.
    pub frequencies: Vec<f64>,
}

impl AxisPlan {
    pub fn d_head(&self) -> usize {
        2 * self.pair_axis.len()
    }

    pub fn count(&self, axis: Axis) -> usize {
        self.pair_axis.iter().filter(|&&a| a == axis).count()
    }
}

pub fn plan_axes(config: &RopeConfig) -> Result<AxisPlan> {
    config.validate()?;
    let pairs = config.d_head / 2;
    let mut spatial_rank = 0usize;
    let pair_axis: Vec<Axis> = (0..pairs)
        .map(|i| {
            if i % 4 == 3 {
                Axis::T
            } else {
                spatial_rank += 1;
                if spatial_rank % 2 == 1 {
                    Axis::Y
                } else {
                    Axis::X
                }
            }
        })
        .collect();
    let count = |axis: Axis| pair_axis.iter().filter(|&&a| a == axis).count();
    let (nt, ny, nx) = (count(Axis::T), count(Axis::Y), count(Axis::X));
    if nt * 3 != ny * 2 || ny != nx {
        return Err(Error::Config(format!(
            "head width {} gives axis counts {nt}:{ny}:{nx}, not 2:3:3",
            config.d_head
        )));
    }
    let mut rank = [0usize; 3];
    let frequencies = pair_axis
        .iter()
        .map(|&axis| {
            let (slot, n) = match axis {
                Axis::T => (0, nt),
                Axis::Y => (1, ny),
                Axis::X => (2, nx),
            };
            let j = rank[slot];
            rank[slot] += 1;
            let d_axis = 2 * n;
            config.base.powf(-2.0 * j as f64 / d_axis as f64)
        })
        .collect();
    Ok(AxisPlan {
        pair_axis,
        frequencies,
    })
}

/// Continuous coordinates fed to the rotation. Jitter makes `y, x`
/// non-integer, so they are stored as `f64`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RopePosition {
    Special,
    Coord { t: f64, y: f64, x: f64 },
}

impl RopePosition {
    pub fn grid(t: usize, y: usize, x: usize) -> Self {
        RopePosition::Coord {
            t: t as f64,
            y: y as f64,
            x: x as f64,
        }
    }

    fn coordinate(self, axis: Axis) -> Option<f64> {
        match self {
            RopePosition::Special => None,
            RopePosition::Coord { t, y, x } => Some(match axis {
                Axis::T => t,
                Axis::Y => y,
                Axis::X => x,
            }),
        }
    }
}

impl From<TokenPosition> for RopePosition {
    fn from(p: TokenPosition) -> Self {
        match p {
            TokenPosition::Special { .. } => RopePosition::Special,
            TokenPosition::Grid { t, y, x } => RopePosition::grid(t, y, x),
        }
    }
}

/// Per-token cosines and sines, `[tokens, d_head / 2]` each. Built once per
/// frame and shared by every head and layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable<S> {
    pub cos: Tensor<S>,
    pub sin: Tensor<S>,
}

impl<S: Scalar> RopeTable<S> {
    pub fn new(plan: &AxisPlan, positions: &[RopePosition]) -> Self {
        let pairs = plan.pair_axis.len();
        let mut cos = Tensor::filled([positions.len(), pairs], S::one());
        let mut sin = Tensor::zeros([positions.len(), pairs]);
        for (n, pos) in positions.iter().enumerate() {
            if let RopePosition::Special = pos {
                continue;
            }
            for i in 0..pairs {
                let c = pos.coordinate(plan.pair_axis[i]).expect("coordinate");
                let angle = c * plan.frequencies[i];
                cos.row_mut(n)[i] = S::lit(angle.cos());
                sin.row_mut(n)[i] = S::lit(angle.sin());
            }
        }
        Self { cos, sin }
    }

    pub fn tokens(&self) -> usize {
        self.cos.rows()
    }

    /// Rotates `x` in place. `x` holds `tokens` rows of width `stride`; the
    /// head occupies columns `offset .. offset + d_head` of each row.
    pub fn rotate(&self, x: &mut [S], stride: usize, offset: usize, inverse: bool) {
        let pairs = self.cos.cols();
        for n in 0..self.tokens() {
            let row = &mut x[n * stride + offset..n * stride + offset + 2 * pairs];
            let (c, s) = (self.cos.row(n), self.sin.row(n));
            for i in 0..pairs {
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                let si = if inverse { -s[i] } else { s[i] };
                row[2 * i] = a * c[i] - b * si;
                row[2 * i + 1] = a * si + b * c[i];
            }
        }
    }
}

fn check_rope_input<S: Scalar>(x: &Tensor<S>, positions: &[RopePosition], plan: &AxisPlan) -> Result<()> {
    if x.rank() != 2 || x.cols() != plan.d_head() {
        return Err(Error::Shape(format!(
            "rotary input {:?} vs head width {}",
            x.dims(),
            plan.d_head()
        )));
    }
    if positions.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} positions for {} tokens",
            positions.len(),
            x.rows()
        )));
    }
    Ok(())
}

/// Rotates each row of `x` (`[tokens, d_head]`) by its position.
pub fn apply_rope<S: Scalar>(x: &Tensor<S>, positions: &[RopePosition], plan: &AxisPlan) -> Result<Tensor<S>> {
    check_rope_input(x, positions, plan)?;
    let mut out = x.clone();
    RopeTable::new(plan, positions).rotate(out.data_mut(), plan.d_head(), 0, false);
    Ok(out)
}

/// Transpose (equivalently inverse) of [`apply_rope`], used to pull
/// gradients back through the rotation.
pub fn apply_rope_transpose<S: Scalar>(
    x: &Tensor<S>,
    positions: &[RopePosition],
    plan: &AxisPlan,
) -> Result<Tensor<S>> {
    check_rope_input(x, positions, plan)?;
    let mut out = x.clone();
    RopeTable::new(plan, positions).rotate(out.data_mut(), plan.d_head(), 0, true);
    Ok(out)
}

/// Draws one spatial scale factor per sample, uniform in `[1-scale, 1+scale]`.
pub fn jitter_factors(samples: usize, scale: f64, seed: u64) -> Vec<f64> {
    if scale == 0.0 {
        return vec![1.0; samples];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| rng.gen_range(1.0 - scale..=1.0 + scale))
        .collect()
}

/// Scales the `(y, x)` coordinates of one sample's positions by a single
/// seeded factor. Time and special positions are untouched.
pub fn jitter_positions(positions: &[RopePosition], scale: f64, seed: u64) -> Vec<RopePosition> {
    let factor = jitter_factors(1, scale, seed)[0];
    scale_positions(positions, factor)
}

pub fn scale_positions(positions: &[RopePosition], factor: f64) -> Vec<RopePosition> {
    positions
        .iter()
        .map(|&p| match p {
            RopePosition::Special => p,
            RopePosition::Coord { t, y, x } => RopePosition::Coord {
                t,
                y: y * factor,
                x: x * factor,
            },
        })
        .collect()
}
