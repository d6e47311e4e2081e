use super::gemm::{gemm, matmul_nt, matmul_tn, MatRef};
use super::tensor::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

const LANES: usize = 16;

/// In-place numerically stable softmax of one row. `-inf` entries are
/// excluded from the max and come out exactly zero. Returns `false` (row
/// untouched) when every entry is `-inf`.
pub fn softmax_row_in_place<S: Scalar>(row: &mut [S]) -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: feature detected at runtime.
            return unsafe { softmax_avx512(row) };
        }
    }
    softmax_body(row)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512vl,fma")]
unsafe fn softmax_avx512<S: Scalar>(row: &mut [S]) -> bool {
    softmax_body(row)
}

/// One step of a streaming softmax over key blocks. Takes the running max
/// of the row so far, raises it to cover `block`, and overwrites `block`
/// with `exp(v − new_max)`. Returns `(new_max, Σ block)`; the sum is NaN
/// when the block holds a NaN. While the new max is still `-inf`, the block
/// is zeroed.
pub fn softmax_block_update<S: Scalar>(block: &mut [S], running_max: S) -> (S, S) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: feature detected at runtime.
            return unsafe { block_update_avx512(block, running_max) };
        }
    }
    block_update_body(block, running_max)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512vl,fma")]
unsafe fn block_update_avx512<S: Scalar>(block: &mut [S], running_max: S) -> (S, S) {
    block_update_body(block, running_max)
}

#[inline(always)]
fn block_update_body<S: Scalar>(block: &mut [S], running_max: S) -> (S, S) {
    let bmax = row_max(block);
    let max = if bmax > running_max { bmax } else { running_max };
    if max == S::neg_infinity() {
        let sum = if block.iter().any(|v| v.is_nan()) { S::nan() } else { S::zero() };
        block.fill(S::zero());
        return (max, sum);
    }
    (max, exp_shift_sum(block, max))
}

#[inline(always)]
fn row_max<S: Scalar>(row: &[S]) -> S {
    #[cfg(target_arch = "x86_64")]
    {
        if S::DTYPE == DType::F32 && is_x86_feature_detected!("avx512f") {
            // SAFETY: DTYPE F32 means S is f32; feature detected at runtime.
            let row = unsafe { std::slice::from_raw_parts(row.as_ptr() as *const f32, row.len()) };
            return S::lit(unsafe { x86::row_max_f32(row) } as f64);
        }
    }
    let mut lanes = [S::neg_infinity(); LANES];
    let mut chunks = row.chunks_exact(LANES);
    for chunk in &mut chunks {
        for i in 0..LANES {
            if chunk[i] > lanes[i] {
                lanes[i] = chunk[i];
            }
        }
    }
    for (i, &v) in chunks.remainder().iter().enumerate() {
        if v > lanes[i] {
            lanes[i] = v;
        }
    }
    lanes.iter().fold(S::neg_infinity(), |m, &v| if v > m { v } else { m })
}

/// Replaces every entry by `exp(v − max)` and returns the sum.
#[inline(always)]
fn exp_shift_sum<S: Scalar>(row: &mut [S], max: S) -> S {
    #[cfg(target_arch = "x86_64")]
    {
        if S::DTYPE == DType::F32 && is_x86_feature_detected!("avx512f") {
            // SAFETY: DTYPE F32 means S is f32; feature detected at runtime.
            let row = unsafe { std::slice::from_raw_parts_mut(row.as_mut_ptr() as *mut f32, row.len()) };
            return S::lit(unsafe { x86::exp_shift_sum_f32(row, max.as_f64() as f32) } as f64);
        }
    }
    let mut sums = [S::zero(); LANES];
    let mut chunks = row.chunks_exact_mut(LANES);
    for chunk in &mut chunks {
        for i in 0..LANES {
            let e = (chunk[i] - max).exp_fast();
            chunk[i] = e;
            sums[i] += e;
        }
    }
    for (i, v) in chunks.into_remainder().iter_mut().enumerate() {
        let e = (*v - max).exp_fast();
        *v = e;
        sums[i] += e;
    }
    sums.iter().fold(S::zero(), |a, &b| a + b)
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    #[inline(always)]
    fn tail_mask(len: usize, i: usize) -> u16 {
        ((1u32 << (len - i).min(16)) - 1) as u16
    }

    /// Max ignoring NaN, `-inf` for an empty or all-NaN row.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn row_max_f32(row: &[f32]) -> f32 {
        let p = row.as_ptr();
        let mut acc = _mm512_set1_ps(f32::NEG_INFINITY);
        let mut i = 0;
        while i < row.len() {
            let x = _mm512_mask_loadu_ps(_mm512_set1_ps(f32::NEG_INFINITY), tail_mask(row.len(), i), p.add(i));
            // returns the second operand when x is NaN
            acc = _mm512_max_ps(x, acc);
            i += 16;
        }
        _mm512_reduce_max_ps(acc)
    }

    /// Vector counterpart of `f32::exp_fast`: the same range reduction and
    /// polynomial, evaluated with fused multiply-adds.
    /// A NaN lane stays NaN: max/min return their second operand when either
    /// is NaN, and the underflow compare is false for NaN.
    #[inline(always)]
    unsafe fn exp_ps(v: __m512) -> __m512 {
        let x = _mm512_min_ps(_mm512_set1_ps(88.0), _mm512_max_ps(_mm512_set1_ps(-88.0), v));
        let fx = _mm512_roundscale_ps::<{ _MM_FROUND_TO_NEG_INF | _MM_FROUND_NO_EXC }>(_mm512_fmadd_ps(
            x,
            _mm512_set1_ps(std::f32::consts::LOG2_E),
            _mm512_set1_ps(0.5),
        ));
        let r = _mm512_fnmadd_ps(fx, _mm512_set1_ps(0.693_359_4), x);
        let r = _mm512_fnmadd_ps(fx, _mm512_set1_ps(-2.121_944_4e-4), r);
        let z = _mm512_mul_ps(r, r);
        let mut y = _mm512_set1_ps(1.987_569_1e-4);
        for c in [1.398_199_9e-3, 8.333_452e-3, 4.166_579_6e-2, 1.666_666_5e-1, 5.000_000_1e-1] {
            y = _mm512_fmadd_ps(y, r, _mm512_set1_ps(c));
        }
        y = _mm512_add_ps(_mm512_fmadd_ps(y, z, r), _mm512_set1_ps(1.0));
        let e = _mm512_scalef_ps(y, fx);
        let under = _mm512_cmp_ps_mask::<_CMP_LT_OQ>(v, _mm512_set1_ps(-88.0));
        _mm512_mask_mov_ps(e, under, _mm512_setzero_ps())
    }

    /// Tanh-approximated GELU, the vector form of the scalar [`super::gelu`].
    #[target_feature(enable = "avx512f,fma")]
    pub unsafe fn gelu_f32(x: &[f32], out: &mut [f32], c: f32, a: f32) {
        let (xp, op) = (x.as_ptr(), out.as_mut_ptr());
        let mut i = 0;
        while i < x.len() {
            let mask = tail_mask(x.len(), i);
            let v = _mm512_maskz_loadu_ps(mask, xp.add(i));
            let cube = _mm512_mul_ps(_mm512_mul_ps(_mm512_mul_ps(_mm512_set1_ps(a), v), v), v);
            let u = _mm512_mul_ps(_mm512_set1_ps(c), _mm512_add_ps(v, cube));
            let e = exp_ps(_mm512_mul_ps(_mm512_set1_ps(2.0), u));
            let one = _mm512_set1_ps(1.0);
            let t = _mm512_sub_ps(one, _mm512_div_ps(_mm512_set1_ps(2.0), _mm512_add_ps(e, one)));
            let g = _mm512_mul_ps(_mm512_mul_ps(_mm512_set1_ps(0.5), v), _mm512_add_ps(one, t));
            _mm512_mask_storeu_ps(op.add(i), mask, g);
            i += 16;
        }
    }

    /// `exp(row − max)` in place, returning the sum. NaN inputs stay NaN.
    #[target_feature(enable = "avx512f,fma")]
    pub unsafe fn exp_shift_sum_f32(row: &mut [f32], max: f32) -> f32 {
        let p = row.as_mut_ptr();
        let vmax = _mm512_set1_ps(max);
        let mut sum = _mm512_setzero_ps();
        let full = row.len() / 16 * 16;
        let mut i = 0;
        while i < full {
            let e = exp_ps(_mm512_sub_ps(_mm512_loadu_ps(p.add(i)), vmax));
            _mm512_storeu_ps(p.add(i), e);
            sum = _mm512_add_ps(sum, e);
            i += 16;
        }
        if full < row.len() {
            let mask = tail_mask(row.len(), full);
            let e = exp_ps(_mm512_sub_ps(_mm512_maskz_loadu_ps(mask, p.add(full)), vmax));
            let e = _mm512_maskz_mov_ps(mask, e);
            _mm512_mask_storeu_ps(p.add(full), mask, e);
            sum = _mm512_add_ps(sum, e);
        }
        _mm512_reduce_add_ps(sum)
    }
}

#[inline(always)]
fn softmax_body<S: Scalar>(row: &mut [S]) -> bool {
    let max = row_max(row);
    if max == S::neg_infinity() {
        return false;
    }
    let inv = S::one() / exp_shift_sum(row, max);
    for v in row.iter_mut() {
        *v *= inv;
    }
    true
}

/// Softmax over the last axis of `logits + mask`. `mask` is either one row
/// (broadcast to every row) or a full tensor of the same size, with entries
/// in `{0, -inf}`.
pub fn masked_softmax<S: Scalar>(logits: &Tensor<S>, mask: &[S]) -> Result<Tensor<S>> {
    let n = logits.cols();
    if mask.len() != n && mask.len() != logits.len() {
        return Err(Error::Shape(format!(
            "mask of length {} for logits {:?}",
            mask.len(),
            logits.dims()
        )));
    }
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let m = if mask.len() == n { mask } else { &mask[r * n..(r + 1) * n] };
        let row = out.row_mut(r);
        for (v, &mv) in row.iter_mut().zip(m) {
            *v += mv;
        }
        if !softmax_row_in_place(row) {
            return Err(Error::FullyMasked { row: r });
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of softmax for one row: `dx = p ⊙ (dy − ⟨dy, p⟩)`.
pub fn softmax_backward_row<S: Scalar>(p: &[S], dy: &[S], dx: &mut [S]) {
    let dot = p.iter().zip(dy).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
    for ((d, &pi), &g) in dx.iter_mut().zip(p).zip(dy) {
        *d = pi * (g - dot);
    }
}

/// Saved statistics for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<S> {
    pub xhat: Tensor<S>,
    pub rstd: Vec<S>,
}

/// Layer normalization over the last axis.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, LayerNormCache<S>)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!(
            "layer_norm width {d}, gain {:?}, bias {:?}",
            gain.dims(),
            bias.dims()
        )));
    }
    let inv_d = S::lit(1.0 / d as f64);
    let eps = S::lit(eps);
    let mut out = Tensor::zeros(x.dims().to_vec());
    let mut xhat = Tensor::zeros(x.dims().to_vec());
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = lane_sum(row, |v| v) * inv_d;
        let var = lane_sum(row, |v| (v - mean) * (v - mean)) * inv_d;
        let rs = S::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        let o = out.row_mut(r);
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xh[j] = h;
            o[j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((out, LayerNormCache { xhat, rstd }))
}

/// Sum of `f(v)` over `xs` in eight interleaved partial sums, which the
/// compiler can keep in one vector register.
fn lane_sum<S: Scalar>(xs: &[S], f: impl Fn(S) -> S) -> S {
    let mut lanes = [S::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l = *l + f(v);
        }
    }
    let mut total = lanes.iter().fold(S::zero(), |a, &b| a + b);
    for &v in tail {
        total = total + f(v);
    }
    total
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<S: Scalar>(
    dy: &Tensor<S>,
    gain: &Tensor<S>,
    cache: &LayerNormCache<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let d = dy.cols();
    let inv_d = S::lit(1.0 / d as f64);
    let mut dx = Tensor::zeros(dy.dims().to_vec());
    let mut dgain = Tensor::zeros([d]);
    let mut dbias = Tensor::zeros([d]);
    let mut dxhat = vec![S::zero(); d];
    for r in 0..dy.rows() {
        let g_row = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..d {
            dgain.data_mut()[j] += g_row[j] * xh[j];
            dbias.data_mut()[j] += g_row[j];
            dxhat[j] = g_row[j] * gain.data()[j];
        }
        let sum_dxhat = dxhat.iter().fold(S::zero(), |a, &b| a + b);
        let sum_dxhat_xhat = dxhat
            .iter()
            .zip(xh)
            .fold(S::zero(), |a, (&b, &c)| a + b * c);
        let rs = cache.rstd[r];
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = rs * (dxhat[j] - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    #[cfg(target_arch = "x86_64")]
    {
        if S::DTYPE == DType::F32 && is_x86_feature_detected!("avx512f") {
            let mut out = Tensor::zeros(x.dims().to_vec());
            // SAFETY: DTYPE F32 means S is f32; feature detected at runtime.
            unsafe {
                let src = std::slice::from_raw_parts(x.data().as_ptr() as *const f32, x.len());
                let dst = std::slice::from_raw_parts_mut(out.data_mut().as_mut_ptr() as *mut f32, x.len());
                x86::gelu_f32(src, dst, GELU_C as f32, GELU_A as f32);
            }
            return out;
        }
    }
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let t = (c * (v + a * v * v * v)).tanh_fast();
            half * v * (S::one() + t)
        })
        .collect();
    Tensor::new(x.dims().to_vec(), data).expect("same shape")
}

pub fn gelu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let three_a = S::lit(3.0 * GELU_A);
    Tensor::from_fn(x.dims().to_vec(), |i| {
        let v = x.data()[i];
        let t = (c * (v + a * v * v * v)).tanh_fast();
        let dt = (S::one() - t * t) * c * (S::one() + three_a * v * v);
        dy.data()[i] * (half * (S::one() + t) + half * v * dt)
    })
}

/// `x[n×i] · w[i×o] + b`.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    if w.rank() != 2 || x.cols() != w.dims()[0] {
        return Err(Error::Shape(format!(
            "linear input {:?} vs weight {:?}",
            x.dims(),
            w.dims()
        )));
    }
    let (i, o) = (w.dims()[0], w.dims()[1]);
    let n = x.rows();
    let mut out = Tensor::zeros([n, o]);
    if let Some(b) = b {
        if b.len() != o {
            return Err(Error::Shape(format!("bias {:?} for width {o}", b.dims())));
        }
        for r in 0..n {
            out.row_mut(r).copy_from_slice(b.data());
        }
    }
    gemm(
        n,
        o,
        i,
        MatRef::row_major(x.data(), i),
        MatRef::row_major(w.data(), o),
        out.data_mut(),
        o,
        b.is_some(),
    );
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<S> {
    pub dx: Tensor<S>,
    pub dw: Tensor<S>,
    pub db: Tensor<S>,
}

/// Backward pass of [`linear`] for a 2-D input.
pub fn linear_backward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, dy: &Tensor<S>) -> Result<LinearGrads<S>> {
    let x2 = Tensor::new([x.rows(), x.cols()], x.data().to_vec())?;
    let dy2 = Tensor::new([dy.rows(), dy.cols()], dy.data().to_vec())?;
    let dx = matmul_nt(&dy2, w)?.reshape(x.dims().to_vec())?;
    let dw = matmul_tn(&x2, &dy2)?;
    let mut db = Tensor::zeros([dy.cols()]);
    for r in 0..dy2.rows() {
        for (acc, &g) in db.data_mut().iter_mut().zip(dy2.row(r)) {
            *acc += g;
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const NEG: f64 = f64::NEG_INFINITY;

    #[test]
    fn symmetric_logits_split_evenly() {
        let l = Tensor::<f64>::new([1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(masked_softmax(&l, &[0.0, 0.0]).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn single_survivor_takes_all_mass() {
        let l = Tensor::<f64>::new([1, 2], vec![5.0, 5.0]).unwrap();
        assert_eq!(masked_softmax(&l, &[0.0, NEG]).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn matches_direct_formula() {
        let l = Tensor::<f64>::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let out = masked_softmax(&l, &[0.0; 3]).unwrap();
        let z: f64 = (1..=3).map(|v| (v as f64).exp()).sum();
        for (i, &p) in out.data().iter().enumerate() {
            assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let l = Tensor::<f64>::new([2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let mask = [0.0, 0.0, NEG, NEG];
        assert!(matches!(
            masked_softmax(&l, &mask),
            Err(Error::FullyMasked { row: 1 })
        ));
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_shift_invariant(
            vals in proptest::collection::vec(-20.0f64..20.0, 40),
            keep in proptest::collection::vec(any::<bool>(), 40),
            shift in -50.0f64..50.0,
        ) {
            let mut mask: Vec<f64> = keep.iter().map(|&k| if k { 0.0 } else { NEG }).collect();
            for r in 0..4 {
                mask[r * 10] = 0.0;
            }
            let l = Tensor::new([4, 10], vals.clone()).unwrap();
            let p = masked_softmax(&l, &mask).unwrap();
            for r in 0..4 {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            for (i, &m) in mask.iter().enumerate() {
                if m == NEG {
                    prop_assert_eq!(p.data()[i], 0.0);
                }
            }
            let shifted = Tensor::new([4, 10], vals.iter().map(|v| v + shift).collect()).unwrap();
            let q = masked_softmax(&shifted, &mask).unwrap();
            prop_assert!(p.max_abs_diff(&q) < 1e-6);
        }
    }

    #[test]
    fn f32_softmax_close_to_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Tensor::<f64>::from_fn([3, 100], |_| rng.gen_range(-10.0..10.0));
        let p64 = masked_softmax(&l, &[0.0; 100]).unwrap();
        let p32 = masked_softmax(&l.cast::<f32>(), &[0.0; 100]).unwrap();
        assert!(p64.max_abs_diff(&p32.cast()) < 1e-6);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::from_fn([3, 6], |_| rng.gen_range(-2.0..2.0));
        let g = Tensor::<f64>::from_fn([6], |_| rng.gen_range(0.5..1.5));
        let b = Tensor::<f64>::from_fn([6], |_| rng.gen_range(-0.5..0.5));
        let w = Tensor::<f64>::from_fn([3, 6], |_| rng.gen_range(-1.0..1.0));
        let objective = |x: &Tensor<f64>| {
            let (y, _) = layer_norm(x, &g, &b, 1e-6).unwrap();
            y.data().iter().zip(w.data()).map(|(a, c)| a * c).sum::<f64>()
        };
        let (_, cache) = layer_norm(&x, &g, &b, 1e-6).unwrap();
        let (dx, dg, _) = layer_norm_backward(&w, &g, &cache);
        let fd = finite_difference_gradient(objective, &x, 1e-6).unwrap();
        assert!(dx.max_abs_diff(&fd) < 1e-7);
        let fd_g = finite_difference_gradient(
            |g: &Tensor<f64>| {
                let (y, _) = layer_norm(&x, g, &b, 1e-6).unwrap();
                y.data().iter().zip(w.data()).map(|(a, c)| a * c).sum::<f64>()
            },
            &g,
            1e-6,
        )
        .unwrap();
        assert!(dg.max_abs_diff(&fd_g) < 1e-7);
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        let x = Tensor::<f64>::from_fn([9], |i| i as f64 - 4.3);
        let ones = Tensor::filled([9], 1.0);
        let analytic = gelu_backward(&x, &ones);
        let fd = finite_difference_gradient(|x: &Tensor<f64>| gelu(x).sum(), &x, 1e-6).unwrap();
        assert!(analytic.max_abs_diff(&fd) < 1e-8);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::from_fn([4, 3], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::<f64>::from_fn([3, 5], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn([5], |_| rng.gen_range(-1.0..1.0));
        let dy = Tensor::<f64>::from_fn([4, 5], |_| rng.gen_range(-1.0..1.0));
        let dot = |y: &Tensor<f64>| y.data().iter().zip(dy.data()).map(|(a, c)| a * c).sum::<f64>();
        let grads = linear_backward(&x, &w, &dy).unwrap();
        let fdx = finite_difference_gradient(|x: &Tensor<f64>| dot(&linear(x, &w, Some(&b)).unwrap()), &x, 1e-6).unwrap();
        let fdw = finite_difference_gradient(|w: &Tensor<f64>| dot(&linear(&x, w, Some(&b)).unwrap()), &w, 1e-6).unwrap();
        let fdb = finite_difference_gradient(|b: &Tensor<f64>| dot(&linear(&x, &w, Some(b)).unwrap()), &b, 1e-6).unwrap();
        assert!(grads.dx.max_abs_diff(&fdx) < 1e-8);
        assert!(grads.dw.max_abs_diff(&fdw) < 1e-8);
        assert!(grads.db.max_abs_diff(&fdb) < 1e-8);
    }
}
