//! Blocked matrix multiply with a fixed accumulation order.
//!
//! Every output element is the fused-multiply-add chain
//! `acc = fma(a[i,p], b[p,j], acc)` for `p = 0..k`, starting from zero (or
//! from the existing output when accumulating). Blocking, packing and row
//! splitting never change that chain, so results are bit-identical to a
//! naive `mul_add` triple loop and independent of how many rows are
//! computed together.

use std::cell::{Cell, RefCell};

use rayon::prelude::*;

use super::tensor::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

const NR: usize = 32;
const KC: usize = 256;
const NC: usize = 2048;
const MC: usize = 96;

/// Strided read-only matrix view: element `(i, j)` lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, S> {
    pub data: &'a [S],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> MatRef<'a, S> {
    pub fn row_major(data: &'a [S], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// View of `Aᵀ` where `A` is row-major with `cols` columns.
    pub fn transposed(data: &'a [S], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn offset(self, i: usize, j: usize) -> Self {
        Self {
            data: &self.data[i * self.rs + j * self.cs..],
            rs: self.rs,
            cs: self.cs,
        }
    }
}

thread_local! {
    static INTRA_OP: Cell<bool> = const { Cell::new(false) };
    /// Reused B-panel buffer, in 8-byte words so it can hold either scalar.
    static PACK: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` with row-parallel matrix multiplies on a pool of `threads`
/// workers. Results are unchanged (rows are independent); only wall time is.
pub fn with_intra_op_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| {
            INTRA_OP.with(|c| c.set(true));
            let out = f();
            INTRA_OP.with(|c| c.set(false));
            out
        }),
        Err(_) => f(),
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` over strided views; `c` has row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, S>,
    b: MatRef<'_, S>,
    c: &mut [S],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * ldc + n, "gemm output too small");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * ldc..i * ldc + n].fill(S::zero());
            }
        }
        return;
    }
    let parallel = INTRA_OP.with(|f| f.get()) && rayon::current_num_threads() > 1 && m >= 16;
    if parallel {
        let chunks = rayon::current_num_threads();
        let rows = m.div_ceil(chunks);
        c.par_chunks_mut(rows * ldc)
            .enumerate()
            .for_each(|(ci, c_chunk)| {
                let i0 = ci * rows;
                if i0 >= m {
                    return;
                }
                let mm = rows.min(m - i0);
                gemm_dispatch(mm, n, k, a.offset(i0, 0), b, c_chunk, ldc, accumulate);
            });
    } else {
        gemm_dispatch(m, n, k, a, b, c, ldc, accumulate);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_dispatch<S: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, S>,
    b: MatRef<'_, S>,
    c: &mut [S],
    ldc: usize,
    accumulate: bool,
) {
    let len = KC.min(k) * NC.min(n.div_ceil(NR) * NR);
    PACK.with(|cell| {
        let mut words = cell.borrow_mut();
        let needed = (len * std::mem::size_of::<S>()).div_ceil(8);
        if words.len() < needed {
            words.resize(needed, 0.0);
        }
        // SAFETY: the buffer spans at least `len` scalars, f64 alignment
        // covers both scalar types, and every bit pattern is a valid float.
        let pack = unsafe { std::slice::from_raw_parts_mut(words.as_mut_ptr() as *mut S, len) };
        gemm_kernel(m, n, k, a, b, c, ldc, accumulate, pack)
    })
}

#[allow(clippy::too_many_arguments)]
fn gemm_kernel<S: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, S>,
    b: MatRef<'_, S>,
    c: &mut [S],
    ldc: usize,
    accumulate: bool,
    pack: &mut [S],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            match S::DTYPE {
                DType::F32 => {
                    // SAFETY: `Scalar` is sealed; DTYPE F32 means S is f32.
                    let (a, b, c, pack) = unsafe { recast::<S, f32>(a, b, c, pack) };
                    return unsafe { x86::gemm_avx512_f32(m, n, k, a, b, c, ldc, accumulate, pack) };
                }
                DType::F64 => {
                    // SAFETY: as above, S is f64.
                    let (a, b, c, pack) = unsafe { recast::<S, f64>(a, b, c, pack) };
                    return unsafe { x86::gemm_avx512_f64(m, n, k, a, b, c, ldc, accumulate, pack) };
                }
            }
        }
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: features detected at runtime.
            return unsafe { x86::gemm_fma(m, n, k, a, b, c, ldc, accumulate, pack) };
        }
    }
    gemm_blocked::<S, Portable>(m, n, k, a, b, c, ldc, accumulate, pack)
}

/// Reinterprets views of `S` as views of `T`. Caller guarantees `S == T`.
#[cfg(target_arch = "x86_64")]
unsafe fn recast<'a, 'c, S, T>(
    a: MatRef<'a, S>,
    b: MatRef<'a, S>,
    c: &'c mut [S],
    pack: &'c mut [S],
) -> (MatRef<'a, T>, MatRef<'a, T>, &'c mut [T], &'c mut [T]) {
    debug_assert_eq!(std::mem::size_of::<S>(), std::mem::size_of::<T>());
    let cast = |m: MatRef<'a, S>| MatRef {
        data: std::slice::from_raw_parts(m.data.as_ptr() as *const T, m.data.len()),
        rs: m.rs,
        cs: m.cs,
    };
    (
        cast(a),
        cast(b),
        std::slice::from_raw_parts_mut(c.as_mut_ptr() as *mut T, c.len()),
        std::slice::from_raw_parts_mut(pack.as_mut_ptr() as *mut T, pack.len()),
    )
}

/// Register-blocked inner kernel: `R` rows of A against one packed B panel.
trait Micro<S: Scalar> {
    const MR: usize;

    /// # Safety
    /// `r <= MR`, `a` covers `r` rows and `kc` columns, `bp` holds `kc * NR`
    /// values, and `c` covers `r` rows of `ncols` values at stride `ldc`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn run(
        r: usize,
        kc: usize,
        a: MatRef<'_, S>,
        bp: &[S],
        c: &mut [S],
        ldc: usize,
        ncols: usize,
        from_c: bool,
    );
}

struct Portable;

impl<S: Scalar> Micro<S> for Portable {
    const MR: usize = 4;

    #[inline(always)]
    unsafe fn run(
        r: usize,
        kc: usize,
        a: MatRef<'_, S>,
        bp: &[S],
        c: &mut [S],
        ldc: usize,
        ncols: usize,
        from_c: bool,
    ) {
        match r {
            4 => micro::<S, 4>(kc, a, bp, c, ldc, ncols, from_c),
            3 => micro::<S, 3>(kc, a, bp, c, ldc, ncols, from_c),
            2 => micro::<S, 2>(kc, a, bp, c, ldc, ncols, from_c),
            _ => micro::<S, 1>(kc, a, bp, c, ldc, ncols, from_c),
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    use super::{gemm_blocked, MatRef, Micro, Portable, NR};

    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    pub unsafe fn gemm_fma<S: crate::numerics::Scalar>(
        m: usize,
        n: usize,
        k: usize,
        a: MatRef<'_, S>,
        b: MatRef<'_, S>,
        c: &mut [S],
        ldc: usize,
        accumulate: bool,
        pack: &mut [S],
    ) {
        gemm_blocked::<S, Portable>(m, n, k, a, b, c, ldc, accumulate, pack)
    }

    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    pub unsafe fn gemm_avx512_f32(
        m: usize,
        n: usize,
        k: usize,
        a: MatRef<'_, f32>,
        b: MatRef<'_, f32>,
        c: &mut [f32],
        ldc: usize,
        accumulate: bool,
        pack: &mut [f32],
    ) {
        gemm_blocked::<f32, Avx512F32>(m, n, k, a, b, c, ldc, accumulate, pack)
    }

    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    pub unsafe fn gemm_avx512_f64(
        m: usize,
        n: usize,
        k: usize,
        a: MatRef<'_, f64>,
        b: MatRef<'_, f64>,
        c: &mut [f64],
        ldc: usize,
        accumulate: bool,
        pack: &mut [f64],
    ) {
        gemm_blocked::<f64, Avx512F64>(m, n, k, a, b, c, ldc, accumulate, pack)
    }

    struct Avx512F32;
    struct Avx512F64;

    #[inline(always)]
    fn lane_mask(ncols: usize, offset: usize, width: usize) -> u16 {
        let live = ncols.saturating_sub(offset).min(width);
        ((1u32 << live) - 1) as u16
    }

    impl Micro<f32> for Avx512F32 {
        const MR: usize = 6;

        #[inline(always)]
        unsafe fn run(
            r: usize,
            kc: usize,
            a: MatRef<'_, f32>,
            bp: &[f32],
            c: &mut [f32],
            ldc: usize,
            ncols: usize,
            from_c: bool,
        ) {
            match r {
                6 => f32_rows::<6>(kc, a, bp, c, ldc, ncols, from_c),
                5 => f32_rows::<5>(kc, a, bp, c, ldc, ncols, from_c),
                4 => f32_rows::<4>(kc, a, bp, c, ldc, ncols, from_c),
                3 => f32_rows::<3>(kc, a, bp, c, ldc, ncols, from_c),
                2 => f32_rows::<2>(kc, a, bp, c, ldc, ncols, from_c),
                _ => f32_rows::<1>(kc, a, bp, c, ldc, ncols, from_c),
            }
        }
    }

    #[inline(always)]
    unsafe fn f32_rows<const R: usize>(
        kc: usize,
        a: MatRef<'_, f32>,
        bp: &[f32],
        c: &mut [f32],
        ldc: usize,
        ncols: usize,
        from_c: bool,
    ) {
        const W: usize = 16;
        const V: usize = NR / W;
        debug_assert!(bp.len() >= kc * NR);
        debug_assert!(c.len() >= (R - 1) * ldc + ncols);
        let masks: [u16; V] = std::array::from_fn(|v| lane_mask(ncols, v * W, W));
        let mut acc = [[_mm512_setzero_ps(); V]; R];
        let cp = c.as_mut_ptr();
        if from_c {
            for (r, row) in acc.iter_mut().enumerate() {
                for (v, reg) in row.iter_mut().enumerate() {
                    *reg = _mm512_maskz_loadu_ps(masks[v], cp.add(r * ldc + v * W));
                }
            }
        }
        let ap = a.data.as_ptr();
        let bptr = bp.as_ptr();
        for p in 0..kc {
            let mut bv = [_mm512_setzero_ps(); V];
            for (v, reg) in bv.iter_mut().enumerate() {
                *reg = _mm512_loadu_ps(bptr.add(p * NR + v * W));
            }
            for (r, row) in acc.iter_mut().enumerate() {
                let av = _mm512_set1_ps(*ap.add(r * a.rs + p * a.cs));
                for v in 0..V {
                    row[v] = _mm512_fmadd_ps(av, bv[v], row[v]);
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            for (v, reg) in row.iter().enumerate() {
                _mm512_mask_storeu_ps(cp.add(r * ldc + v * W), masks[v], *reg);
            }
        }
    }

    impl Micro<f64> for Avx512F64 {
        const MR: usize = 4;
        
        #[inline(always)]
        unsafe fn run(
            r: usize,
            kc: usize,
            a: MatRef<'_, f64>,
            bp: &[f64],
            c: &mut [f64],
            ldc: usize,
            ncols: usize,
            from_c: bool,
        ) {
            match r {
                4 => f64_rows::<4>(kc, a, bp, c, ldc, ncols, from_c),
                3 => f64_rows::<3>(kc, a, bp, c, ldc, ncols, from_c),
                2 => f64_rows::<2>(kc, a, bp, c, ldc, ncols, from_c),
                _ => f64_rows::<1>(kc, a, bp, c, ldc, ncols, from_c),
            }
        }
    }

    #[inline(always)]
    unsafe fn f64_rows<const R: usize>(
        kc: usize,
        a: MatRef<'_, f64>,
        bp: &[f64],
        c: &mut [f64],
        ldc: usize,
        ncols: usize,
        from_c: bool,
    ) {
        const W: usize = 8;
        const V: usize = NR / W;
        debug_assert!(bp.len() >= kc * NR);
        debug_assert!(c.len() >= (R - 1) * ldc + ncols);
        let masks: [u8; V] = std::array::from_fn(|v| lane_mask(ncols, v * W, W) as u8);
        let mut acc = [[_mm512_setzero_pd(); V]; R];
        let cp = c.as_mut_ptr();
        if from_c {
            for (r, row) in acc.iter_mut().enumerate() {
                for (v, reg) in row.iter_mut().enumerate() {
                    *reg = _mm512_maskz_loadu_pd(masks[v], cp.add(r * ldc + v * W));
                }
            }
        }
        let ap = a.data.as_ptr();
        let bptr = bp.as_ptr();
        for p in 0..kc {
            let mut bv = [_mm512_setzero_pd(); V];
            for (v, reg) in bv.iter_mut().enumerate() {
                *reg = _mm512_loadu_pd(bptr.add(p * NR + v * W));
            }
            for (r, row) in acc.iter_mut().enumerate() {
                let av = _mm512_set1_pd(*ap.add(r * a.rs + p * a.cs));
                for v in 0..V {
                    row[v] = _mm512_fmadd_pd(av, bv[v], row[v]);
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            for (v, reg) in row.iter().enumerate() {
                _mm512_mask_storeu_pd(cp.add(r * ldc + v * W), masks[v], *reg);
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_blocked<S: Scalar, K: Micro<S>>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, S>,
    b: MatRef<'_, S>,
    c: &mut [S],
    ldc: usize,
    accumulate: bool,
    pack: &mut [S],
) {
    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        let panels = nc.div_ceil(NR);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            pack_b(pack, b, pc, kc, jc, nc);
            let from_c = accumulate || pc > 0;
            for mc0 in (0..m).step_by(MC) {
                let mc_end = (mc0 + MC).min(m);
                for panel in 0..panels {
                    let j0 = jc + panel * NR;
                    let ncols = NR.min(n - j0);
                    let bp = &pack[panel * kc * NR..(panel + 1) * kc * NR];
                    let mut ic = mc0;
                    while ic < mc_end {
                        let mr = K::MR.min(mc_end - ic);
                        let a_blk = a.offset(ic, pc);
                        assert!((mr - 1) * a_blk.rs + (kc - 1) * a_blk.cs < a_blk.data.len());
                        let c_blk = &mut c[ic * ldc + j0..];
                        // SAFETY: extents of a_blk checked above; bp holds
                        // kc*NR values; c covers m rows of n values.
                        unsafe { K::run(mr, kc, a_blk, bp, c_blk, ldc, ncols, from_c) };
                        ic += mr;
                    }
                }
            }
        }
    }
}

/// Packs `b[pc..pc+kc, jc..jc+nc]` into NR-wide column panels, zero padded.
#[inline(always)]
fn pack_b<S: Scalar>(pack: &mut [S], b: MatRef<'_, S>, pc: usize, kc: usize, jc: usize, nc: usize) {
    let panels = nc.div_ceil(NR);
    for panel in 0..panels {
        let j0 = jc + panel * NR;
        let w = NR.min(jc + nc - j0);
        let dst = &mut pack[panel * kc * NR..(panel + 1) * kc * NR];
        if b.rs == 1 && b.cs != 1 {
            // Transposed source: walk each contiguous source row once.
            for j in 0..w {
                let base = pc + (j0 + j) * b.cs;
                for (p, &v) in b.data[base..base + kc].iter().enumerate() {
                    dst[p * NR + j] = v;
                }
            }
            for p in 0..kc {
                dst[p * NR + w..(p + 1) * NR].fill(S::zero());
            }
            continue;
        }
        for p in 0..kc {
            let row = &mut dst[p * NR..(p + 1) * NR];
            let base = (pc + p) * b.rs + j0 * b.cs;
            if b.cs == 1 {
                row[..w].copy_from_slice(&b.data[base..base + w]);
            } else {
                for (j, v) in row[..w].iter_mut().enumerate() {
                    *v = b.data[base + j * b.cs];
                }
            }
            row[w..].fill(S::zero());
        }
    }
}

#[inline(always)]
fn micro<S: Scalar, const R: usize>(
    kc: usize,
    a: MatRef<'_, S>,
    bp: &[S],
    c: &mut [S],
    ldc: usize,
    ncols: usize,
    from_c: bool,
) {
    let mut acc = [[S::zero(); NR]; R];
    if from_c {
        for (r, acc_r) in acc.iter_mut().enumerate() {
            acc_r[..ncols].copy_from_slice(&c[r * ldc..r * ldc + ncols]);
        }
    }
    for p in 0..kc {
        let brow: &[S; NR] = bp[p * NR..p * NR + NR].try_into().unwrap();
        for (r, acc_r) in acc.iter_mut().enumerate() {
            let av = a.data[r * a.rs + p * a.cs];
            for j in 0..NR {
                acc_r[j] = av.mul_add(brow[j], acc_r[j]);
            }
        }
    }
    for (r, acc_r) in acc.iter().enumerate() {
        c[r * ldc..r * ldc + ncols].copy_from_slice(&acc_r[..ncols]);
    }
}

fn check_rank2<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!("{what} must be rank 2, got {:?}", t.dims())));
    }
    Ok((t.dims()[0], t.dims()[1]))
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = check_rank2(a, "lhs")?;
    let (k2, n) = check_rank2(b, "rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut out = Tensor::zeros([m, n]);
    gemm(
        m,
        n,
        k,
        MatRef::row_major(a.data(), k),
        MatRef::row_major(b.data(), n),
        out.data_mut(),
        n,
        false,
    );
    Ok(out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = check_rank2(a, "lhs")?;
    let (n, k2) = check_rank2(b, "rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul_nt inner dims {k} vs {k2}")));
    }
    let mut out = Tensor::zeros([m, n]);
    gemm(
        m,
        n,
        k,
        MatRef::row_major(a.data(), k),
        MatRef::transposed(b.data(), k),
        out.data_mut(),
        n,
        false,
    );
    Ok(out)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (k, m) = check_rank2(a, "lhs")?;
    let (k2, n) = check_rank2(b, "rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul_tn inner dims {k} vs {k2}")));
    }
    let mut out = Tensor::zeros([m, n]);
    gemm(
        m,
        n,
        k,
        MatRef::transposed(a.data(), m),
        MatRef::row_major(b.data(), n),
        out.data_mut(),
        n,
        false,
    );
    Ok(out)
}
