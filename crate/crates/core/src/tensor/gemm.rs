//! Packed matrix multiply with a deterministic accumulation order.
//!
//! Each output element is a single fused-multiply-add chain over the inner
//! dimension, in increasing index order. Blocking only changes which elements
//! are computed together, never the order of the chain, so results are
//! bit-identical to a naive `acc = a.mul_add(b, acc)` loop and identical
//! across the SIMD code paths selected at runtime.

use num_traits::Float;

/// Strided read-only view of a matrix.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Copy> MatRef<'a, T> {
    /// Row-major `rows × cols` matrix.
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }

    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.rs + j * self.cs]
    }
}

#[inline(always)]
fn micro_kernel<T: Float, const MR: usize, const NR: usize>(
    panel_a: &[T],
    panel_b: &[T],
    mut acc: [[T; NR]; MR],
) -> [[T; NR]; MR] {
    for (pa, pb) in panel_a.chunks_exact(MR).zip(panel_b.chunks_exact(NR)) {
        let pa: &[T; MR] = pa.try_into().unwrap();
        let pb: &[T; NR] = pb.try_into().unwrap();
        for ii in 0..MR {
            for jj in 0..NR {
                acc[ii][jj] = pa[ii].mul_add(pb[jj], acc[ii][jj]);
            }
        }
    }
    acc
}

/// Depth of one packed block of the inner dimension.
const KC: usize = 256;
/// Columns of B packed per block.
const NC: usize = 1024;

/// Packs all of A into `MR`-row panels laid out `[panel][p][MR]`, zero padded.
fn pack_a<T: Float, const MR: usize>(m: usize, k: usize, a: MatRef<'_, T>) -> Vec<T> {
    let m_panels = m.div_ceil(MR);
    let mut packed = vec![T::zero(); m_panels * k * MR];
    for ip in 0..m_panels {
        let i0 = ip * MR;
        let mr = MR.min(m - i0);
        let panel = &mut packed[ip * k * MR..(ip + 1) * k * MR];
        if a.rs == 1 {
            // columns of A are contiguous
            for p in 0..k {
                let src = &a.data[p * a.cs + i0..p * a.cs + i0 + mr];
                panel[p * MR..p * MR + mr].copy_from_slice(src);
            }
        } else {
            for ii in 0..mr {
                for p in 0..k {
                    panel[p * MR + ii] = a.at(i0 + ii, p);
                }
            }
        }
    }
    packed
}

/// Packs `B[pc..pc+kc, jc..jc+nc]` into `NR`-column panels laid out
/// `[panel][p][NR]`, zero padded.
fn pack_b<T: Float, const NR: usize>(b: MatRef<'_, T>, pc: usize, kc: usize, jc: usize, nc: usize, out: &mut [T]) {
    let panels = nc.div_ceil(NR);
    out[..panels * kc * NR].iter_mut().for_each(|v| *v = T::zero());
    if b.cs == 1 {
        for p in 0..kc {
            let row = &b.data[(pc + p) * b.rs + jc..(pc + p) * b.rs + jc + nc];
            for (jp, chunk) in row.chunks(NR).enumerate() {
                let dst = jp * kc * NR + p * NR;
                out[dst..dst + chunk.len()].copy_from_slice(chunk);
            }
        }
    } else if b.rs == 1 {
        for jj in 0..nc {
            let col = &b.data[(jc + jj) * b.cs + pc..(jc + jj) * b.cs + pc + kc];
            let base = (jj / NR) * kc * NR + jj % NR;
            for (p, v) in col.iter().enumerate() {
                out[base + p * NR] = *v;
            }
        }
    } else {
        for p in 0..kc {
            for jj in 0..nc {
                out[(jj / NR) * kc * NR + p * NR + jj % NR] = b.at(pc + p, jc + jj);
            }
        }
    }
}

#[inline(always)]
fn gemm_impl<T: Float, const MR: usize, const NR: usize>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let m_panels = m.div_ceil(MR);
    let packed_a = pack_a::<T, MR>(m, k, a);
    let mut packed_b = vec![T::zero(); KC.min(k) * NC.min(n).div_ceil(NR) * NR];

    // Blocks over the inner dimension run in increasing order and carry the
    // partial sums through C, so each element is still one ordered chain.
    for pc in (0..k).step_by(KC) {
        let kc = KC.min(k - pc);
        let load = accumulate || pc > 0;
        for jc in (0..n).step_by(NC) {
            let nc = NC.min(n - jc);
            pack_b::<T, NR>(b, pc, kc, jc, nc, &mut packed_b);
            for jp in 0..nc.div_ceil(NR) {
                let j0 = jc + jp * NR;
                let nr = NR.min(n - j0);
                let panel_b = &packed_b[jp * kc * NR..(jp + 1) * kc * NR];
                for ip in 0..m_panels {
                    let i0 = ip * MR;
                    let mr = MR.min(m - i0);
                    let mut acc = [[T::zero(); NR]; MR];
                    if load {
                        for ii in 0..mr {
                            let row = &c[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + nr];
                            acc[ii][..nr].copy_from_slice(row);
                        }
                    }
                    let panel_a = &packed_a[(ip * k + pc) * MR..(ip * k + pc + kc) * MR];
                    acc = micro_kernel::<T, MR, NR>(panel_a, panel_b, acc);
                    for ii in 0..mr {
                        c[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + nr].copy_from_slice(&acc[ii][..nr]);
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::*;

    #[target_feature(enable = "avx512f,fma")]
    pub(super) unsafe fn gemm_avx512<T: Float, const MR: usize, const NR: usize>(
        m: usize,
        k: usize,
        n: usize,
        a: MatRef<'_, T>,
        b: MatRef<'_, T>,
        c: &mut [T],
        accumulate: bool,
    ) {
        gemm_impl::<T, MR, NR>(m, k, n, a, b, c, accumulate)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn gemm_avx2<T: Float, const MR: usize, const NR: usize>(
        m: usize,
        k: usize,
        n: usize,
        a: MatRef<'_, T>,
        b: MatRef<'_, T>,
        c: &mut [T],
        accumulate: bool,
    ) {
        gemm_impl::<T, MR, NR>(m, k, n, a, b, c, accumulate)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Isa {
    Avx512,
    Avx2,
    Portable,
}

fn isa() -> Isa {
    use std::sync::OnceLock;
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("fma") {
                return Isa::Avx512;
            }
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                return Isa::Avx2;
            }
        }
        Isa::Portable
    })
}

pub(crate) fn gemm_f32(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, f32>,
    b: MatRef<'_, f32>,
    c: &mut [f32],
    accumulate: bool,
) {
    match isa() {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: the required CPU features were detected at runtime.
        Isa::Avx512 => unsafe { x86::gemm_avx512::<f32, 6, 32>(m, k, n, a, b, c, accumulate) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: as above.
        Isa::Avx2 => unsafe { x86::gemm_avx2::<f32, 6, 16>(m, k, n, a, b, c, accumulate) },
        _ => gemm_impl::<f32, 4, 8>(m, k, n, a, b, c, accumulate),
    }
}

pub(crate) fn gemm_f64(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, f64>,
    b: MatRef<'_, f64>,
    c: &mut [f64],
    accumulate: bool,
) {
    match isa() {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: the required CPU features were detected at runtime.
        Isa::Avx512 => unsafe { x86::gemm_avx512::<f64, 6, 16>(m, k, n, a, b, c, accumulate) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: as above.
        Isa::Avx2 => unsafe { x86::gemm_avx2::<f64, 6, 8>(m, k, n, a, b, c, accumulate) },
        _ => gemm_impl::<f64, 4, 4>(m, k, n, a, b, c, accumulate),
    }
}
