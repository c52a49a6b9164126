//! Raw forward/backward kernels over flat row-major buffers.
//!
//! Shapes are validated by the tape before these are called.

use crate::scalar::Scalar;

use super::gemm::MatRef;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies inside `[0, w)`.
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds input patches into a `[c_in·kh·kw, oh·ow]` matrix, zero padded.
fn im2col<T: Scalar>(x: &[T], g: &Conv2dGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    let mut cols = vec![T::zero(); g.patch() * n];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(oh, g.stride, ky, g.pad, g.h);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(ow, g.stride, kx, g.pad, g.w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * ow + ox0..oy * ow + ox1];
                    let ix0 = ox0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        drow.copy_from_slice(&src[ix0..ix0 + drow.len()]);
                    } else {
                        for (d, s) in drow.iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Conv2dGeom, dx: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(oh, g.stride, ky, g.pad, g.h);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(ow, g.stride, kx, g.pad, g.w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * ow + ox0..oy * ow + ox1];
                    let ix0 = ox0 * g.stride + kx - g.pad;
                    for (d, v) in drow[ix0..].iter_mut().step_by(g.stride).zip(srow) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], k: &[T], g: &Conv2dGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    let mut out = vec![T::zero(); g.c_out * n];
    let patch = g.patch();
    if g.is_pointwise() {
        T::gemm(g.c_out, patch, n, MatRef::row_major(k, patch), MatRef::row_major(x, n), &mut out, false);
    } else {
        let cols = im2col(x, g);
        T::gemm(g.c_out, patch, n, MatRef::row_major(k, patch), MatRef::row_major(&cols, n), &mut out, false);
    }
    out
}

/// Returns `(d_input, d_kernel)`; either is skipped when not requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    k: &[T],
    g: &Conv2dGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    let patch = g.patch();
    let pointwise = g.is_pointwise();
    let dk = want_dk.then(|| {
        let mut dk = vec![T::zero(); g.c_out * patch];
        if pointwise {
            T::gemm(g.c_out, n, patch, MatRef::row_major(dout, n), MatRef::transposed(x, n), &mut dk, false);
        } else {
            let cols = im2col(x, g);
            T::gemm(g.c_out, n, patch, MatRef::row_major(dout, n), MatRef::transposed(&cols, n), &mut dk, false);
        }
        dk
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); patch * n];
        T::gemm(patch, g.c_out, n, MatRef::transposed(k, patch), MatRef::row_major(dout, n), &mut dcols, false);
        if pointwise {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    (dx, dk)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct CircGeom {
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub taps: usize,
    pub dilation: usize,
}

impl CircGeom {
    fn source(&self, p: usize, tap: usize) -> usize {
        let half = (self.taps / 2) as isize;
        let off = (tap as isize - half) * self.dilation as isize;
        (p as isize + off).rem_euclid(self.len as isize) as usize
    }
}

fn circ_cols<T: Scalar>(f: &[T], g: &CircGeom) -> Vec<T> {
    let k = g.len;
    let mut cols = vec![T::zero(); g.c_in * g.taps * k];
    for c in 0..g.c_in {
        let src = &f[c * k..(c + 1) * k];
        for t in 0..g.taps {
            // dst[p] = src[(p + shift) mod k]: a rotation by `shift`
            let shift = g.source(0, t);
            let dst = &mut cols[(c * g.taps + t) * k..(c * g.taps + t + 1) * k];
            dst[..k - shift].copy_from_slice(&src[shift..]);
            dst[k - shift..].copy_from_slice(&src[..shift]);
        }
    }
    cols
}

pub(crate) fn circ_conv1d_forward<T: Scalar>(f: &[T], k: &[T], g: &CircGeom) -> Vec<T> {
    let patch = g.c_in * g.taps;
    let mut out = vec![T::zero(); g.c_out * g.len];
    if g.taps == 1 {
        T::gemm(g.c_out, patch, g.len, MatRef::row_major(k, patch), MatRef::row_major(f, g.len), &mut out, false);
    } else {
        let cols = circ_cols(f, g);
        T::gemm(g.c_out, patch, g.len, MatRef::row_major(k, patch), MatRef::row_major(&cols, g.len), &mut out, false);
    }
    out
}

pub(crate) fn circ_conv1d_backward<T: Scalar>(
    dout: &[T],
    f: &[T],
    k: &[T],
    g: &CircGeom,
    want_df: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let patch = g.c_in * g.taps;
    let n = g.len;
    let dk = want_dk.then(|| {
        let mut dk = vec![T::zero(); g.c_out * patch];
        if g.taps == 1 {
            T::gemm(g.c_out, n, patch, MatRef::row_major(dout, n), MatRef::transposed(f, n), &mut dk, false);
        } else {
            let cols = circ_cols(f, g);
            T::gemm(g.c_out, n, patch, MatRef::row_major(dout, n), MatRef::transposed(&cols, n), &mut dk, false);
        }
        dk
    });
    let df = want_df.then(|| {
        let mut dcols = vec![T::zero(); patch * n];
        T::gemm(patch, g.c_out, n, MatRef::transposed(k, patch), MatRef::row_major(dout, n), &mut dcols, false);
        if g.taps == 1 {
            return dcols;
        }
        let mut df = vec![T::zero(); g.c_in * n];
        for c in 0..g.c_in {
            let dst = &mut df[c * n..(c + 1) * n];
            for t in 0..g.taps {
                let src = &dcols[(c * g.taps + t) * n..(c * g.taps + t + 1) * n];
                let shift = g.source(0, t);
                dst[shift..].iter_mut().zip(&src[..n - shift]).for_each(|(d, v)| *d += *v);
                dst[..shift].iter_mut().zip(&src[n - shift..]).for_each(|(d, v)| *d += *v);
            }
        }
        df
    });
    (df, dk)
}

/// Source taps for one output index of a 2× align-corners=false upsample.
#[inline]
fn up_taps(o: usize, len: usize) -> [(usize, f64); 2] {
    let i = o / 2;
    let last = len - 1;
    if o.is_multiple_of(2) {
        [(i.saturating_sub(1), 0.25), (i, 0.75)]
    } else {
        [(i, 0.75), ((i + 1).min(last), 0.25)]
    }
}

pub(crate) fn upsample2x_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let ty = up_taps(oy, h);
            for ox in 0..ow {
                let tx = up_taps(ox, w);
                let mut acc = T::zero();
                for &(sy, wy) in &ty {
                    for &(sx, wx) in &tx {
                        acc += T::lit(wy * wx) * src[sy * w + sx];
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Scalar>(dout: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = &dout[ch * oh * ow..(ch + 1) * oh * ow];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let ty = up_taps(oy, h);
            for ox in 0..ow {
                let tx = up_taps(ox, w);
                let gv = g[oy * ow + ox];
                for &(sy, wy) in &ty {
                    for &(sx, wx) in &tx {
                        d[sy * w + sx] += T::lit(wy * wx) * gv;
                    }
                }
            }
        }
    }
    dx
}

/// `out[i, y, x] = Σ_c t[c, i] · s[c, y, x]` with `i` running over target pixels.
pub(crate) fn correlate_forward<T: Scalar>(t: &[T], s: &[T], c: usize, nt: usize, ns: usize) -> Vec<T> {
    let mut out = vec![T::zero(); nt * ns];
    T::gemm(nt, c, ns, MatRef::transposed(t, nt), MatRef::row_major(s, ns), &mut out, false);
    out
}

pub(crate) fn correlate_backward<T: Scalar>(
    dout: &[T],
    t: &[T],
    s: &[T],
    c: usize,
    nt: usize,
    ns: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dt = vec![T::zero(); c * nt];
    T::gemm(c, ns, nt, MatRef::row_major(s, ns), MatRef::transposed(dout, ns), &mut dt, false);
    let mut ds = vec![T::zero(); c * ns];
    T::gemm(c, nt, ns, MatRef::row_major(t, nt), MatRef::row_major(dout, ns), &mut ds, false);
    (dt, ds)
}

/// Bilinear lookup weights at a continuous grid position (cell centers at integers),
/// clamped to the map border.
#[inline]
pub(crate) fn bilinear_taps(fx: f64, fy: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let cx = fx.clamp(0.0, (w - 1) as f64);
    let cy = fy.clamp(0.0, (h - 1) as f64);
    let x0 = (cx.floor() as usize).min(w - 1);
    let y0 = (cy.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = cx - x0 as f64;
    let ay = cy - y0 as f64;
    [
        (y0 * w + x0, (1.0 - ax) * (1.0 - ay)),
        (y0 * w + x1, ax * (1.0 - ay)),
        (y1 * w + x0, (1.0 - ax) * ay),
        (y1 * w + x1, ax * ay),
    ]
}

pub(crate) fn sample_forward<T: Scalar>(map: &[T], c: usize, h: usize, w: usize, pts: &[[f64; 2]]) -> Vec<T> {
    let k = pts.len();
    let mut out = vec![T::zero(); c * k];
    for (p, pt) in pts.iter().enumerate() {
        let taps = bilinear_taps(pt[0], pt[1], h, w);
        for ch in 0..c {
            let plane = &map[ch * h * w..(ch + 1) * h * w];
            let mut acc = T::zero();
            for &(idx, wt) in &taps {
                acc += T::lit(wt) * plane[idx];
            }
            out[ch * k + p] = acc;
        }
    }
    out
}

pub(crate) fn sample_backward<T: Scalar>(dout: &[T], c: usize, h: usize, w: usize, pts: &[[f64; 2]]) -> Vec<T> {
    let k = pts.len();
    let mut dmap = vec![T::zero(); c * h * w];
    for (p, pt) in pts.iter().enumerate() {
        let taps = bilinear_taps(pt[0], pt[1], h, w);
        for ch in 0..c {
            let g = dout[ch * k + p];
            let plane = &mut dmap[ch * h * w..(ch + 1) * h * w];
            for &(idx, wt) in &taps {
                plane[idx] += T::lit(wt) * g;
            }
        }
    }
    dmap
}
