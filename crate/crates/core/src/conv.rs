//! Direct 2-D cross-correlation kernels.
//!
//! The main path pads each sample once and runs one strided GEMM per kernel
//! tap: output position `q = oy * Wp + ox` reads padded input element
//! `stride * q + ky * Wp + kx`, a uniform stride. Positions with
//! `ox >= Wo` are computed and discarded (their output gradient is zero on
//! the way back). Pointwise and strided kernels, where the discarded share
//! would dominate, use im2col + GEMM instead.
//!
//! Weight gradients are accumulated over fixed groups of `GROUP` samples and
//! the group partials are then summed in index order, so results never depend
//! on how many threads ran.

use alloc::vec;
use alloc::vec::Vec;

use crate::par;
use crate::scalar::{gemm, gemm_strided, Mat, Scalar};

const GROUP: usize = 8;
const SHIFTED_MAX_STRIDE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    fn plane(&self) -> usize {
        self.out_h() * self.out_w()
    }
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.o * self.plane()
    }
    /// The input itself already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn taps(&self) -> usize {
        self.kh * self.kw
    }
}

/// Geometry of the shifted-GEMM path.
#[derive(Clone, Copy)]
struct Shifted {
    wp: usize,
    /// Virtual output row length. Output `(oy, ox)` sits at virtual
    /// position `v = oy * wv + ox` and reads from padded offset
    /// `stride * v`, so `wv = Wp` makes row `oy` start at input row
    /// `oy * stride`; columns `Wo..wv` are discarded.
    wv: usize,
    /// Virtual output positions `Ho * wv`.
    nv: usize,
    /// Padded plane length including read slack past the last row.
    lp: usize,
}

impl Shifted {
    fn new(g: &ConvGeom) -> Option<Shifted> {
        let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        if g.is_pointwise() || g.stride > SHIFTED_MAX_STRIDE {
            return None;
        }
        let wv = wp;
        let nv = g.out_h() * wv;
        let max_read = g.stride * (nv - 1) + (g.kh - 1) * wp + (g.kw - 1);
        Some(Shifted {
            wp,
            wv,
            nv,
            lp: (hp * wp).max(max_read + 1),
        })
    }

    fn tap_offset(&self, ky: usize, kx: usize) -> usize {
        ky * self.wp + kx
    }

    fn pad_input<T: Scalar>(&self, g: &ConvGeom, x: &[T], xp: &mut [T]) {
        xp.fill(T::zero());
        for c in 0..g.c {
            for y in 0..g.h {
                let dst = c * self.lp + (y + g.pad) * self.wp + g.pad;
                let src = (c * g.h + y) * g.w;
                xp[dst..dst + g.w].copy_from_slice(&x[src..src + g.w]);
            }
        }
    }

    /// Scatters `[O, Ho, Wo]` into the virtual `[O, nv]` layout, zeros elsewhere.
    fn expand_output<T: Scalar>(&self, g: &ConvGeom, y: &[T], yv: &mut [T]) {
        let (ho, wo) = (g.out_h(), g.out_w());
        yv.fill(T::zero());
        for o in 0..g.o {
            for oy in 0..ho {
                let src = (o * ho + oy) * wo;
                let dst = o * self.nv + oy * self.wv;
                yv[dst..dst + wo].copy_from_slice(&y[src..src + wo]);
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + k - pad`
/// lies inside `[0, w)`.
fn valid_range(g: &ConvGeom, k: usize, len: usize, wo: usize) -> (usize, usize) {
    let first = g.pad.saturating_sub(k).div_ceil(g.stride);
    // ox * stride + k - pad <= len - 1
    let limit = len + g.pad - 1;
    let last = if limit < k { 0 } else { ((limit - k) / g.stride + 1).min(wo) };
    (first.min(last), last)
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g, ky, g.h, ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g, kx, g.w, wo);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst[..oy_lo * wo].fill(T::zero());
                dst[oy_hi * wo..].fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    line[..ox_lo].fill(T::zero());
                    line[ox_hi..].fill(T::zero());
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    let ix0 = ox_lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[ox_lo..ox_hi].copy_from_slice(&srow[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for (d, s) in line[ox_lo..ox_hi]
                            .iter_mut()
                            .zip(srow[ix0..].iter().step_by(g.stride))
                        {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    x.fill(T::zero());
    for ci in 0..g.c {
        let dst = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g, ky, g.h, ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g, kx, g.w, wo);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let ix0 = ox_lo * g.stride + kx - g.pad;
                    let s = &src[oy * wo + ox_lo..oy * wo + ox_hi];
                    if g.stride == 1 {
                        for (d, &v) in drow[ix0..ix0 + s.len()].iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in drow[ix0..].iter_mut().step_by(g.stride).zip(s) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Scratch column buffer; empty for pointwise kernels.
fn scratch<T: Scalar>(g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * g.plane()]
    }
}

/// Kernel tap `(ky, kx)` as an `[O, C]` view of `[O, C, kh, kw]`.
fn tap<'a, T>(g: &ConvGeom, kernel: &'a [T], ky: usize, kx: usize) -> Mat<'a, T> {
    let t = ky * g.kw + kx;
    Mat::strided(&kernel[t..], g.o, g.c, g.c * g.taps(), g.taps())
}

/// Transpose of [`tap`]: `[C, O]`.
fn tap_t<'a, T>(g: &ConvGeom, kernel: &'a [T], ky: usize, kx: usize) -> Mat<'a, T> {
    let t = ky * g.kw + kx;
    Mat::strided(&kernel[t..], g.c, g.o, g.taps(), g.c * g.taps())
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeom, x: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.plane();
    let (ho, wo) = (g.out_h(), g.out_w());
    let shifted = Shifted::new(g);
    let mut out = vec![T::zero(); g.n * g.out_len()];
    par::for_each_chunk(&mut out, GROUP * g.out_len(), |gi, ys| {
        if let Some(sh) = shifted {
            let mut xp = vec![T::zero(); g.c * sh.lp];
            let mut yv = vec![T::zero(); g.o * sh.nv];
            for (j, y) in ys.chunks_mut(g.out_len()).enumerate() {
                let n = gi * GROUP + j;
                sh.pad_input(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut xp);
                let mut beta = T::zero();
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let off = sh.tap_offset(ky, kx);
                        let b = Mat::strided(&xp[off..], g.c, sh.nv, sh.lp, g.stride);
                        gemm(tap(g, kernel, ky, kx), b, beta, &mut yv);
                        beta = T::one();
                    }
                }
                for o in 0..g.o {
                    for oy in 0..ho {
                        let src = &yv[o * sh.nv + oy * sh.wv..][..wo];
                        let dst = &mut y[(o * ho + oy) * wo..][..wo];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v + bias[o];
                        }
                    }
                }
            }
            return;
        }
        let mut cols = scratch(g);
        for (j, y) in ys.chunks_mut(g.out_len()).enumerate() {
            let n = gi * GROUP + j;
            for (o, row) in y.chunks_mut(plane).enumerate() {
                row.fill(bias[o]);
            }
            let xs = &x[n * g.in_len()..(n + 1) * g.in_len()];
            let w = Mat::new(kernel, g.o, g.patch());
            if g.is_pointwise() {
                gemm(w, Mat::new(xs, g.c, plane), T::one(), y);
            } else {
                im2col(g, xs, &mut cols);
                gemm(w, Mat::new(&cols, g.patch(), plane), T::one(), y);
            }
        }
    });
    out
}

pub(crate) fn backward_input<T: Scalar>(g: &ConvGeom, dy: &[T], kernel: &[T]) -> Vec<T> {
    let plane = g.plane();
    let shifted = Shifted::new(g);
    let mut dx = vec![T::zero(); g.n * g.in_len()];
    par::for_each_chunk(&mut dx, GROUP * g.in_len(), |gi, dxs| {
        if let Some(sh) = shifted {
            let mut dxp = vec![T::zero(); g.c * sh.lp];
            let mut dyv = vec![T::zero(); g.o * sh.nv];
            for (j, dxn) in dxs.chunks_mut(g.in_len()).enumerate() {
                let n = gi * GROUP + j;
                sh.expand_output(g, &dy[n * g.out_len()..(n + 1) * g.out_len()], &mut dyv);
                dxp.fill(T::zero());
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let off = sh.tap_offset(ky, kx);
                        gemm_strided(
                            tap_t(g, kernel, ky, kx),
                            Mat::new(&dyv, g.o, sh.nv),
                            T::one(),
                            &mut dxp[off..],
                            sh.lp,
                            g.stride,
                        );
                    }
                }
                for c in 0..g.c {
                    for y in 0..g.h {
                        let src = c * sh.lp + (y + g.pad) * sh.wp + g.pad;
                        let dst = (c * g.h + y) * g.w;
                        dxn[dst..dst + g.w].copy_from_slice(&dxp[src..src + g.w]);
                    }
                }
            }
            return;
        }
        let mut cols = scratch(g);
        for (j, dxn) in dxs.chunks_mut(g.in_len()).enumerate() {
            let n = gi * GROUP + j;
            let dys = &dy[n * g.out_len()..(n + 1) * g.out_len()];
            let wt = Mat::transposed(kernel, g.o, g.patch());
            if g.is_pointwise() {
                gemm(wt, Mat::new(dys, g.o, plane), T::zero(), dxn);
            } else {
                gemm(wt, Mat::new(dys, g.o, plane), T::zero(), &mut cols);
                col2im(g, &cols, dxn);
            }
        }
    });
    dx
}

pub(crate) fn backward_kernel<T: Scalar>(g: &ConvGeom, x: &[T], dy: &[T]) -> Vec<T> {
    let plane = g.plane();
    let wlen = g.o * g.patch();
    let groups = g.n.div_ceil(GROUP);
    let shifted = Shifted::new(g);
    let partials = par::map_indexed(groups, |gi| {
        let mut acc = vec![T::zero(); wlen];
        let samples = gi * GROUP..((gi + 1) * GROUP).min(g.n);
        if let Some(sh) = shifted {
            let mut xp = vec![T::zero(); g.c * sh.lp];
            let mut dyv = vec![T::zero(); g.o * sh.nv];
            for n in samples {
                sh.pad_input(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut xp);
                sh.expand_output(g, &dy[n * g.out_len()..(n + 1) * g.out_len()], &mut dyv);
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let off = sh.tap_offset(ky, kx);
                        // dW[:, :, ky, kx] += dYv · Xshiftᵀ
                        let xt = Mat::strided(&xp[off..], sh.nv, g.c, g.stride, sh.lp);
                        gemm_strided(
                            Mat::new(&dyv, g.o, sh.nv),
                            xt,
                            T::one(),
                            &mut acc[ky * g.kw + kx..],
                            g.c * g.taps(),
                            g.taps(),
                        );
                    }
                }
            }
            return acc;
        }
        let mut cols = scratch(g);
        for n in samples {
            let xs = &x[n * g.in_len()..(n + 1) * g.in_len()];
            let dys = Mat::new(&dy[n * g.out_len()..(n + 1) * g.out_len()], g.o, plane);
            if g.is_pointwise() {
                gemm(dys, Mat::transposed(xs, g.c, plane), T::one(), &mut acc);
            } else {
                im2col(g, xs, &mut cols);
                gemm(dys, Mat::transposed(&cols, g.patch(), plane), T::one(), &mut acc);
            }
        }
        acc
    });
    let mut dw = vec![T::zero(); wlen];
    for p in &partials {
        for (a, &b) in dw.iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    dw
}

pub(crate) fn backward_bias<T: Scalar>(g: &ConvGeom, dy: &[T]) -> Vec<T> {
    let plane = g.plane();
    let mut db = vec![T::zero(); g.o];
    for sample in dy.chunks(g.out_len()) {
        for (o, row) in sample.chunks(plane).enumerate() {
            db[o] = db[o] + row.iter().copied().sum::<T>();
        }
    }
    db
}
