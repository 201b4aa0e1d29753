//! Dense kernels behind the tape ops.
//!
//! All arrays are standard (row-major) layout with the last axis contiguous.
//! Every kernel is deterministic: each output element is produced by exactly
//! one task with a fixed serial reduction order, so results do not depend on
//! thread scheduling.

use ndarray::ArrayD;
use rayon::prelude::*;

use crate::element::Element;

#[inline]
pub(crate) fn flat<T: Element>(a: &ArrayD<T>) -> &[T] {
    a.as_slice().expect("tensor must be standard layout")
}

/// Parallelize over independent slabs when the total work is large enough.
fn par_slabs<T, F>(data: &mut [T], slab: usize, total_work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    let n_slabs = if slab == 0 { 0 } else { data.len() / slab };
    if total_work < (1 << 21) || n_slabs < 2 {
        for (i, chunk) in data.chunks_mut(slab).enumerate() {
            f(i, chunk);
        }
    } else {
        data.par_chunks_mut(slab)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
}

#[inline]
fn axpy<T: Element>(y: &mut [T], x: &[T], a: T) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi = a.mul_add(*xi, *yi);
    }
}

/// Sum with a fixed 8-lane accumulator pattern (vectorizes, fixed order).
pub(crate) fn vsum<T: Element>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut it = x.chunks_exact(8);
    for c in it.by_ref() {
        for l in 0..8 {
            acc[l] = acc[l] + c[l];
        }
    }
    let mut tail = T::zero();
    for v in it.remainder() {
        tail = tail + *v;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// Dot product with the same fixed-order accumulation.
pub(crate) fn vdot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ia = a.chunks_exact(8);
    let mut ib = b.chunks_exact(8);
    loop {
        match (ia.next(), ib.next()) {
            (Some(ca), Some(cb)) => {
                for l in 0..8 {
                    acc[l] = ca[l].mul_add(cb[l], acc[l]);
                }
            }
            _ => break,
        }
    }
    let mut tail = T::zero();
    for (x, y) in ia.remainder().iter().zip(ib.remainder()) {
        tail = x.mul_add(*y, tail);
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

// ---------------------------------------------------------------------------
// 3-D convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
    pub od: usize,
}

impl ConvDims {
    pub fn infer(xshape: &[usize], wshape: &[usize], stride: usize, pad: usize) -> ConvDims {
        assert_eq!(xshape.len(), 5, "conv3d input must be (B,C,H,W,D)");
        assert_eq!(wshape.len(), 5, "conv3d weight must be (Cout,Cin,k,k,k)");
        assert_eq!(xshape[1], wshape[1], "conv3d channel mismatch");
        assert_eq!(wshape[2], wshape[3]);
        assert_eq!(wshape[2], wshape[4]);
        let k = wshape[2];
        let ext = |n: usize| {
            assert!(
                n + 2 * pad >= k && (n + 2 * pad - k) % stride == 0,
                "conv3d: size {n} incompatible with k={k} stride={stride} pad={pad}"
            );
            (n + 2 * pad - k) / stride + 1
        };
        ConvDims {
            b: xshape[0],
            cin: xshape[1],
            cout: wshape[0],
            h: xshape[2],
            w: xshape[3],
            d: xshape[4],
            k,
            stride,
            pad,
            oh: ext(xshape[2]),
            ow: ext(xshape[3]),
            od: ext(xshape[4]),
        }
    }

    #[inline]
    fn in_slab(&self) -> usize {
        self.h * self.w * self.d
    }
    #[inline]
    fn out_slab(&self) -> usize {
        self.oh * self.ow * self.od
    }
    /// Valid output range along one axis for a kernel offset `kx`.
    #[inline]
    fn orange(&self, n_in: usize, n_out: usize, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let hi_num = n_in + self.pad;
        if hi_num <= kx {
            return (0, 0);
        }
        let hi = ((hi_num - kx - 1) / self.stride + 1).min(n_out);
        (lo, hi.max(lo))
    }
}

pub fn conv3d_fwd<T: Element>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    bias: &ArrayD<T>,
    dm: ConvDims,
) -> ArrayD<T> {
    let xs = flat(x);
    let ws = flat(w);
    let bs = flat(bias);
    let k3 = dm.k * dm.k * dm.k;
    let out_slab = dm.out_slab();
    let in_slab = dm.in_slab();
    let mut out = vec![T::zero(); dm.b * dm.cout * out_slab];
    let work = dm.b * dm.cout * dm.cin * k3 * out_slab;
    par_slabs(&mut out, out_slab, work, |idx, o| {
        let b = idx / dm.cout;
        let oc = idx % dm.cout;
        o.fill(bs[oc]);
        for ic in 0..dm.cin {
            let xsl = &xs[(b * dm.cin + ic) * in_slab..][..in_slab];
            let wk = &ws[(oc * dm.cin + ic) * k3..][..k3];
            conv_slab_fwd(o, xsl, wk, &dm);
        }
    });
    ArrayD::from_shape_vec(vec![dm.b, dm.cout, dm.oh, dm.ow, dm.od], out).unwrap()
}

fn conv_slab_fwd<T: Element>(out: &mut [T], x: &[T], wk: &[T], dm: &ConvDims) {
    let (s, p, k) = (dm.stride, dm.pad, dm.k);
    for kh in 0..k {
        let (h0, h1) = dm.orange(dm.h, dm.oh, kh);
        for kw in 0..k {
            let (w0, w1) = dm.orange(dm.w, dm.ow, kw);
            for kd in 0..k {
                let (d0, d1) = dm.orange(dm.d, dm.od, kd);
                if d1 <= d0 {
                    continue;
                }
                let wv = wk[(kh * k + kw) * k + kd];
                for oh in h0..h1 {
                    let ih = oh * s + kh - p;
                    for ow in w0..w1 {
                        let iw = ow * s + kw - p;
                        let orow = &mut out[(oh * dm.ow + ow) * dm.od..][d0..d1];
                        let xbase = (ih * dm.w + iw) * dm.d;
                        if s == 1 {
                            let xoff = xbase + d0 + kd - p;
                            axpy(orow, &x[xoff..xoff + (d1 - d0)], wv);
                        } else {
                            for (j, oj) in orow.iter_mut().enumerate() {
                                let id = (d0 + j) * s + kd - p;
                                *oj = wv.mul_add(x[xbase + id], *oj);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_bwd_input<T: Element>(
    gin: &mut ArrayD<T>,
    gout: &ArrayD<T>,
    w: &ArrayD<T>,
    dm: ConvDims,
) {
    let gs = flat(gout);
    let ws = flat(w);
    let k3 = dm.k * dm.k * dm.k;
    let in_slab = dm.in_slab();
    let out_slab = dm.out_slab();
    let gin_s = gin.as_slice_mut().expect("standard layout");
    let work = dm.b * dm.cout * dm.cin * k3 * out_slab;
    par_slabs(gin_s, in_slab, work, |idx, gi| {
        let b = idx / dm.cin;
        let ic = idx % dm.cin;
        for oc in 0..dm.cout {
            let gsl = &gs[(b * dm.cout + oc) * out_slab..][..out_slab];
            let wk = &ws[(oc * dm.cin + ic) * k3..][..k3];
            conv_slab_bwd_input(gi, gsl, wk, &dm);
        }
    });
}

fn conv_slab_bwd_input<T: Element>(gin: &mut [T], gout: &[T], wk: &[T], dm: &ConvDims) {
    let (s, p, k) = (dm.stride, dm.pad, dm.k);
    for kh in 0..k {
        let (h0, h1) = dm.orange(dm.h, dm.oh, kh);
        for kw in 0..k {
            let (w0, w1) = dm.orange(dm.w, dm.ow, kw);
            for kd in 0..k {
                let (d0, d1) = dm.orange(dm.d, dm.od, kd);
                if d1 <= d0 {
                    continue;
                }
                let wv = wk[(kh * k + kw) * k + kd];
                for oh in h0..h1 {
                    let ih = oh * s + kh - p;
                    for ow in w0..w1 {
                        let iw = ow * s + kw - p;
                        let grow = &gout[(oh * dm.ow + ow) * dm.od..][d0..d1];
                        let ibase = (ih * dm.w + iw) * dm.d;
                        if s == 1 {
                            let ioff = ibase + d0 + kd - p;
                            axpy(&mut gin[ioff..ioff + (d1 - d0)], grow, wv);
                        } else {
                            for (j, gj) in grow.iter().enumerate() {
                                let id = (d0 + j) * s + kd - p;
                                gin[ibase + id] = wv.mul_add(*gj, gin[ibase + id]);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_bwd_weight<T: Element>(
    gw: &mut ArrayD<T>,
    gout: &ArrayD<T>,
    x: &ArrayD<T>,
    dm: ConvDims,
) {
    let gs = flat(gout);
    let xs = flat(x);
    let k3 = dm.k * dm.k * dm.k;
    let in_slab = dm.in_slab();
    let out_slab = dm.out_slab();
    let gw_s = gw.as_slice_mut().expect("standard layout");
    let work = dm.b * dm.cout * dm.cin * k3 * out_slab;
    // One task per output channel; serial over batch inside keeps order fixed.
    par_slabs(gw_s, dm.cin * k3, work, |oc, gwc| {
        for b in 0..dm.b {
            let gsl = &gs[(b * dm.cout + oc) * out_slab..][..out_slab];
            for ic in 0..dm.cin {
                let xsl = &xs[(b * dm.cin + ic) * in_slab..][..in_slab];
                conv_slab_bwd_weight(&mut gwc[ic * k3..(ic + 1) * k3], gsl, xsl, &dm);
            }
        }
    });
}

fn conv_slab_bwd_weight<T: Element>(gwk: &mut [T], gout: &[T], x: &[T], dm: &ConvDims) {
    let (s, p, k) = (dm.stride, dm.pad, dm.k);
    for kh in 0..k {
        let (h0, h1) = dm.orange(dm.h, dm.oh, kh);
        for kw in 0..k {
            let (w0, w1) = dm.orange(dm.w, dm.ow, kw);
            for kd in 0..k {
                let (d0, d1) = dm.orange(dm.d, dm.od, kd);
                if d1 <= d0 {
                    continue;
                }
                let mut acc = T::zero();
                for oh in h0..h1 {
                    let ih = oh * s + kh - p;
                    for ow in w0..w1 {
                        let iw = ow * s + kw - p;
                        let grow = &gout[(oh * dm.ow + ow) * dm.od..][d0..d1];
                        let xbase = (ih * dm.w + iw) * dm.d;
                        if s == 1 {
                            let xoff = xbase + d0 + kd - p;
                            acc = acc + vdot(grow, &x[xoff..xoff + (d1 - d0)]);
                        } else {
                            let mut a = T::zero();
                            for (j, gj) in grow.iter().enumerate() {
                                let id = (d0 + j) * s + kd - p;
                                a = gj.mul_add(x[xbase + id], a);
                            }
                            acc = acc + a;
                        }
                    }
                }
                gwk[(kh * k + kw) * k + kd] = gwk[(kh * k + kw) * k + kd] + acc;
            }
        }
    }
}

pub fn conv3d_bwd_bias<T: Element>(gb: &mut ArrayD<T>, gout: &ArrayD<T>) {
    let gs = flat(gout);
    let shape = gout.shape();
    let (b, cout) = (shape[0], shape[1]);
    let out_slab: usize = shape[2..].iter().product();
    let gbs = gb.as_slice_mut().expect("standard layout");
    for bi in 0..b {
        for oc in 0..cout {
            let g = &gs[(bi * cout + oc) * out_slab..][..out_slab];
            gbs[oc] = gbs[oc] + vsum(g);
        }
    }
}

// ---------------------------------------------------------------------------
// Transposed 3-D convolution, kernel 2, stride 2 (exact 2x upsampling)
// ---------------------------------------------------------------------------

/// weight layout: (Cin, Cout, 2, 2, 2); output dims are exactly doubled.
pub fn convt3d_fwd<T: Element>(x: &ArrayD<T>, w: &ArrayD<T>, bias: &ArrayD<T>) -> ArrayD<T> {
    let (b, cin, h, wd, d) = dims5(x);
    let cout = w.shape()[1];
    let xs = flat(x);
    let ws = flat(w);
    let bs = flat(bias);
    let in_slab = h * wd * d;
    let out_slab = 8 * in_slab;
    let (oh, ow, od) = (2 * h, 2 * wd, 2 * d);
    let mut out = vec![T::zero(); b * cout * out_slab];
    let work = b * cout * cin * 8 * in_slab;
    par_slabs(&mut out, out_slab, work, |idx, o| {
        let bi = idx / cout;
        let oc = idx % cout;
        o.fill(bs[oc]);
        for ic in 0..cin {
            let xsl = &xs[(bi * cin + ic) * in_slab..][..in_slab];
            let wk = &ws[(ic * cout + oc) * 8..][..8];
            for kh in 0..2 {
                for kw in 0..2 {
                    for kd in 0..2 {
                        let wv = wk[(kh * 2 + kw) * 2 + kd];
                        for ih in 0..h {
                            for iw in 0..wd {
                                let xrow = &xsl[(ih * wd + iw) * d..][..d];
                                let obase = ((2 * ih + kh) * ow + (2 * iw + kw)) * od + kd;
                                for (t, xv) in xrow.iter().enumerate() {
                                    let oi = obase + 2 * t;
                                    o[oi] = wv.mul_add(*xv, o[oi]);
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    ArrayD::from_shape_vec(vec![b, cout, oh, ow, od], out).unwrap()
}

pub fn convt3d_bwd_input<T: Element>(gin: &mut ArrayD<T>, gout: &ArrayD<T>, w: &ArrayD<T>) {
    let (b, cin, h, wd, d) = dims5(gin);
    let cout = w.shape()[1];
    let gs = flat(gout);
    let ws = flat(w);
    let in_slab = h * wd * d;
    let out_slab = 8 * in_slab;
    let (ow, od) = (2 * wd, 2 * d);
    let gin_s = gin.as_slice_mut().expect("standard layout");
    let work = b * cout * cin * 8 * in_slab;
    par_slabs(gin_s, in_slab, work, |idx, gi| {
        let bi = idx / cin;
        let ic = idx % cin;
        for oc in 0..cout {
            let gsl = &gs[(bi * cout + oc) * out_slab..][..out_slab];
            let wk = &ws[(ic * cout + oc) * 8..][..8];
            for kh in 0..2 {
                for kw in 0..2 {
                    for kd in 0..2 {
                        let wv = wk[(kh * 2 + kw) * 2 + kd];
                        for ih in 0..h {
                            for iw in 0..wd {
                                let gibase = (ih * wd + iw) * d;
                                let obase = ((2 * ih + kh) * ow + (2 * iw + kw)) * od + kd;
                                for t in 0..d {
                                    gi[gibase + t] =
                                        wv.mul_add(gsl[obase + 2 * t], gi[gibase + t]);
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn convt3d_bwd_weight<T: Element>(
    gw: &mut ArrayD<T>,
    gout: &ArrayD<T>,
    x: &ArrayD<T>,
) {
    let (b, cin, h, wd, d) = dims5(x);
    let cout = gout.shape()[1];
    let gs = flat(gout);
    let xs = flat(x);
    let in_slab = h * wd * d;
    let out_slab = 8 * in_slab;
    let (ow, od) = (2 * wd, 2 * d);
    let gw_s = gw.as_slice_mut().expect("standard layout");
    let work = b * cout * cin * 8 * in_slab;
    par_slabs(gw_s, cout * 8, work, |ic, gwc| {
        for bi in 0..b {
            let xsl = &xs[(bi * cin + ic) * in_slab..][..in_slab];
            for oc in 0..cout {
                let gsl = &gs[(bi * cout + oc) * out_slab..][..out_slab];
                for kh in 0..2 {
                    for kw in 0..2 {
                        for kd in 0..2 {
                            let mut acc = T::zero();
                            for ih in 0..h {
                                for iw in 0..wd {
                                    let xrow = &xsl[(ih * wd + iw) * d..][..d];
                                    let obase = ((2 * ih + kh) * ow + (2 * iw + kw)) * od + kd;
                                    for (t, xv) in xrow.iter().enumerate() {
                                        acc = xv.mul_add(gsl[obase + 2 * t], acc);
                                    }
                                }
                            }
                            let gi = (oc * 2 + kh) * 4 + kw * 2 + kd;
                            gwc[gi] = gwc[gi] + acc;
                        }
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Trilinear 2x upsampling (half-pixel centers, clamped at borders)
// ---------------------------------------------------------------------------

/// Two source taps for output index `j` along an axis of length `len`.
/// Returns (i0, w0, i1, w1); i0 == i1 means plain copy at a clamped border.
#[inline]
fn up2_taps<T: Element>(j: usize, len: usize) -> (usize, T, usize, T) {
    let m = j / 2;
    let q = T::from_f64(0.25);
    let t = T::from_f64(0.75);
    if j % 2 == 0 {
        if m == 0 {
            (0, T::one(), 0, T::zero())
        } else {
            (m - 1, q, m, t)
        }
    } else if m + 1 >= len {
        (m, T::one(), m, T::zero())
    } else {
        (m, t, m + 1, q)
    }
}

/// (outer, len, inner) -> (outer, 2*len, inner)
fn up2_axis<T: Element>(src: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); outer * 2 * len * inner];
    for o in 0..outer {
        let sbase = o * len * inner;
        let dbase = o * 2 * len * inner;
        for j in 0..2 * len {
            let (i0, w0, i1, w1) = up2_taps::<T>(j, len);
            let drow = &mut dst[dbase + j * inner..dbase + (j + 1) * inner];
            let s0 = &src[sbase + i0 * inner..sbase + (i0 + 1) * inner];
            if i0 == i1 || w1 == T::zero() {
                drow.copy_from_slice(s0);
            } else {
                let s1 = &src[sbase + i1 * inner..sbase + (i1 + 1) * inner];
                for ((dv, a), b) in drow.iter_mut().zip(s0).zip(s1) {
                    *dv = w0.mul_add(*a, w1 * *b);
                }
            }
        }
    }
    dst
}

/// Adjoint of `up2_axis`: (outer, 2*len, inner) -> (outer, len, inner)
fn up2_axis_adjoint<T: Element>(g: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut gs = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let gbase = o * 2 * len * inner;
        let sbase = o * len * inner;
        for j in 0..2 * len {
            let (i0, w0, i1, w1) = up2_taps::<T>(j, len);
            let grow = &g[gbase + j * inner..gbase + (j + 1) * inner];
            axpy(&mut gs[sbase + i0 * inner..sbase + (i0 + 1) * inner], grow, w0);
            if i1 != i0 && w1 != T::zero() {
                axpy(&mut gs[sbase + i1 * inner..sbase + (i1 + 1) * inner], grow, w1);
            }
        }
    }
    gs
}

pub fn upsample2_fwd<T: Element>(x: &ArrayD<T>) -> ArrayD<T> {
    let (b, c, h, w, d) = dims5(x);
    let xs = flat(x);
    let in_slab = h * w * d;
    let out_slab = 8 * in_slab;
    let mut out = vec![T::zero(); b * c * out_slab];
    let work = b * c * out_slab * 4;
    par_slabs(&mut out, out_slab, work, |idx, o| {
        let xsl = &xs[idx * in_slab..][..in_slab];
        let t1 = up2_axis(xsl, h * w, d, 1);
        let t2 = up2_axis(&t1, h, w, 2 * d);
        let t3 = up2_axis(&t2, 1, h, 2 * w * 2 * d);
        o.copy_from_slice(&t3);
    });
    ArrayD::from_shape_vec(vec![b, c, 2 * h, 2 * w, 2 * d], out).unwrap()
}

pub fn upsample2_bwd<T: Element>(gin: &mut ArrayD<T>, gout: &ArrayD<T>) {
    let (b, c, h, w, d) = dims5(gin);
    let gs = flat(gout);
    let in_slab = h * w * d;
    let out_slab = 8 * in_slab;
    let gin_s = gin.as_slice_mut().expect("standard layout");
    let work = b * c * out_slab * 4;
    par_slabs(gin_s, in_slab, work, |idx, gi| {
        let gsl = &gs[idx * out_slab..][..out_slab];
        let t3 = up2_axis_adjoint(gsl, 1, h, 2 * w * 2 * d);
        let t2 = up2_axis_adjoint(&t3, h, w, 2 * d);
        let t1 = up2_axis_adjoint(&t2, h * w, d, 1);
        for (a, g) in gi.iter_mut().zip(&t1) {
            *a = *a + *g;
        }
    });
}

// ---------------------------------------------------------------------------
// Non-overlapping average pooling with cubic factor
// ---------------------------------------------------------------------------

pub fn avgpool3d_fwd<T: Element>(x: &ArrayD<T>, f: usize) -> ArrayD<T> {
    let (b, c, h, w, d) = dims5(x);
    assert!(h % f == 0 && w % f == 0 && d % f == 0, "pool factor must divide dims");
    let (oh, ow, od) = (h / f, w / f, d / f);
    let xs = flat(x);
    let in_slab = h * w * d;
    let out_slab = oh * ow * od;
    let inv = T::one() / T::from_usize(f * f * f);
    let mut out = vec![T::zero(); b * c * out_slab];
    par_slabs(&mut out, out_slab, b * c * in_slab, |idx, o| {
        let xsl = &xs[idx * in_slab..][..in_slab];
        for i in 0..oh {
            for j in 0..ow {
                for t in 0..od {
                    let mut acc = T::zero();
                    for di in 0..f {
                        for dj in 0..f {
                            let base = ((i * f + di) * w + (j * f + dj)) * d + t * f;
                            acc = acc + vsum(&xsl[base..base + f]);
                        }
                    }
                    o[(i * ow + j) * od + t] = acc * inv;
                }
            }
        }
    });
    ArrayD::from_shape_vec(vec![b, c, oh, ow, od], out).unwrap()
}

pub fn avgpool3d_bwd<T: Element>(gin: &mut ArrayD<T>, gout: &ArrayD<T>, f: usize) {
    let (b, c, h, w, d) = dims5(gin);
    let (oh, ow, od) = (h / f, w / f, d / f);
    let gs = flat(gout);
    let in_slab = h * w * d;
    let out_slab = oh * ow * od;
    let inv = T::one() / T::from_usize(f * f * f);
    let gin_s = gin.as_slice_mut().expect("standard layout");
    par_slabs(gin_s, in_slab, b * c * in_slab, |idx, gi| {
        let gsl = &gs[idx * out_slab..][..out_slab];
        for i in 0..oh {
            for j in 0..ow {
                for t in 0..od {
                    let gv = gsl[(i * ow + j) * od + t] * inv;
                    for di in 0..f {
                        for dj in 0..f {
                            let base = ((i * f + di) * w + (j * f + dj)) * d + t * f;
                            for v in &mut gi[base..base + f] {
                                *v = *v + gv;
                            }
                        }
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Instance normalization
// ---------------------------------------------------------------------------

pub struct InstNormCtx<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn instnorm_fwd<T: Element>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    eps: T,
) -> (ArrayD<T>, InstNormCtx<T>) {
    let shape = x.shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    let n: usize = shape[2..].iter().product();
    let xs = flat(x);
    let gs = flat(gamma);
    let bs = flat(beta);
    let inv_n = T::one() / T::from_usize(n);
    let mut out = vec![T::zero(); xs.len()];
    let mut mean = vec![T::zero(); b * c];
    let mut inv_std = vec![T::zero(); b * c];
    // Two sweeps so the saved statistics can be filled without sharing
    // mutable state with the parallel output pass.
    for idx in 0..b * c {
        let xsl = &xs[idx * n..][..n];
        let m = vsum(xsl) * inv_n;
        let mut var = T::zero();
        for v in xsl {
            let dv = *v - m;
            var = dv.mul_add(dv, var);
        }
        var = var * inv_n;
        mean[idx] = m;
        inv_std[idx] = T::one() / (var + eps).sqrt();
    }
    par_slabs(&mut out, n, b * c * n, |idx, o| {
        let ch = idx % c;
        let xsl = &xs[idx * n..][..n];
        let scale = gs[ch] * inv_std[idx];
        let shift = bs[ch] - mean[idx] * scale;
        for (ov, xv) in o.iter_mut().zip(xsl) {
            *ov = scale.mul_add(*xv, shift);
        }
    });
    (
        ArrayD::from_shape_vec(shape, out).unwrap(),
        InstNormCtx { mean, inv_std },
    )
}

/// Returns (gx, dgamma, dbeta).
pub fn instnorm_bwd<T: Element>(
    gout: &ArrayD<T>,
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    ctx: &InstNormCtx<T>,
) -> (ArrayD<T>, Vec<T>, Vec<T>) {
    let shape = x.shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    let n: usize = shape[2..].iter().product();
    let xs = flat(x);
    let gs = flat(gout);
    let gam = flat(gamma);
    let inv_n = T::one() / T::from_usize(n);
    let mut gx = vec![T::zero(); xs.len()];
    let mut s_g = vec![T::zero(); b * c];
    let mut s_gx = vec![T::zero(); b * c];
    for idx in 0..b * c {
        let xsl = &xs[idx * n..][..n];
        let gsl = &gs[idx * n..][..n];
        let (m, inv) = (ctx.mean[idx], ctx.inv_std[idx]);
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for (xv, gv) in xsl.iter().zip(gsl) {
            sg = sg + *gv;
            sgx = gv.mul_add((*xv - m) * inv, sgx);
        }
        s_g[idx] = sg;
        s_gx[idx] = sgx;
    }
    par_slabs(&mut gx, n, b * c * n, |idx, go| {
        let ch = idx % c;
        let xsl = &xs[idx * n..][..n];
        let gsl = &gs[idx * n..][..n];
        let (m, inv) = (ctx.mean[idx], ctx.inv_std[idx]);
        let k = gam[ch] * inv;
        let mg = s_g[idx] * inv_n;
        let mgx = s_gx[idx] * inv_n;
        for ((ov, xv), gv) in go.iter_mut().zip(xsl).zip(gsl) {
            let xhat = (*xv - m) * inv;
            *ov = k * (*gv - mg - xhat * mgx);
        }
    });
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            dgamma[ch] = dgamma[ch] + s_gx[bi * c + ch];
            dbeta[ch] = dbeta[ch] + s_g[bi * c + ch];
        }
    }
    (ArrayD::from_shape_vec(shape, gx).unwrap(), dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Softmax over the channel axis (axis 1)
// ---------------------------------------------------------------------------

pub fn softmax_ch_fwd<T: Element>(x: &ArrayD<T>) -> ArrayD<T> {
    let shape = x.shape().to_vec();
    let (b, k) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let xs = flat(x);
    let mut out = vec![T::zero(); xs.len()];
    par_slabs(&mut out, k * s, b * k * s * 8, |bi, o| {
        let xb = &xs[bi * k * s..][..k * s];
        let mut mx = xb[..s].to_vec();
        for ki in 1..k {
            for (mv, xv) in mx.iter_mut().zip(&xb[ki * s..(ki + 1) * s]) {
                if *xv > *mv {
                    *mv = *xv;
                }
            }
        }
        let mut denom = vec![T::zero(); s];
        for ki in 0..k {
            let orow = &mut o[ki * s..(ki + 1) * s];
            for ((ov, xv), mv) in orow.iter_mut().zip(&xb[ki * s..(ki + 1) * s]).zip(&mx) {
                let e = (*xv - *mv).exp();
                *ov = e;
            }
            for (dv, ov) in denom.iter_mut().zip(orow.iter()) {
                *dv = *dv + *ov;
            }
        }
        for dv in denom.iter_mut() {
            *dv = T::one() / *dv;
        }
        for ki in 0..k {
            for (ov, dv) in o[ki * s..(ki + 1) * s].iter_mut().zip(&denom) {
                *ov = *ov * *dv;
            }
        }
    });
    ArrayD::from_shape_vec(shape, out).unwrap()
}

pub fn softmax_ch_bwd<T: Element>(gout: &ArrayD<T>, y: &ArrayD<T>) -> ArrayD<T> {
    let shape = y.shape().to_vec();
    let (b, k) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let gs = flat(gout);
    let ys = flat(y);
    let mut gx = vec![T::zero(); ys.len()];
    par_slabs(&mut gx, k * s, b * k * s * 4, |bi, go| {
        let gb = &gs[bi * k * s..][..k * s];
        let yb = &ys[bi * k * s..][..k * s];
        let mut t = vec![T::zero(); s];
        for ki in 0..k {
            for ((tv, gv), yv) in t
                .iter_mut()
                .zip(&gb[ki * s..(ki + 1) * s])
                .zip(&yb[ki * s..(ki + 1) * s])
            {
                *tv = gv.mul_add(*yv, *tv);
            }
        }
        for ki in 0..k {
            for ((ov, gv), (yv, tv)) in go[ki * s..(ki + 1) * s]
                .iter_mut()
                .zip(&gb[ki * s..(ki + 1) * s])
                .zip(yb[ki * s..(ki + 1) * s].iter().zip(&t))
            {
                *ov = *yv * (*gv - *tv);
            }
        }
    });
    ArrayD::from_shape_vec(shape, gx).unwrap()
}

#[inline]
pub(crate) fn dims5<T: Element>(a: &ArrayD<T>) -> (usize, usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 5, "expected a 5-D tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3], s[4])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arange(shape: &[usize], scale: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|i| ((i * 37 + 11) % 23) as f64 * scale - 0.7).collect(),
        )
        .unwrap()
    }

    /// Direct 7-loop convolution used as the oracle for the blocked kernels.
    fn conv3d_naive(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        bias: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let dm = ConvDims::infer(x.shape(), w.shape(), stride, pad);
        let mut out = ArrayD::zeros(IxDyn(&[dm.b, dm.cout, dm.oh, dm.ow, dm.od]));
        for b in 0..dm.b {
            for oc in 0..dm.cout {
                for oh in 0..dm.oh {
                    for ow in 0..dm.ow {
                        for od in 0..dm.od {
                            let mut acc = bias[[oc]];
                            for ic in 0..dm.cin {
                                for kh in 0..dm.k {
                                    for kw in 0..dm.k {
                                        for kd in 0..dm.k {
                                            let ih = oh * stride + kh;
                                            let iw = ow * stride + kw;
                                            let id = od * stride + kd;
                                            if ih < pad || iw < pad || id < pad {
                                                continue;
                                            }
                                            let (ih, iw, id) = (ih - pad, iw - pad, id - pad);
                                            if ih >= dm.h || iw >= dm.w || id >= dm.d {
                                                continue;
                                            }
                                            acc += w[[oc, ic, kh, kw, kd]]
                                                * x[[b, ic, ih, iw, id]];
                                        }
                                    }
                                }
                            }
                            out[[b, oc, oh, ow, od]] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_fwd_matches_naive() {
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 0, 2), (1, 0, 1)] {
            let x = arange(&[2, 3, 4, 6, 8], 0.1);
            let w = arange(&[2, 3, k, k, k], 0.05);
            let bias = arange(&[2], 0.3);
            let dm = ConvDims::infer(x.shape(), w.shape(), stride, pad);
            let got = conv3d_fwd(&x, &w, &bias, dm);
            let want = conv3d_naive(&x, &w, &bias, stride, pad);
            assert_close(&got, &want, 1e-12);
        }
    }

    #[test]
    fn conv_bwd_matches_naive_transpose() {
        // Validates grad-input / grad-weight against the naive forward via
        // the identity <gout, conv(x)> differentials.
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 0, 2)] {
            let x = arange(&[1, 2, 4, 4, 6], 0.09);
            let w = arange(&[3, 2, k, k, k], 0.04);
            let bias = ArrayD::zeros(IxDyn(&[3]));
            let dm = ConvDims::infer(x.shape(), w.shape(), stride, pad);
            let gout = arange(&[1, 3, dm.oh, dm.ow, dm.od], 0.07);

            let mut gin = ArrayD::zeros(IxDyn(x.shape()));
            conv3d_bwd_input(&mut gin, &gout, &w, dm);
            let mut gw = ArrayD::zeros(IxDyn(w.shape()));
            conv3d_bwd_weight(&mut gw, &gout, &x, dm);

            // finite-difference spot checks
            let f = |xa: &ArrayD<f64>, wa: &ArrayD<f64>| {
                (&conv3d_naive(xa, wa, &bias, stride, pad) * &gout).sum()
            };
            let h = 1e-6;
            for &idx in &[0usize, 7, 19] {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.as_slice_mut().unwrap()[idx] += h;
                xm.as_slice_mut().unwrap()[idx] -= h;
                let fd = (f(&xp, &w) - f(&xm, &w)) / (2.0 * h);
                let an = gin.as_slice().unwrap()[idx];
                assert!((fd - an).abs() < 1e-5, "gin: {fd} vs {an}");
            }
            for &idx in &[0usize, 5, 11] {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp.as_slice_mut().unwrap()[idx] += h;
                wm.as_slice_mut().unwrap()[idx] -= h;
                let fd = (f(&x, &wp) - f(&x, &wm)) / (2.0 * h);
                let an = gw.as_slice().unwrap()[idx];
                assert!((fd - an).abs() < 1e-5, "gw: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn upsample_adjoint_consistent() {
        // <up(x), g> must equal <x, up^T(g)>
        let x = arange(&[1, 2, 3, 4, 5], 0.13);
        let up = upsample2_fwd(&x);
        let g = arange(up.shape(), 0.11);
        let lhs = (&up * &g).sum();
        let mut gin = ArrayD::zeros(IxDyn(x.shape()));
        upsample2_bwd(&mut gin, &g);
        let rhs = (&x * &gin).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn upsample_constant_is_constant() {
        let x = ArrayD::from_elem(IxDyn(&[1, 1, 3, 3, 3]), 2.5f64);
        let up = upsample2_fwd(&x);
        for v in up.iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn convt_adjoint_consistent() {
        let x = arange(&[2, 3, 2, 3, 4], 0.1);
        let w = arange(&[3, 2, 2, 2, 2], 0.07);
        let bias = ArrayD::zeros(IxDyn(&[2]));
        let y = convt3d_fwd(&x, &w, &bias);
        assert_eq!(y.shape(), &[2, 2, 4, 6, 8]);
        let g = arange(y.shape(), 0.05);
        let lhs = (&y * &g).sum();
        let mut gin = ArrayD::zeros(IxDyn(x.shape()));
        convt3d_bwd_input(&mut gin, &g, &w);
        let rhs = (&x * &gin).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn avgpool_mean_and_adjoint() {
        let x = arange(&[1, 2, 4, 4, 4], 0.21);
        let y = avgpool3d_fwd(&x, 2);
        assert_eq!(y.shape(), &[1, 2, 2, 2, 2]);
        let mut manual = 0.0;
        for di in 0..2 {
            for dj in 0..2 {
                for dt in 0..2 {
                    manual += x[[0, 0, di, dj, dt]];
                }
            }
        }
        assert!((y[[0, 0, 0, 0, 0]] - manual / 8.0).abs() < 1e-12);

        let g = arange(y.shape(), 0.17);
        let lhs = (&y * &g).sum();
        let mut gin = ArrayD::zeros(IxDyn(x.shape()));
        avgpool3d_bwd(&mut gin, &g, 2);
        let rhs = (&x * &gin).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = arange(&[2, 3, 2, 2, 2], 0.4);
        let y = softmax_ch_fwd(&x);
        for b in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    for t in 0..2 {
                        let mut s = 0.0;
                        for k in 0..3 {
                            s += y[[b, k, i, j, t]];
                        }
                        assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn instnorm_normalizes() {
        let x = arange(&[2, 3, 3, 3, 3], 0.3);
        let gamma = ArrayD::from_elem(IxDyn(&[3]), 1.0f64);
        let beta = ArrayD::zeros(IxDyn(&[3]));
        let (y, _) = instnorm_fwd(&x, &gamma, &beta, 1e-5);
        for b in 0..2 {
            for c in 0..3 {
                let sl = y.slice(ndarray::s![b, c, .., .., ..]);
                let m: f64 = sl.iter().sum::<f64>() / 27.0;
                let v: f64 = sl.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 27.0;
                assert!(m.abs() < 1e-10);
                assert!((v - 1.0).abs() < 1e-3);
            }
        }
    }
}
