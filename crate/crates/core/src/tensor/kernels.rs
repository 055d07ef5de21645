//! Convolution kernels on raw row-major buffers.
//!
//! Every output element accumulates its products starting from zero in
//! `(in_channel, kernel_row, kernel_col)` order and adds the bias last, which
//! is the same order as the plain nested-loop definition. In `f64` the fast
//! paths therefore agree with a direct loop bit for bit.

use super::{conv_out_dim, Real};
use crate::error::{Error, Result};

/// Geometry of a (grouped-free) 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry for a dense convolution of `x` (`N,C,H,W`) with `w`
    /// (`Cout,Cin,Kh,Kw`).
    pub fn dense(
        x: &[usize],
        w: &[usize],
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let (n, c, h, wd) = rank4(x, "input")?;
        let (co, ci, kh, kw) = rank4(w, "weight")?;
        if ci != c {
            return Err(Error::shape(format!(
                "conv2d: weight expects {ci} input channels but input has {c} (input {x:?}, weight {w:?})"
            )));
        }
        Self::build(n, c, h, wd, co, kh, kw, stride, pad)
    }

    /// Geometry for a depthwise convolution, `w` shaped `C,1,Kh,Kw`.
    pub fn depthwise(
        x: &[usize],
        w: &[usize],
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let (n, c, h, wd) = rank4(x, "input")?;
        let (co, one, kh, kw) = rank4(w, "weight")?;
        if co != c || one != 1 {
            return Err(Error::shape(format!(
                "depthwise: weight {w:?} must be [{c}, 1, kh, kw] for input {x:?}"
            )));
        }
        Self::build(n, c, h, wd, c, kh, kw, stride, pad)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let oh = conv_out_dim(h, kh, stride.0, pad.0)?;
        let ow = conv_out_dim(w, kw, stride.1, pad.1)?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Range of output columns `ox` whose input column `ox*sw + kj - pw` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        valid_range(self.ow, self.w, self.sw, self.pw, kj)
    }

    fn valid_rows(&self, ki: usize) -> (usize, usize) {
        valid_range(self.oh, self.h, self.sh, self.ph, ki)
    }
}

fn rank4(s: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::shape(format!("{what} must be rank 4, got {s:?}"))),
    }
}

fn valid_range(out: usize, input: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // o*stride + k - pad in [0, input)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (r0, r1) = g.valid_rows(ki);
            for kj in 0..g.kw {
                let (c0, c1) = g.valid_cols(kj);
                let row = &mut col[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                row.fill(T::zero());
                for oy in r0..r1 {
                    let iy = oy * g.sh + ki - g.ph;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in c0..c1 {
                        dst[ox] = src[ox * g.sw + kj - g.pw];
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.pixels();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (r0, r1) = g.valid_rows(ki);
            for kj in 0..g.kw {
                let (c0, c1) = g.valid_cols(kj);
                let row = &col[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in r0..r1 {
                    let iy = oy * g.sh + ki - g.ph;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in c0..c1 {
                        dst[ox * g.sw + kj - g.pw] += src[ox];
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Dense convolution forward pass. `bias`, when given, has `cout` entries.
pub fn conv2d_forward<T: Real>(x: &[T], g: &ConvGeom, w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let p = g.pixels();
    let k = g.patch();
    let in_per = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..g.n {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        for co in 0..g.cout {
            let orow = &mut out[(n * g.cout + co) * p..][..p];
            let wrow = &w[co * k..(co + 1) * k];
            for (kk, &wv) in wrow.iter().enumerate() {
                axpy(orow, wv, &cols[kk * p..(kk + 1) * p]);
            }
            if let Some(b) = bias {
                let bv = b[co];
                orow.iter_mut().for_each(|o| *o += bv);
            }
        }
    }
    out
}

/// Gradients of a dense convolution: `(dx, dw, db)`; `dx` only when requested.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    g: &ConvGeom,
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let p = g.pixels();
    let k = g.patch();
    let in_per = g.cin * g.h * g.w;
    let mut dw = vec![T::zero(); g.cout * k];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut dcol = vec![T::zero(); if need_dx { k * p } else { 0 }];
    for n in 0..g.n {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        if need_dx {
            dcol.fill(T::zero());
        }
        for co in 0..g.cout {
            let dyrow = &dy[(n * g.cout + co) * p..][..p];
            db[co] += dyrow.iter().copied().sum::<T>();
            let wrow = &w[co * k..(co + 1) * k];
            for kk in 0..k {
                dw[co * k + kk] += dot(dyrow, &cols[kk * p..(kk + 1) * p]);
                if need_dx {
                    axpy(&mut dcol[kk * p..(kk + 1) * p], wrow[kk], dyrow);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_per..(n + 1) * in_per];
            if g.is_pointwise() {
                dxn.iter_mut().zip(&dcol).for_each(|(d, &c)| *d += c);
            } else {
                col2im_add(&dcol, g, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise convolution: channel `c` of the output sees only channel `c` of
/// the input.
pub fn depthwise_forward<T: Real>(x: &[T], g: &ConvGeom, w: &[T]) -> Vec<T> {
    let plane = g.h * g.w;
    let p = g.pixels();
    let kk = g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    for n in 0..g.n {
        for c in 0..g.cin {
            let xp = &x[(n * g.cin + c) * plane..][..plane];
            let op = &mut out[(n * g.cin + c) * p..][..p];
            for ki in 0..g.kh {
                let (r0, r1) = g.valid_rows(ki);
                for kj in 0..g.kw {
                    let (c0, c1) = g.valid_cols(kj);
                    let wv = w[c * kk + ki * g.kw + kj];
                    for oy in r0..r1 {
                        let iy = oy * g.sh + ki - g.ph;
                        let src = &xp[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut op[oy * g.ow..(oy + 1) * g.ow];
                        if g.sw == 1 {
                            let off = kj as isize - g.pw as isize;
                            let s0 = (c0 as isize + off) as usize;
                            axpy(&mut dst[c0..c1], wv, &src[s0..s0 + (c1 - c0)]);
                        } else {
                            for ox in c0..c1 {
                                dst[ox] += wv * src[ox * g.sw + kj - g.pw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a depthwise convolution: `(dx, dw)`.
pub fn depthwise_backward<T: Real>(
    x: &[T],
    g: &ConvGeom,
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let plane = g.h * g.w;
    let p = g.pixels();
    let kk = g.kh * g.kw;
    let mut dw = vec![T::zero(); g.cin * kk];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    for n in 0..g.n {
        for c in 0..g.cin {
            let xp = &x[(n * g.cin + c) * plane..][..plane];
            let dyp = &dy[(n * g.cin + c) * p..][..p];
            for ki in 0..g.kh {
                let (r0, r1) = g.valid_rows(ki);
                for kj in 0..g.kw {
                    let (c0, c1) = g.valid_cols(kj);
                    let wi = c * kk + ki * g.kw + kj;
                    let wv = w[wi];
                    let mut acc = T::zero();
                    for oy in r0..r1 {
                        let iy = oy * g.sh + ki - g.ph;
                        let src = &xp[iy * g.w..(iy + 1) * g.w];
                        let drow = &dyp[oy * g.ow..(oy + 1) * g.ow];
                        for ox in c0..c1 {
                            acc += drow[ox] * src[ox * g.sw + kj - g.pw];
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dxp = &mut dx[(n * g.cin + c) * plane + iy * g.w..][..g.w];
                            for ox in c0..c1 {
                                dxp[ox * g.sw + kj - g.pw] += wv * drow[ox];
                            }
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
    (dx, dw)
}
