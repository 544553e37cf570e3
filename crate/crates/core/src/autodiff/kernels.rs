//! Dense kernels shared by forward and backward passes.
//!
//! All routines accumulate into `c` (`c += ...`) and visit elements in a
//! fixed order, so results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

const LANES: usize = 8;

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * LANES..(c + 1) * LANES], &b[c * LANES..(c + 1) * LANES]);
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            axpy(av, brow, &mut c[i * n..(i + 1) * n]);
        }
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one `[C,H,W]` image into `[C·kh·kw, Ho·Wo]` columns.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut cols = vec![T::zero(); g.col_rows() * ho * wo];
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &x[(c * g.height + iy as usize) * g.width..];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into an image buffer.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + iy as usize) * g.width;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Visits every multi-index of `shape` in row-major order, yielding the
/// linear output index and the offset into a source with `src_strides`.
pub(crate) fn for_each_strided(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for o in 0..total {
        f(o, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Bilinear tap of a single-channel `[H,W]` plane at pixel-space
/// coordinates, clamping out-of-image taps to the border.
///
/// Returns the value and the partial derivatives with respect to `px`, `py`.
#[inline]
pub(crate) fn bilinear_tap<T: Real>(plane: &[T], h: usize, w: usize, px: T, py: T) -> (T, T, T) {
    let t = BilinearTaps::new(h, w, px, py);
    let v00 = plane[t.y0 * w + t.x0];
    let v01 = plane[t.y0 * w + t.x1];
    let v10 = plane[t.y1 * w + t.x0];
    let v11 = plane[t.y1 * w + t.x1];
    let one = T::one();
    let val = (one - t.fy) * ((one - t.fx) * v00 + t.fx * v01) + t.fy * ((one - t.fx) * v10 + t.fx * v11);
    let dpx = (one - t.fy) * (v01 - v00) + t.fy * (v11 - v10);
    let dpy = (one - t.fx) * (v10 - v00) + t.fx * (v11 - v01);
    (val, dpx, dpy)
}

/// Clamped integer taps and fractional weights of a bilinear sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTaps<T> {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: T,
    pub fy: T,
}

impl<T: Real> BilinearTaps<T> {
    #[inline]
    pub fn new(h: usize, w: usize, px: T, py: T) -> Self {
        let fx0 = px.floor();
        let fy0 = py.floor();
        let fx = px - fx0;
        let fy = py - fy0;
        let clamp = |v: T, hi: usize| -> usize {
            let v = v.to_f64().unwrap();
            if v <= 0.0 {
                0
            } else if v >= (hi - 1) as f64 {
                hi - 1
            } else {
                v as usize
            }
        };
        let x0f = fx0;
        let y0f = fy0;
        Self {
            x0: clamp(x0f, w),
            x1: clamp(x0f + T::one(), w),
            y0: clamp(y0f, h),
            y1: clamp(y0f + T::one(), h),
            fx,
            fy,
        }
    }
}
