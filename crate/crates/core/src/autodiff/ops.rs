//! Forward definitions of every differentiable operation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, bilinear_tap, for_each_strided, strides, ConvGeometry};
use super::{Graph, Op, Var};
use crate::error::{dim_err, Error, Result};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Splits `shape` around `axis` into (outer, extent, inner) counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let one = T::one();
    let x2 = x * x;
    let u = c * (x + a * x2 * x);
    let t = u.tanh();
    let val = half * x * (one + t);
    let du = c * (one + T::of(3.0) * a * x2);
    let d = half * (one + t) + half * x * (one - t * t) * du;
    (val, d)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data).unwrap();
        self.push(t, op)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`; `b` is either `[k, n]` (shared across the batch)
    /// or `[..., k, n]` with the same leading extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_rhs = lead_b.is_empty();
        if !shared_rhs && lead_a != lead_b {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let batch = numel(lead_a);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            if shared_rhs {
                kernels::gemm_nn(da, db, &mut out, batch * m, k, n);
            } else {
                for bi in 0..batch {
                    kernels::gemm_nn(
                        &da[bi * m * k..(bi + 1) * m * k],
                        &db[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, batch, m, k, n, shared_rhs }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || core::mem::replace(&mut seen[a], true))
        {
            return Err(dim_err("permute", &shape, axes));
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for_each_strided(&out_shape, &src, |o, i| out[o] = xv[i]);
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::Permute(x, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(dim_err("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Explicit broadcast to `shape`.
    ///
    /// The input shape is right-aligned against the target; each of its
    /// extents must equal the target extent or be 1.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_strides =
            broadcast_strides(self.shape(x), shape).ok_or_else(|| dim_err("broadcast", self.shape(x), shape))?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); numel(shape)];
        for_each_strided(shape, &src_strides, |o, i| out[o] = xv[i]);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Broadcast(x)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(dim_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d]) {
                return Err(dim_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis)))
    }

    /// Range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err("slice", &shape, &[axis, start, len]));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let t = Tensor::new(&s, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        self.push(t, Op::Mean(x))
    }

    fn reduce_axis(&self, x: Var, axis: usize) -> Result<(Vec<usize>, Vec<T>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("reduce", &shape, &[axis]));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let src = &d[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut s: Vec<usize> = shape.clone();
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        Ok((s, out))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (s, out) = self.reduce_axis(x, axis)?;
        let t = Tensor::new(&s, out)?;
        Ok(self.push(t, Op::SumAxis(x, axis)))
    }

    /// Averages out `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (s, mut out) = self.reduce_axis(x, axis)?;
        let inv = T::one() / T::of(self.shape(x)[axis] as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(&s, out)?;
        Ok(self.push(t, Op::MeanAxis(x, axis)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| gelu(v).0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax", &shape, &[axis]));
        }
        let xv = self.value(x).data();
        if cfg!(debug_assertions) && xv.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * ext + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..ext {
                    mx = mx.max(xv[at(a)]);
                }
                let mut s = T::zero();
                for a in 0..ext {
                    let e = (xv[at(a)] - mx).exp();
                    out[at(a)] = e;
                    s += e;
                }
                for a in 0..ext {
                    out[at(a)] /= s;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Softmax(x, axis)))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (row, orow) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let t = Tensor::new(&shape, out).unwrap();
        self.push(t, Op::LogSoftmax(x))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        let mut norms = Vec::with_capacity(xv.len() / n);
        for (r, row) in xv.chunks(n).enumerate() {
            let nr = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(nr > T::zero()) {
                return Err(Error::Numeric(format!("l2_normalize: row {r} has zero norm")));
            }
            out.extend(row.iter().map(|&v| v / nr));
            norms.push(nr);
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::L2Normalize { x, norms }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(dim_err("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let inv_n = T::one() / T::of(n as f64);
        let eps = T::of(eps);
        let mut out = Vec::with_capacity(xv.len());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.len() / n);
        for row in xv.chunks(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
            rstd.push(rs);
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// 2-D cross-correlation of `x: [N,C,H,W]` with `w: [F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        let geom = ConvGeometry { channels: sx[1], height: sx[2], width: sx[3], kh: sw[2], kw: sw[3], stride, padding };
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        let (n, f) = (sx[0], sw[0]);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let plane = geom.channels * geom.height * geom.width;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * f * ho * wo];
        for b in 0..n {
            let cols = kernels::im2col(&xv[b * plane..(b + 1) * plane], &geom);
            kernels::gemm_nn(wv, &cols, &mut out[b * f * ho * wo..(b + 1) * f * ho * wo], f, geom.col_rows(), ho * wo);
        }
        let t = Tensor::new(&[n, f, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, geom, filters: f }))
    }

    /// Gathers rows of `table: [V, d]` into `[indices.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(dim_err("embedding_lookup", &shape, indices));
        }
        let d = shape[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[indices.len(), d], out)?;
        Ok(self.push(t, Op::EmbeddingLookup { table, indices: indices.to_vec() }))
    }

    /// Selects `x[i, indices[i]]` from `x: [N, C]`, giving `[N]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || indices.len() != shape[0] || indices.iter().any(|&i| i >= shape[1]) {
            return Err(dim_err("pick", &shape, indices));
        }
        let xv = self.value(x).data();
        let out = indices.iter().enumerate().map(|(r, &c)| xv[r * shape[1] + c]).collect();
        let t = Tensor::new(&[shape[0]], out)?;
        Ok(self.push(t, Op::Pick { x, indices: indices.to_vec() }))
    }

    /// Bilinear extraction of `K×K` patches centred on normalized landmarks.
    ///
    /// `image` is `[N,C,H,W]`, `centers` is `[N,R,2]` holding `(x, y)` in
    /// `[0,1]` relative to width/height. Pixel `i` covers the continuous
    /// interval `[i, i+1)`, so its centre sits at `i + 0.5`. The patch samples
    /// a unit-spaced `K×K` grid of pixel centres around the landmark; taps
    /// outside the image are clamped to the border. Output is `[N,R,C,K,K]`.
    pub fn grid_sample(&mut self, image: Var, centers: Var, k: usize) -> Result<Var> {
        let si = self.shape(image).to_vec();
        let sc = self.shape(centers).to_vec();
        if si.len() != 4 || sc.len() != 3 || sc[2] != 2 || si[0] != sc[0] || k == 0 {
            return Err(dim_err("grid_sample", &si, &sc));
        }
        if !self.value(centers).is_finite() {
            return Err(Error::Numeric("grid_sample: non-finite landmark".into()));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let r = sc[1];
        let img = self.value(image).data();
        let ctr = self.value(centers).data();
        let mut out = Vec::with_capacity(n * r * c * k * k);
        for b in 0..n {
            for l in 0..r {
                let (ox, oy) = patch_origin(ctr[(b * r + l) * 2], ctr[(b * r + l) * 2 + 1], w, h, k);
                for ch in 0..c {
                    let plane = &img[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for v in 0..k {
                        for u in 0..k {
                            let px = ox + T::of(u as f64);
                            let py = oy + T::of(v as f64);
                            out.push(bilinear_tap(plane, h, w, px, py).0);
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[n, r, c, k, k], out)?;
        Ok(self.push(t, Op::GridSample { image, centers, k }))
    }
}

/// Pixel-space coordinate of the top-left sample of a `K×K` patch centred at
/// a normalized landmark.
#[inline]
pub(crate) fn patch_origin<T: Real>(x: T, y: T, w: usize, h: usize, k: usize) -> (T, T) {
    // continuous centre minus half the window; then shift to pixel index space
    let half = T::of(k as f64 * 0.5);
    let px = x * T::of(w as f64) - half;
    let py = y * T::of(h as f64) - half;
    (px, py)
}

pub(crate) fn broadcast_strides(from: &[usize], to: &[usize]) -> Option<Vec<usize>> {
    if from.len() > to.len() {
        return None;
    }
    let pad = to.len() - from.len();
    let st = strides(from);
    let mut out = vec![0; to.len()];
    for d in 0..from.len() {
        let t = to[pad + d];
        if from[d] == t {
            out[pad + d] = st[d];
        } else if from[d] != 1 {
            return None;
        }
    }
    Some(out)
}
