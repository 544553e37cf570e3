//! Vector-Jacobian products for every recorded operation.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, bilinear_tap, for_each_strided, strides, BilinearTaps};
use super::ops::{broadcast_strides, gelu, patch_origin, split_axis};
use super::{Graph, Op, Var};
use crate::real::Real;

impl<T: Real> Graph<T> {
    /// Gradient contributions of node `i` to its inputs, given its output
    /// gradient `g`. Inputs that do not require gradients are skipped.
    pub(super) fn backward_node(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        let mut res: Vec<(Var, Vec<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    res.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    res.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    res.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    res.push((*b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    res.push((*a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect()));
                }
                if needs(*b) {
                    res.push((*b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::MatMul { a, b, batch, m, k, n, shared_rhs } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    if *shared_rhs {
                        kernels::gemm_nt(g, bv, &mut da, batch * m, n, k);
                    } else {
                        for bi in 0..batch {
                            kernels::gemm_nt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv[bi * k * n..(bi + 1) * k * n],
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    res.push((*a, da));
                }
                if needs(*b) {
                    let mut db;
                    if *shared_rhs {
                        db = vec![T::zero(); k * n];
                        kernels::gemm_tn(av, g, &mut db, k, batch * m, n);
                    } else {
                        db = vec![T::zero(); batch * k * n];
                        for bi in 0..batch {
                            kernels::gemm_tn(
                                &av[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                    }
                    res.push((*b, db));
                }
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Permute(x, axes) => {
                let in_shape = self.nodes[x.0].value.shape();
                let st = strides(in_shape);
                let src: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
                let mut dx = vec![T::zero(); g.len()];
                for_each_strided(node.value.shape(), &src, |o, s| dx[s] = g[o]);
                res.push((*x, dx));
            }
            Op::Broadcast(x) => {
                let in_shape = self.nodes[x.0].value.shape();
                let src = broadcast_strides(in_shape, node.value.shape()).unwrap();
                let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                for_each_strided(node.value.shape(), &src, |o, s| dx[s] += g[o]);
                res.push((*x, dx));
            }
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let ext = self.nodes[x.0].value.shape()[*axis];
                    if needs(x) {
                        let mut dx = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        res.push((x, dx));
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.nodes[x.0].value.shape();
                let (outer, ext, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*x, dx));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.nodes[x.0].value.len()])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                res.push((*x, vec![g[0] / T::of(n as f64); n]));
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let in_shape = self.nodes[x.0].value.shape();
                let (outer, ext, inner) = split_axis(in_shape, *axis);
                let c = if matches!(node.op, Op::MeanAxis(..)) { T::one() / T::of(ext as f64) } else { T::one() };
                let mut dx = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    for a in 0..ext {
                        for j in 0..inner {
                            dx[(o * ext + a) * inner + j] = g[o * inner + j] * c;
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Relu(x) => res
                .push((*x, g.iter().zip(val(*x)).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect())),
            Op::Gelu(x) => res.push((*x, g.iter().zip(val(*x)).map(|(&d, &v)| d * gelu(v).1).collect())),
            Op::Sigmoid(x) => res.push((*x, g.iter().zip(out).map(|(&d, &y)| d * y * (T::one() - y)).collect())),
            Op::Tanh(x) => res.push((*x, g.iter().zip(out).map(|(&d, &y)| d * (T::one() - y * y)).collect())),
            Op::Softmax(x, axis) => {
                let (outer, ext, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |a: usize| (o * ext + a) * inner + j;
                        let mut dot = T::zero();
                        for a in 0..ext {
                            dot += g[at(a)] * out[at(a)];
                        }
                        for a in 0..ext {
                            dx[at(a)] = out[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, orow) in g.chunks(n).zip(out.chunks(n)) {
                    let s: T = grow.iter().copied().sum();
                    dx.extend(grow.iter().zip(orow).map(|(&d, &y)| d - y.exp() * s));
                }
                res.push((*x, dx));
            }
            Op::L2Normalize { x, norms } => {
                let n = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, yrow), &nr) in g.chunks(n).zip(out.chunks(n)).zip(norms) {
                    let dot = kernels::dot(grow, yrow);
                    dx.extend(grow.iter().zip(yrow).map(|(&d, &y)| (d - y * dot) / nr));
                }
                res.push((*x, dx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = *node.value.shape().last().unwrap();
                let gm = val(*gamma);
                if needs(*x) {
                    let inv_n = T::one() / T::of(n as f64);
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, hrow), &rs) in g.chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dh = grow[j] * gm[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        s1 *= inv_n;
                        s2 *= inv_n;
                        for j in 0..n {
                            dx.push(rs * (grow[j] * gm[j] - s1 - hrow[j] * s2));
                        }
                    }
                    res.push((*x, dx));
                }
                if needs(*gamma) {
                    let mut dg = vec![T::zero(); n];
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    res.push((*gamma, dg));
                }
                if needs(*beta) {
                    let mut db = vec![T::zero(); n];
                    for grow in g.chunks(n) {
                        for j in 0..n {
                            db[j] += grow[j];
                        }
                    }
                    res.push((*beta, db));
                }
            }
            Op::Conv2d { x, w, geom, filters } => {
                let nimg = self.nodes[x.0].value.shape()[0];
                let plane = geom.channels * geom.height * geom.width;
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = if needs(*x) { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut dw = if needs(*w) { vec![T::zero(); wv.len()] } else { Vec::new() };
                for b in 0..nimg {
                    let gb = &g[b * filters * cols_n..(b + 1) * filters * cols_n];
                    if needs(*w) {
                        let cols = kernels::im2col(&xv[b * plane..(b + 1) * plane], geom);
                        kernels::gemm_nt(gb, &cols, &mut dw, *filters, cols_n, rows);
                    }
                    if needs(*x) {
                        let mut dcols = vec![T::zero(); rows * cols_n];
                        kernels::gemm_tn(wv, gb, &mut dcols, rows, *filters, cols_n);
                        kernels::col2im(&dcols, geom, &mut dx[b * plane..(b + 1) * plane]);
                    }
                }
                if needs(*x) {
                    res.push((*x, dx));
                }
                if needs(*w) {
                    res.push((*w, dw));
                }
            }
            Op::EmbeddingLookup { table, indices } => {
                let d = self.nodes[table.0].value.shape()[1];
                let mut dt = vec![T::zero(); self.nodes[table.0].value.len()];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += g[r * d + j];
                    }
                }
                res.push((*table, dt));
            }
            Op::Pick { x, indices } => {
                let c = self.nodes[x.0].value.shape()[1];
                let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                for (r, &idx) in indices.iter().enumerate() {
                    dx[r * c + idx] = g[r];
                }
                res.push((*x, dx));
            }
            Op::GridSample { image, centers, k } => {
                let k = *k;
                let si = self.nodes[image.0].value.shape();
                let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                let r = self.nodes[centers.0].value.shape()[1];
                let img = val(*image);
                let ctr = val(*centers);
                let mut dimg = if needs(*image) { vec![T::zero(); img.len()] } else { Vec::new() };
                let mut dctr = vec![T::zero(); ctr.len()];
                let one = T::one();
                let (wf, hf) = (T::of(w as f64), T::of(h as f64));
                let mut gi = 0;
                for b in 0..n {
                    for l in 0..r {
                        let ci = (b * r + l) * 2;
                        let (ox, oy) = patch_origin(ctr[ci], ctr[ci + 1], w, h, k);
                        let (mut gx, mut gy) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let base = (b * c + ch) * h * w;
                            let plane = &img[base..base + h * w];
                            for v in 0..k {
                                for u in 0..k {
                                    let d = g[gi];
                                    gi += 1;
                                    let px = ox + T::of(u as f64);
                                    let py = oy + T::of(v as f64);
                                    let (_, dpx, dpy) = bilinear_tap(plane, h, w, px, py);
                                    gx += d * dpx;
                                    gy += d * dpy;
                                    if !dimg.is_empty() {
                                        let t = BilinearTaps::new(h, w, px, py);
                                        let dst = &mut dimg[base..base + h * w];
                                        dst[t.y0 * w + t.x0] += d * (one - t.fy) * (one - t.fx);
                                        dst[t.y0 * w + t.x1] += d * (one - t.fy) * t.fx;
                                        dst[t.y1 * w + t.x0] += d * t.fy * (one - t.fx);
                                        dst[t.y1 * w + t.x1] += d * t.fy * t.fx;
                                    }
                                }
                            }
                        }
                        dctr[ci] = gx * wf;
                        dctr[ci + 1] = gy * hf;
                    }
                }
                if needs(*image) {
                    res.push((*image, dimg));
                }
                if needs(*centers) {
                    res.push((*centers, dctr));
                }
            }
        }
        res
    }
}
