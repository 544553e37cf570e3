//! Landmark regression and differentiable patch extraction.
//!
//! Coordinate convention: a landmark `(x, y)` is normalized to `[0, 1]`
//! relative to image width/height; the continuous image plane spans
//! `[0, W] × [0, H]` and pixel `i` has its centre at `i + 0.5`.

use alloc::format;
use alloc::vec::Vec;

use rand::RngCore;

use crate::autodiff::{Graph, Var};
use crate::config::{LandmarkNetConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, DecayGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vit::Linear;

/// Landmark CNN: stride-2 conv stages with ReLU, global average pooling and a
/// linear head emitting `2R` values squashed to `[0, 1]` by a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkNet {
    pub convs: Vec<(ParamId, ParamId)>,
    pub head: Linear,
    pub stride: usize,
    pub padding: usize,
    pub num_landmarks: usize,
}

/// Output of [`LandmarkNet::forward`].
pub struct LandmarkOutput {
    /// `[N,R,2]` normalized `(x, y)` coordinates.
    pub landmarks: Var,
    /// `[N,F]` pooled feature preceding the regression head.
    pub feature: Var,
}

impl LandmarkNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let lc: &LandmarkNetConfig = &cfg.landmark;
        let k = lc.kernel_size;
        let mut convs = Vec::with_capacity(lc.channels.len());
        let mut cin = cfg.channels;
        for (i, &cout) in lc.channels.iter().enumerate() {
            let std = libm::sqrt(2.0 / (cin * k * k) as f64);
            let w = store.add(
                &format!("landmark.conv{i}.weight"),
                Tensor::randn(&[cout, cin, k, k], std, rng),
                DecayGroup::LandmarkNet,
            );
            let b = store.add(&format!("landmark.conv{i}.bias"), Tensor::zeros(&[cout]), DecayGroup::NoDecay);
            convs.push((w, b));
            cin = cout;
        }
        let r = cfg.num_patches;
        let head = Linear::new(
            store,
            "landmark.head",
            lc.feature_dim(),
            2 * r,
            lc.head_init_std,
            DecayGroup::LandmarkNet,
            rng,
        );
        // start from the regular grid of patch centres
        let grid = grid_centers(r);
        let bias: Vec<T> = grid.iter().map(|&c| T::of(libm::log(c / (1.0 - c)))).collect();
        store.set("landmark.head.bias", Tensor::new(&[2 * r], bias).unwrap()).unwrap();
        Self { convs, head, stride: lc.stride, padding: k / 2, num_landmarks: r }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: Var,
        cfg: &ModelConfig,
    ) -> Result<LandmarkOutput> {
        check_image(g, image, cfg)?;
        let n = g.shape(image)[0];
        let mut x = image;
        for &(w, b) in &self.convs {
            x = g.conv2d(x, p[w], self.stride, self.padding)?;
            let s = g.shape(x).to_vec();
            let bias = g.reshape(p[b], &[s[1], 1, 1])?;
            let bias = g.broadcast(bias, &s)?;
            x = g.add(x, bias)?;
            x = g.relu(x);
        }
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let feature = g.mean_axis(flat, 2)?;
        let raw = self.head.forward(g, p, feature)?;
        let squashed = g.sigmoid(raw);
        let landmarks = g.reshape(squashed, &[n, self.num_landmarks, 2])?;
        Ok(LandmarkOutput { landmarks, feature })
    }
}

pub(crate) fn check_image<T: Real>(g: &Graph<T>, image: Var, cfg: &ModelConfig) -> Result<()> {
    let s = g.shape(image);
    if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_height || s[3] != cfg.image_width {
        return Err(Error::Config(format!(
            "image shape {s:?} does not match configured [N,{},{},{}]",
            cfg.channels, cfg.image_height, cfg.image_width
        )));
    }
    Ok(())
}

/// Normalized centres of a `√R × √R` grid, flattened as `(x, y)` pairs in
/// row-major cell order. Falls back to a centred column when `R` is not a
/// perfect square.
fn grid_centers(r: usize) -> Vec<f64> {
    let side = libm::round(libm::sqrt(r as f64)) as usize;
    let mut out = Vec::with_capacity(2 * r);
    if side * side == r {
        for i in 0..side {
            for j in 0..side {
                out.push((j as f64 + 0.5) / side as f64);
                out.push((i as f64 + 0.5) / side as f64);
            }
        }
    } else {
        for i in 0..r {
            out.push(0.5);
            out.push((i as f64 + 0.5) / r as f64);
        }
    }
    out
}

/// Patch centres of the non-overlapping tiling as a `[batch, R, 2]` tensor.
pub fn regular_grid_landmarks<T: Real>(cfg: &ModelConfig, batch: usize) -> Result<Tensor<T>> {
    let k = cfg.grid_patch_size()?;
    let side = cfg.image_height / k;
    let mut data = Vec::with_capacity(batch * cfg.num_patches * 2);
    for _ in 0..batch {
        for i in 0..side {
            for j in 0..side {
                data.push(T::of((j * k) as f64 + k as f64 / 2.0) / T::of(cfg.image_width as f64));
                data.push(T::of((i * k) as f64 + k as f64 / 2.0) / T::of(cfg.image_height as f64));
            }
        }
    }
    Tensor::new(&[batch, cfg.num_patches, 2], data)
}

/// Samples a `K×K` patch at every landmark: `[N,C,H,W]` × `[N,R,2]` →
/// `[N,R,C,K,K]`, differentiable in both arguments.
pub fn grid_sample_patches<T: Real>(g: &mut Graph<T>, image: Var, landmarks: Var, k: usize) -> Result<Var> {
    if k == 0 {
        return Err(Error::Config("patch size must be at least 1".into()));
    }
    g.grid_sample(image, landmarks, k)
}

/// Information-bottleneck violation: each visual token receives
/// `proj([feature ; pos_i])` instead of its plain positional vector.
///
/// `feature` is `[N,F]`, `pos` is `[N,R,d]`; the result is `[N,R,d]`.
pub fn bottleneck_violation_inject<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    feature: Var,
    pos: Var,
    projector: &Linear,
) -> Result<Var> {
    let fs = g.shape(feature).to_vec();
    let ps = g.shape(pos).to_vec();
    if fs.len() != 2 || ps.len() != 3 || fs[0] != ps[0] || projector.in_dim != fs[1] + ps[2] {
        return Err(crate::error::dim_err("bottleneck_violation_inject", &fs, &ps));
    }
    let f = g.reshape(feature, &[fs[0], 1, fs[1]])?;
    let f = g.broadcast(f, &[ps[0], ps[1], fs[1]])?;
    let joined = g.concat(&[f, pos], 2)?;
    projector.forward(g, p, joined)
}
