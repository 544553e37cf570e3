//! Vision Transformer building blocks.
//!
//! Tokens are laid out `[batch, T, d]` with the class token at index 0.
//! Every layer is pre-norm:
//! `Y = Z + MSA(LN(Z))`, then `Z' = Y + MLP(LN(Y))`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, PosEncoding};
use crate::error::{Error, Result};
use crate::params::{Bound, DecayGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Train mode carries the randomness for stochastic depth.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Affine map `x·W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        group: DecayGroup,
        rng: &mut dyn RngCore,
    ) -> Self {
        let weight = store.add(&format!("{name}.weight"), Tensor::randn(&[in_dim, out_dim], std, rng), group);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]), DecayGroup::NoDecay);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        let shape = g.shape(y).to_vec();
        let b = g.broadcast(p[self.bias], &shape)?;
        g.add(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[dim]), DecayGroup::NoDecay),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), DecayGroup::NoDecay),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], eps)
    }
}

/// Query/key/value projections for all heads plus the output projection.
///
/// The `h` per-head `d → d_h` maps are stored side by side as one `d → h·d_h`
/// matrix; `d_h · h` need not equal `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl Attention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let (d, hd) = (cfg.embed_dim, cfg.heads * cfg.head_dim);
        let grp = DecayGroup::Backbone;
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, hd, 0.02, grp, rng),
            key: Linear::new(store, &format!("{name}.key"), d, hd, 0.02, grp, rng),
            value: Linear::new(store, &format!("{name}.value"), d, hd, 0.02, grp, rng),
            output: Linear::new(store, &format!("{name}.output"), hd, d, 0.02, grp, rng),
            heads: cfg.heads,
            head_dim: cfg.head_dim,
        }
    }

    /// Splits `[B,T,h·d_h]` into `[B,h,T,d_h]`.
    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let r = g.reshape(x, &[s[0], s[1], self.heads, self.head_dim])?;
        g.permute(r, &[0, 2, 1, 3])
    }

    /// Multi-head self-attention over `x: [B,T,d]`.
    ///
    /// Returns the projected output and the attention weights `[B,h,T,T]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::one() / T::of(self.head_dim as f64).sqrt());
        let attn = g.softmax(scores, 3)?;
        let y = g.matmul(attn, v)?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b, t, self.heads * self.head_dim])?;
        let out = self.output.forward(g, p, y)?;
        Ok((out, attn))
    }
}

/// A single self-attention head without biases:
/// `y_s = Σ_s' softmax_s'((q_s·k_s')/√d_h) v_s'`.
///
/// `tokens` is `[B,T,d]`, each projection `[d, d_h]`.
pub fn self_attention_head<T: Real>(g: &mut Graph<T>, tokens: Var, w_q: Var, w_k: Var, w_v: Var) -> Result<Var> {
    let dh = g.shape(w_q)[1];
    let q = g.matmul(tokens, w_q)?;
    let k = g.matmul(tokens, w_k)?;
    let v = g.matmul(tokens, w_v)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::one() / T::of(dh as f64).sqrt());
    let last = g.shape(scores).len() - 1;
    let a = g.softmax(scores, last)?;
    g.matmul(a, v)
}

/// Randomly drops a residual branch per sample.
///
/// In train mode each sample's branch is zeroed with probability `prob`
/// and otherwise scaled by `1/(1-prob)`; in eval mode it passes through.
pub fn stochastic_depth<T: Real>(g: &mut Graph<T>, branch: Var, prob: f64, mode: &mut Mode<'_>) -> Result<Var> {
    if !(0.0..1.0).contains(&prob) {
        return Err(Error::Config(format!("stochastic depth probability must be in [0, 1), got {prob}")));
    }
    let rng = match mode {
        Mode::Train(rng) if prob > 0.0 => rng,
        _ => return Ok(branch),
    };
    let shape = g.shape(branch).to_vec();
    let keep = T::of(1.0 / (1.0 - prob));
    let mask: Vec<T> = (0..shape[0]).map(|_| if rng.random::<f64>() < prob { T::zero() } else { keep }).collect();
    let mut mshape = vec![1; shape.len()];
    mshape[0] = shape[0];
    let m = g.constant(Tensor::new(&mshape, mask)?);
    let m = g.broadcast(m, &shape)?;
    g.mul(branch, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let d = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), cfg, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, cfg.mlp_dim, 0.02, DecayGroup::Backbone, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), cfg.mlp_dim, d, 0.02, DecayGroup::Backbone, rng),
        }
    }
}

/// Output of one transformer layer.
pub struct LayerOutput {
    pub tokens: Var,
    /// Attention weights `[B,h,T,T]`.
    pub attention: Var,
}

pub fn transformer_layer<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    block: &Block,
    z: Var,
    cfg: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<LayerOutput> {
    let eps = cfg.layer_norm_eps;
    let h = block.norm1.forward(g, p, z, eps)?;
    let (a, attention) = block.attn.forward(g, p, h)?;
    let a = stochastic_depth(g, a, cfg.stochastic_depth_prob, mode)?;
    let y = g.add(z, a)?;
    let h = block.norm2.forward(g, p, y, eps)?;
    let m = block.fc1.forward(g, p, h)?;
    let m = g.gelu(m);
    let m = block.fc2.forward(g, p, m)?;
    let m = stochastic_depth(g, m, cfg.stochastic_depth_prob, mode)?;
    let tokens = g.add(y, m)?;
    Ok(LayerOutput { tokens, attention })
}

/// Sinusoidal table `[R, d]`: even columns `sin(pos/10000^(2i/d))`, odd
/// columns the matching cosine.
pub fn cosine_table<T: Real>(positions: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions * dim);
    for pos in 0..positions {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let angle = pos as f64 / libm::pow(10_000.0, 2.0 * i / dim as f64);
            data.push(T::of(if j % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) }));
        }
    }
    Tensor::new(&[positions, dim], data).unwrap()
}

/// Positional information added to visual tokens, plus the class slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionalEncoding {
    pub kind: PosEncoding,
    /// Trainable slot added to the class token for every kind.
    pub class_slot: ParamId,
    /// `[R, d]` table, present for the trainable kind.
    pub table: Option<ParamId>,
    /// `2 → d` landmark embedder, present for the coordinate kind.
    pub coord: Option<Linear>,
}

impl PositionalEncoding {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let d = cfg.embed_dim;
        let class_slot = store.add("pos.class_slot", Tensor::randn(&[1, d], 0.02, rng), DecayGroup::NoDecay);
        let table = (cfg.pos_encoding == PosEncoding::Trainable)
            .then(|| store.add("pos.table", Tensor::randn(&[cfg.num_patches, d], 0.02, rng), DecayGroup::NoDecay));
        let coord = (cfg.pos_encoding == PosEncoding::Coordinate)
            .then(|| Linear::new(store, "pos.coord", 2, d, 0.02, DecayGroup::NoDecay, rng));
        Self { kind: cfg.pos_encoding, class_slot, table, coord }
    }

    /// Per-token additive vectors `[B,R,d]` for the visual tokens.
    pub fn vectors<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: usize,
        num_patches: usize,
        dim: usize,
        landmarks: Option<Var>,
    ) -> Result<Var> {
        let shape = [batch, num_patches, dim];
        match self.kind {
            PosEncoding::Trainable => {
                let t = self.table.ok_or_else(|| Error::Contract("missing positional table".into()))?;
                g.broadcast(p[t], &shape)
            }
            PosEncoding::Cosine => {
                let t = g.constant(cosine_table(num_patches, dim));
                g.broadcast(t, &shape)
            }
            PosEncoding::Coordinate => {
                let lm = landmarks
                    .ok_or_else(|| Error::Contract("coordinate positional encoding requires landmarks".into()))?;
                let lin = self.coord.ok_or_else(|| Error::Contract("missing coordinate embedder".into()))?;
                lin.forward(g, p, lm)
            }
        }
    }
}

/// Adds positional vectors `[B,R,d]` to visual tokens and prepends the class
/// token (class embedding plus its slot), giving `[B,R+1,d]`.
pub fn prepend_class_token<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    tokens: Var,
    additive: Var,
    class_token: ParamId,
    class_slot: ParamId,
) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let x = g.add(tokens, additive)?;
    let cls = g.add(p[class_token], p[class_slot])?;
    let cls = g.broadcast(cls, &[s[0], 1, s[2]])?;
    g.concat(&[cls, x], 1)
}

/// Cuts `[N,C,H,W]` into the row-major grid of `K×K` patches, each flattened
/// channel-major, giving `[N,R,C·K·K]`.
pub fn patchify<T: Real>(g: &mut Graph<T>, image: Var, cfg: &ModelConfig) -> Result<Var> {
    cfg.check_tiling()?;
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_height || s[3] != cfg.image_width {
        return Err(Error::Config(format!(
            "image shape {s:?} does not match configured {}x{}x{}",
            cfg.channels, cfg.image_height, cfg.image_width
        )));
    }
    let (n, c, k) = (s[0], s[1], cfg.patch_size);
    let side = s[2] / k;
    let x = g.reshape(image, &[n, c, side, k, side, k])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
    g.reshape(x, &[n, side * side, c * k * k])
}
