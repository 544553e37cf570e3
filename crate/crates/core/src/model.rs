//! The holistic and part-based face transformers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, PosEncoding, Variant};
use crate::error::{Error, Result};
use crate::params::{Bound, DecayGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::sampler::{self, bottleneck_violation_inject, grid_sample_patches, LandmarkNet};
use crate::tensor::Tensor;
use crate::vit::{self, prepend_class_token, transformer_layer, Block, LayerNorm, Linear, Mode, PositionalEncoding};

/// Name prefix of the classification head, which is not part of the backbone.
pub const HEAD_PREFIX: &str = "cosface.";

/// Graph handles produced by a forward pass.
pub struct ForwardOutput {
    /// `[B,d]` final class token after the terminal layer norm.
    pub embedding: Var,
    /// Per-layer attention weights `[B,h,T,T]`.
    pub attention: Vec<Var>,
    /// `[B,R,2]` landmarks used for sampling (part variant).
    pub landmarks: Option<Var>,
    /// `[B,F]` pooled landmark-CNN feature (part variant).
    pub feature: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceModel<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub patch_embed: Linear,
    pub class_token: ParamId,
    pub pos: PositionalEncoding,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub landmark: Option<LandmarkNet>,
    pub bottleneck: Option<Linear>,
    /// `[d, classes]` CosFace class weights.
    pub head: Option<ParamId>,
    pub num_classes: usize,
}

impl<T: Real> FaceModel<T> {
    /// Builds a randomly initialized model. `num_classes = 0` omits the head.
    pub fn new(cfg: ModelConfig, num_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let d = cfg.embed_dim;
        let patch_embed = Linear::new(&mut store, "patch_embed", cfg.patch_dim(), d, 0.02, DecayGroup::Backbone, rng);
        let class_token = store.add("class_token", Tensor::randn(&[1, d], 0.02, rng), DecayGroup::NoDecay);
        let pos = PositionalEncoding::new(&mut store, &cfg, rng);
        let blocks = (0..cfg.depth).map(|i| Block::new(&mut store, &format!("blocks.{i}"), &cfg, rng)).collect();
        let final_norm = LayerNorm::new(&mut store, "final_norm", d);
        let (landmark, bottleneck) = match cfg.variant {
            Variant::Part => {
                let net = LandmarkNet::new(&mut store, &cfg, rng);
                let bn = cfg.bottleneck_violation.then(|| {
                    Linear::new(
                        &mut store,
                        "bottleneck.proj",
                        cfg.landmark.feature_dim() + d,
                        d,
                        0.02,
                        DecayGroup::Backbone,
                        rng,
                    )
                });
                (Some(net), bn)
            }
            Variant::Holistic => (None, None),
        };
        let head = (num_classes > 0).then(|| {
            store.add(
                &format!("{HEAD_PREFIX}weight"),
                Tensor::randn(&[d, num_classes], 0.01, rng),
                DecayGroup::Backbone,
            )
        });
        Ok(Self {
            cfg,
            store,
            patch_embed,
            class_token,
            pos,
            blocks,
            final_norm,
            landmark,
            bottleneck,
            head,
            num_classes,
        })
    }

    /// Rebuilds a model from named tensors. Every parameter of the
    /// architecture must be supplied exactly once with the right shape.
    pub fn from_named(cfg: ModelConfig, num_classes: usize, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(cfg, num_classes, 0)?;
        let mut seen = alloc::vec![false; model.store.len()];
        for (name, t) in tensors {
            let id = model.store.id(&name).ok_or_else(|| Error::UnknownKey(name.clone()))?;
            if core::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Contract(format!("parameter {name} supplied twice")));
            }
            model.store.set(&name, t)?;
        }
        if let Some((_, p)) = model.store.iter().find(|(id, _)| !seen[id.index()]) {
            return Err(Error::MissingKey(p.name.clone()));
        }
        Ok(model)
    }

    /// Scalar parameter count excluding the classification head.
    pub fn backbone_parameter_count(&self) -> usize {
        self.store.count_where(|n| !n.starts_with(HEAD_PREFIX))
    }

    /// Runs the transformer stack over `[B,R,d]` visual tokens with their
    /// additive positional vectors and returns the normalized class token.
    fn encode(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: Var,
        additive: Var,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        let mut z = prepend_class_token(g, p, tokens, additive, self.class_token, self.pos.class_slot)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = transformer_layer(g, p, block, z, &self.cfg, mode)?;
            z = out.tokens;
            attention.push(out.attention);
        }
        let z = self.final_norm.forward(g, p, z, self.cfg.layer_norm_eps)?;
        let b = g.shape(z)[0];
        let cls = g.slice(z, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, self.cfg.embed_dim])?;
        Ok((cls, attention))
    }

    /// Regular-grid forward pass. Only transformer weights are used, so it
    /// also runs on a part model whose geometry admits the tiling.
    pub fn fvit_forward(&self, g: &mut Graph<T>, p: &Bound, image: Var, mode: &mut Mode<'_>) -> Result<ForwardOutput> {
        let patches = vit::patchify(g, image, &self.cfg)?;
        let tokens = self.patch_embed.forward(g, p, patches)?;
        let b = g.shape(image)[0];
        let landmarks = if self.pos.kind == PosEncoding::Coordinate {
            Some(g.constant(sampler::regular_grid_landmarks(&self.cfg, b)?))
        } else {
            None
        };
        let additive = self.pos.vectors(g, p, b, self.cfg.num_patches, self.cfg.embed_dim, landmarks)?;
        let (embedding, attention) = self.encode(g, p, tokens, additive, mode)?;
        Ok(ForwardOutput { embedding, attention, landmarks, feature: None })
    }

    /// Landmark-driven forward pass. `landmarks` overrides the CNN output
    /// (the CNN still runs when the bottleneck violation needs its feature).
    pub fn part_fvit_forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: Var,
        mode: &mut Mode<'_>,
        landmarks: Option<Var>,
    ) -> Result<ForwardOutput> {
        let net = self.landmark.as_ref().ok_or_else(|| Error::Config("part forward needs the part variant".into()))?;
        sampler::check_image(g, image, &self.cfg)?;
        let b = g.shape(image)[0];
        let (landmarks, feature) = match landmarks {
            Some(lm) if self.bottleneck.is_none() => (lm, None),
            Some(lm) => (lm, Some(net.forward(g, p, image, &self.cfg)?.feature)),
            None => {
                let out = net.forward(g, p, image, &self.cfg)?;
                (out.landmarks, Some(out.feature))
            }
        };
        let patches = grid_sample_patches(g, image, landmarks, self.cfg.patch_size)?;
        let patches = g.reshape(patches, &[b, self.cfg.num_patches, self.cfg.patch_dim()])?;
        let tokens = self.patch_embed.forward(g, p, patches)?;
        let mut additive = self.pos.vectors(g, p, b, self.cfg.num_patches, self.cfg.embed_dim, Some(landmarks))?;
        if let Some(proj) = &self.bottleneck {
            let f = feature.expect("feature computed when bottleneck is violated");
            additive = bottleneck_violation_inject(g, p, f, additive, proj)?;
        }
        let (embedding, attention) = self.encode(g, p, tokens, additive, mode)?;
        Ok(ForwardOutput { embedding, attention, landmarks: Some(landmarks), feature })
    }

    /// Dispatches on the configured variant.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, image: Var, mode: &mut Mode<'_>) -> Result<ForwardOutput> {
        match self.cfg.variant {
            Variant::Holistic => self.fvit_forward(g, p, image, mode),
            Variant::Part => self.part_fvit_forward(g, p, image, mode, None),
        }
    }

    /// Eval-mode embeddings `[B,d]` for a batch of images.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &p, x, &mut Mode::Eval)?;
        Ok(g.value(out.embedding).clone())
    }

    /// Eval-mode landmarks `[B,R,2]` (part variant only).
    pub fn landmarks(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let net = self.landmark.as_ref().ok_or_else(|| Error::Config("landmarks need the part variant".into()))?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let out = net.forward(&mut g, &p, x, &self.cfg)?;
        Ok(g.value(out.landmarks).clone())
    }
}
