//! Procedural identity images.
//!
//! Each identity is a latent of face shape, colours and five part
//! placements (two eyes, nose, two mouth corners). Each image adds a global
//! shift, an in-plane rotation, a brightness change and pixel noise. The
//! five part centres are reported in normalized `(x, y)` coordinates.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of annotated parts per face.
pub const NUM_PARTS: usize = 5;
/// Indices of the two eyes among the parts.
pub const EYES: (usize, usize) = (0, 1);

/// Canonical part centres relative to the face centre, in units of the
/// image side.
const CANONICAL: [[f64; 2]; NUM_PARTS] = [[-0.11, -0.08], [0.11, -0.08], [0.0, 0.04], [-0.08, 0.15], [0.08, 0.15]];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticFaceSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Maximum global shift as a fraction of the image side.
    pub max_shift: f64,
    pub max_rotation_deg: f64,
    /// Maximum relative brightness change.
    pub max_brightness: f64,
    pub noise_std: f64,
}

impl Default for SyntheticFaceSpec {
    fn default() -> Self {
        Self {
            num_identities: 10,
            images_per_identity: 50,
            image_size: 56,
            seed: 0,
            max_shift: 0.12,
            max_rotation_deg: 10.0,
            max_brightness: 0.15,
            noise_std: 0.02,
        }
    }
}

impl SyntheticFaceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.images_per_identity == 0 {
            return Err(Error::Config(format!(
                "need at least one identity and one image per identity, got {}×{}",
                self.num_identities, self.images_per_identity
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} is too small", self.image_size)));
        }
        let ok = (0.0..0.3).contains(&self.max_shift)
            && (0.0..=45.0).contains(&self.max_rotation_deg)
            && (0.0..1.0).contains(&self.max_brightness)
            && self.noise_std >= 0.0;
        if !ok {
            return Err(Error::Config(format!("nuisance ranges out of bounds in {self:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_identities * self.images_per_identity
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Identity-defining appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceLatent {
    pub skin: [f32; 3],
    pub background: [f32; 3],
    /// Face ellipse half-axes as fractions of the image side.
    pub face_radii: [f64; 2],
    pub part_offsets: [[f64; 2]; NUM_PARTS],
    pub part_colors: [[f32; 3]; NUM_PARTS],
    pub part_radii: [[f64; 2]; NUM_PARTS],
}

/// Per-image nuisance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub shift: [f64; 2],
    pub rotation: f64,
    pub brightness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub identity: usize,
    pub index: usize,
    /// `[3, S, S]` in `[0,1]`.
    pub image: Tensor<f32>,
    pub parts: [[f64; 2]; NUM_PARTS],
}

fn keyed_rng(seed: u64, a: u64, b: u64, tag: &[u8; 8]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..].copy_from_slice(tag);
    ChaCha8Rng::from_seed(key)
}

fn color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Deterministic in `(spec.seed, identity)`.
pub fn identity_latent(spec: &SyntheticFaceSpec, identity: usize) -> FaceLatent {
    let mut rng = keyed_rng(spec.seed, identity as u64, 0, b"identity");
    let skin = color(&mut rng, 0.45, 0.9);
    let background = color(&mut rng, 0.0, 0.3);
    let face_radii = [rng.random_range(0.24..0.32), rng.random_range(0.30..0.38)];
    let mut part_offsets = [[0.0; 2]; NUM_PARTS];
    let mut part_colors = [[0.0; 3]; NUM_PARTS];
    let mut part_radii = [[0.0; 2]; NUM_PARTS];
    for i in 0..NUM_PARTS {
        part_offsets[i] = [rng.random_range(-0.035..0.035), rng.random_range(-0.035..0.035)];
        part_colors[i] = color(&mut rng, 0.0, 0.5);
        part_radii[i] = [rng.random_range(0.03..0.06), rng.random_range(0.02..0.045)];
    }
    FaceLatent { skin, background, face_radii, part_offsets, part_colors, part_radii }
}

/// Deterministic in `(spec.seed, identity, index)`.
pub fn nuisance(spec: &SyntheticFaceSpec, identity: usize, index: usize) -> Nuisance {
    let mut rng = keyed_rng(spec.seed, identity as u64, index as u64, b"nuisance");
    let s = spec.max_shift;
    let r = spec.max_rotation_deg.to_radians();
    let b = spec.max_brightness;
    Nuisance {
        shift: [sym(&mut rng, s), sym(&mut rng, s)],
        rotation: sym(&mut rng, r),
        brightness: 1.0 + sym(&mut rng, b),
    }
}

fn sym(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..half)
    } else {
        0.0
    }
}

/// Smooth inside-indicator of a rotated ellipse, one half on the boundary.
fn ellipse(px: f64, py: f64, c: [f64; 2], r: [f64; 2], cos: f64, sin: f64, softness: f64) -> f64 {
    let (dx, dy) = (px - c[0], py - c[1]);
    let u = (cos * dx + sin * dy) / r[0];
    let v = (-sin * dx + cos * dy) / r[1];
    let d = libm::sqrt(u * u + v * v);
    let min_r = r[0].min(r[1]);
    1.0 / (1.0 + libm::exp((d - 1.0) * min_r / softness))
}

/// Renders one image and its part centres.
#[allow(clippy::needless_range_loop)]
pub fn render(spec: &SyntheticFaceSpec, latent: &FaceLatent, nz: &Nuisance, noise_seed: u64) -> SynthSample {
    let n = spec.image_size;
    let (cos, sin) = (libm::cos(nz.rotation), libm::sin(nz.rotation));
    let centre = [0.5 + nz.shift[0], 0.5 + nz.shift[1]];
    let rot = |o: [f64; 2]| [centre[0] + cos * o[0] - sin * o[1], centre[1] + sin * o[0] + cos * o[1]];
    let mut parts = [[0.0; 2]; NUM_PARTS];
    for i in 0..NUM_PARTS {
        let o = [CANONICAL[i][0] + latent.part_offsets[i][0], CANONICAL[i][1] + latent.part_offsets[i][1]];
        parts[i] = rot(o);
    }
    let softness = 0.6 / n as f64;
    let mut img = vec![0f32; 3 * n * n];
    let mut rng = keyed_rng(spec.seed, noise_seed, 0, b"pxnoise\0");
    let noise = Normal::new(0.0, spec.noise_std.max(1e-12)).expect("finite std");
    for y in 0..n {
        for x in 0..n {
            let (px, py) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let face = ellipse(px, py, centre, latent.face_radii, cos, sin, softness);
            let mut rgb = [0.0f64; 3];
            for ch in 0..3 {
                rgb[ch] = latent.background[ch] as f64 * (1.0 - face) + latent.skin[ch] as f64 * face;
            }
            for (i, p) in parts.iter().enumerate() {
                let a = ellipse(px, py, *p, latent.part_radii[i], cos, sin, softness);
                for ch in 0..3 {
                    rgb[ch] = rgb[ch] * (1.0 - a) + latent.part_colors[i][ch] as f64 * a;
                }
            }
            for ch in 0..3 {
                let mut v = rgb[ch] * nz.brightness;
                if spec.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                img[(ch * n + y) * n + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    SynthSample { identity: 0, index: 0, image: Tensor::new(&[3, n, n], img).expect("consistent shape"), parts }
}

/// One sample, deterministic in `(spec, identity, index)`.
pub fn generate_one(spec: &SyntheticFaceSpec, identity: usize, index: usize) -> SynthSample {
    let latent = identity_latent(spec, identity);
    let nz = nuisance(spec, identity, index);
    let key = (identity as u64) << 32 | index as u64;
    let mut s = render(spec, &latent, &nz, key);
    s.identity = identity;
    s.index = index;
    s
}

/// The full dataset, identity-major.
pub fn generate(spec: &SyntheticFaceSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.len());
    for id in 0..spec.num_identities {
        for k in 0..spec.images_per_identity {
            out.push(generate_one(spec, id, k));
        }
    }
    Ok(out)
}
