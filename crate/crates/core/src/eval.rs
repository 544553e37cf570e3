//! Evaluation protocols: k-fold verification accuracy, TAR@FAR, rank-1
//! identification, patch overlap statistics, forward error and attention
//! maps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = libm::sqrt(dot(a, a) * dot(b, b));
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// Unit-norm copy; zero vectors are a numeric error.
pub fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = libm::sqrt(dot(v, v));
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize a vector of norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// One scored verification pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub score: f64,
    pub same: bool,
    /// Zero-based fold.
    pub fold: usize,
}

fn accuracy_at(pairs: &[&ScoredPair], threshold: f64) -> f64 {
    let hits = pairs.iter().filter(|p| (p.score >= threshold) == p.same).count();
    hits as f64 / pairs.len() as f64
}

/// Threshold maximizing accuracy on `pairs`; candidates are midpoints
/// between consecutive distinct scores plus both extremes. Ties go to the
/// lowest threshold.
pub fn best_threshold(pairs: &[&ScoredPair]) -> f64 {
    let mut s: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut candidates = Vec::with_capacity(s.len() + 1);
    candidates.push(s.first().map_or(0.0, |v| v - 1.0));
    candidates.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(s.last().map_or(0.0, |v| v + 1.0));
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for t in candidates {
        let a = accuracy_at(pairs, t);
        if a > best.0 {
            best = (a, t);
        }
    }
    best.1
}

/// Mean held-out accuracy where each fold is scored at the threshold fitted
/// on the remaining folds.
pub fn verification_accuracy_kfold(pairs: &[ScoredPair], folds: usize) -> Result<f64> {
    if folds < 2 {
        return Err(Error::Contract(format!("need at least 2 folds, got {folds}")));
    }
    if let Some(p) = pairs.iter().find(|p| p.fold >= folds || !p.score.is_finite()) {
        return Err(Error::Contract(format!("pair {p:?} has an invalid fold or score")));
    }
    let mut total = 0.0;
    for f in 0..folds {
        let test: Vec<&ScoredPair> = pairs.iter().filter(|p| p.fold == f).collect();
        let train: Vec<&ScoredPair> = pairs.iter().filter(|p| p.fold != f).collect();
        if test.is_empty() || train.is_empty() {
            return Err(Error::Contract(format!("fold {f} leaves an empty split")));
        }
        total += accuracy_at(&test, best_threshold(&train));
    }
    Ok(total / folds as f64)
}

/// Round-robin fold assignment, a partition of `0..n`.
pub fn assign_folds(n: usize, folds: usize) -> Vec<usize> {
    (0..n).map(|i| i % folds.max(1)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub tar: f64,
    /// Genuine scores strictly above this value are accepted; `-inf` when
    /// every impostor may be accepted.
    pub threshold: f64,
    /// Fewer impostors than `1/far`, so the estimate is coarse.
    pub underpowered: bool,
}

/// True-accept rate at the smallest threshold whose false-accept rate does
/// not exceed `far`.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<TarAtFar> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Contract("TAR@FAR needs genuine and impostor scores".into()));
    }
    if !(0.0..=1.0).contains(&far) {
        return Err(Error::Contract(format!("far {far} outside [0, 1]")));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let n = impostor.len();
    let mut imp = impostor.to_vec();
    imp.sort_by(|a, b| b.total_cmp(a));
    // largest number of accepted impostors allowed
    let mut allowed = libm::floor(far * n as f64) as usize;
    while allowed < n && (allowed + 1) as f64 / n as f64 <= far {
        allowed += 1;
    }
    while allowed > 0 && allowed as f64 / n as f64 > far {
        allowed -= 1;
    }
    let underpowered = far > 0.0 && (n as f64) < 1.0 / far;
    if allowed >= n {
        return Ok(TarAtFar { tar: 1.0, threshold: f64::NEG_INFINITY, underpowered });
    }
    let threshold = imp[allowed];
    let accepted = genuine.iter().filter(|&&g| g > threshold).count();
    Ok(TarAtFar { tar: accepted as f64 / genuine.len() as f64, threshold, underpowered })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rank1 {
    pub accuracy: f64,
    /// Matched gallery index per probe.
    pub assignments: Vec<usize>,
}

/// Nearest gallery entry by cosine similarity; ties go to the lower index.
pub fn rank1_identification(
    probes: &[Vec<f64>],
    probe_labels: &[usize],
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
) -> Result<Rank1> {
    if gallery.is_empty() || gallery.len() != gallery_labels.len() || probes.len() != probe_labels.len() {
        return Err(Error::Contract("gallery must be non-empty and labels must match".into()));
    }
    let mut hits = 0;
    let mut assignments = Vec::with_capacity(probes.len());
    for (p, &label) in probes.iter().zip(probe_labels) {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, g) in gallery.iter().enumerate() {
            let s = cosine(p, g);
            if s > best.0 {
                best = (s, j);
            }
        }
        assignments.push(best.1);
        hits += usize::from(gallery_labels[best.1] == label);
    }
    let accuracy = if probes.is_empty() { 0.0 } else { hits as f64 / probes.len() as f64 };
    Ok(Rank1 { accuracy, assignments })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanVar {
    pub mean: f64,
    pub variance: f64,
}

impl MeanVar {
    /// Population mean and variance.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, variance: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, variance }
    }
}

/// Area shared by two axis-aligned `k×k` squares centred at `a` and `b`,
/// as a fraction of `k²`.
pub fn square_overlap(a: [f64; 2], b: [f64; 2], k: f64) -> f64 {
    let ox = (k - libm::fabs(a[0] - b[0])).max(0.0);
    let oy = (k - libm::fabs(a[1] - b[1])).max(0.0);
    ox * oy / (k * k)
}

/// Overlap of every patch with its nearest neighbour. `landmarks` are
/// normalized `(x, y)`; the squares live in pixel space of a `width×height`
/// image.
pub fn overlap_rate(landmarks: &[[f64; 2]], k: usize, width: usize, height: usize) -> Result<MeanVar> {
    if landmarks.len() < 2 {
        return Err(Error::Contract(format!("overlap needs at least 2 landmarks, got {}", landmarks.len())));
    }
    if k == 0 {
        return Err(Error::Contract("patch size must be at least 1".into()));
    }
    let px: Vec<[f64; 2]> = landmarks.iter().map(|l| [l[0] * width as f64, l[1] * height as f64]).collect();
    let rates: Vec<f64> = (0..px.len())
        .map(|i| {
            let mut best = (f64::INFINITY, 0usize);
            for (j, q) in px.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = (px[i][0] - q[0]) * (px[i][0] - q[0]) + (px[i][1] - q[1]) * (px[i][1] - q[1]);
                if d < best.0 {
                    best = (d, j);
                }
            }
            square_overlap(px[i], px[best.1], k as f64)
        })
        .collect();
    Ok(MeanVar::of(&rates))
}

/// Dataset aggregate: mean of the per-image means and the variance of
/// those means across images.
pub fn aggregate_overlap(per_image: &[MeanVar]) -> MeanVar {
    let means: Vec<f64> = per_image.iter().map(|m| m.mean).collect();
    MeanVar::of(&means)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardError {
    /// Mean point error over inter-ocular distance, times 100.
    pub percent: f64,
    /// The design matrix was rank deficient and a ridge term was added.
    pub regularized: bool,
}

/// Ridge strength used when the least-squares design is rank deficient.
pub const RIDGE: f64 = 1e-6;

/// Fits an affine map from flattened predictions to flattened ground truth
/// on the train split and scores it on the test split.
///
/// Ground truth rows hold `2·P` coordinates `(x0, y0, x1, y1, ...)`; `eyes`
/// selects the two points whose distance normalizes the error.
pub fn forward_error(
    train_pred: &[Vec<f64>],
    train_gt: &[Vec<f64>],
    test_pred: &[Vec<f64>],
    test_gt: &[Vec<f64>],
    eyes: (usize, usize),
) -> Result<ForwardError> {
    if train_pred.is_empty() || test_pred.is_empty() {
        return Err(Error::Contract("forward error needs non-empty train and test splits".into()));
    }
    if train_pred.len() != train_gt.len() || test_pred.len() != test_gt.len() {
        return Err(Error::Contract("prediction and ground-truth counts differ".into()));
    }
    let p = train_pred[0].len();
    let q = train_gt[0].len();
    if q < 4 || q % 2 == 1 || eyes.0.max(eyes.1) * 2 + 1 >= q || eyes.0 == eyes.1 {
        return Err(Error::Contract(format!("ground truth of width {q} cannot hold eyes {eyes:?}")));
    }
    let rows_ok = |v: &[Vec<f64>], w: usize| v.iter().all(|r| r.len() == w && r.iter().all(|x| x.is_finite()));
    if !rows_ok(train_pred, p) || !rows_ok(test_pred, p) || !rows_ok(train_gt, q) || !rows_ok(test_gt, q) {
        return Err(Error::Contract("inconsistent or non-finite landmark rows".into()));
    }
    let n = train_pred.len();
    let x = DMatrix::from_fn(n, p + 1, |i, j| if j < p { train_pred[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(n, q, |i, j| train_gt[i][j]);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let svd = xtx.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let tol = smax * (p + 1) as f64 * f64::EPSILON * 16.0;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let regularized = rank < p + 1;
    let beta = if regularized {
        let ridge = xtx + DMatrix::identity(p + 1, p + 1) * RIDGE;
        ridge.cholesky().ok_or_else(|| Error::Numeric("ridge system is not positive definite".into()))?.solve(&xty)
    } else {
        // QR on the design is better conditioned than the normal equations
        let qr = x.clone().qr();
        let qt_y = qr.q().transpose() * &y;
        qr.r().solve_upper_triangular(&qt_y).ok_or_else(|| Error::Numeric("singular triangular factor".into()))?
    };
    let points = q / 2;
    let mut total = 0.0;
    for (pred, gt) in test_pred.iter().zip(test_gt) {
        let xi = DVector::from_fn(p + 1, |j, _| if j < p { pred[j] } else { 1.0 });
        let yhat = beta.transpose() * xi;
        let (a, b) = (eyes.0 * 2, eyes.1 * 2);
        let iod = libm::hypot(gt[a] - gt[b], gt[a + 1] - gt[b + 1]);
        if !(iod > 0.0) {
            return Err(Error::Numeric("zero inter-ocular distance".into()));
        }
        let err: f64 = (0..points).map(|k| libm::hypot(yhat[2 * k] - gt[2 * k], yhat[2 * k + 1] - gt[2 * k + 1])).sum();
        total += err / points as f64 / iod;
    }
    Ok(ForwardError { percent: 100.0 * total / test_pred.len() as f64, regularized })
}

/// Class-token attention spread back onto a `side×side` grid.
///
/// `row` holds attention from the class token to all `R+1` tokens. Without
/// landmarks, entry `1+i` lands in grid cell `i`; with landmarks, it lands in
/// the cell containing landmark `i`.
pub fn class_attention_map(row: &[f64], side: usize, landmarks: Option<&[[f64; 2]]>) -> Result<Vec<f64>> {
    let r = row.len().saturating_sub(1);
    if side * side != r {
        return Err(Error::Contract(format!("{r} patch tokens do not fill a {side}×{side} grid")));
    }
    let mut map = vec![0.0; r];
    match landmarks {
        None => map.copy_from_slice(&row[1..]),
        Some(lm) => {
            if lm.len() != r {
                return Err(Error::Contract(format!("{} landmarks for {r} tokens", lm.len())));
            }
            let cell = |v: f64| ((v * side as f64) as usize).min(side - 1);
            for (i, l) in lm.iter().enumerate() {
                map[cell(l[1].clamp(0.0, 1.0)) * side + cell(l[0].clamp(0.0, 1.0))] += row[1 + i];
            }
        }
    }
    Ok(map)
}

/// One head's attention at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub rows: Vec<Vec<f64>>,
    /// Class-token map over the patch grid, row-major.
    pub spatial: Vec<f64>,
}

/// Resolves a possibly negative layer index (`-1` is the last layer).
pub fn resolve_layer(depth: usize, layer: i64) -> Result<usize> {
    let idx = if layer < 0 { depth as i64 + layer } else { layer };
    if idx < 0 || idx >= depth as i64 {
        return Err(Error::Contract(format!("layer {layer} out of range for depth {depth}")));
    }
    Ok(idx as usize)
}

/// Splits an `[h, T, T]` attention block of one image into per-head records.
pub fn attention_records(
    layer: usize,
    heads: usize,
    tokens: usize,
    data: &[f64],
    landmarks: Option<&[[f64; 2]]>,
) -> Result<Vec<AttentionRecord>> {
    if data.len() != heads * tokens * tokens {
        return Err(Error::Contract(format!(
            "attention block of {} values is not {heads}×{tokens}×{tokens}",
            data.len()
        )));
    }
    let side = libm::round(libm::sqrt((tokens - 1) as f64)) as usize;
    (0..heads)
        .map(|h| {
            let block = &data[h * tokens * tokens..(h + 1) * tokens * tokens];
            let rows: Vec<Vec<f64>> = block.chunks(tokens).map(<[f64]>::to_vec).collect();
            let spatial = class_attention_map(&rows[0], side, landmarks)?;
            Ok(AttentionRecord { layer, head: h, rows, spatial })
        })
        .collect()
}
