//! Clip-level feature aggregation.
//!
//! Object evidence: every 16th frame of a clip is segmented, each frame's
//! per-pixel class distributions are averaged into one class-mean vector, and
//! the sampled frames are max-pooled over time. The pooled vector is
//! L2-normalized and scaled by `s_obj` before dropout and concatenation with
//! the visual activity concepts. Captioning features are average-pooled over
//! frames and get the same normalize-then-scale treatment (`s_cap`) before
//! being appended to the C3D fc6 vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRAME_SAMPLE_STRIDE: usize = 16;
pub const OBJECT_CLASSES: usize = 150;

const DISTRIBUTION_TOL: f64 = 1e-6;

/// Per-pixel class distributions of one segmented frame, `[height, width, classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClassMap {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl FrameClassMap {
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::invalid("frame class map dims must be positive"));
        }
        if probs.len() != height * width * classes {
            return Err(Error::DimMismatch(format!(
                "frame class map expects {} values, got {}",
                height * width * classes,
                probs.len()
            )));
        }
        for (p, pixel) in probs.chunks_exact(classes).enumerate() {
            let sum: f64 = pixel.iter().sum();
            if pixel.iter().any(|&x| !x.is_finite() || x < 0.0) || (sum - 1.0).abs() > DISTRIBUTION_TOL {
                return Err(Error::invalid(format!(
                    "pixel {p} is not a class distribution (sum {sum})"
                )));
            }
        }
        Ok(FrameClassMap {
            height,
            width,
            classes,
            probs,
        })
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.classes)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HighLevelFusionConfig {
    pub s_obj: f64,
    pub d_obj: f64,
    pub d_vac: f64,
}

impl Default for HighLevelFusionConfig {
    /// Best configuration of the three-axis sweep.
    fn default() -> Self {
        HighLevelFusionConfig {
            s_obj: 0.005,
            d_obj: 0.5,
            d_vac: 0.0,
        }
    }
}

impl HighLevelFusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.s_obj) {
            return Err(Error::Config(format!("s_obj must lie in [0, 1], got {}", self.s_obj)));
        }
        for (name, v) in [("d_obj", self.d_obj), ("d_vac", self.d_vac)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Frame indices `0, 16, 32, ...` below `frame_count`.
pub fn sample_frame_indices(frame_count: usize) -> Result<Vec<usize>> {
    if frame_count < 1 {
        return Err(Error::invalid("frame_count must be at least 1"));
    }
    Ok((0..frame_count).step_by(FRAME_SAMPLE_STRIDE).collect())
}

/// Mean class distribution over all pixels of a frame.
pub fn frame_class_means(map: &FrameClassMap) -> Vec<f64> {
    let mut acc = vec![0.0; map.classes()];
    for pixel in map.pixels() {
        for (a, &p) in acc.iter_mut().zip(pixel) {
            *a += p;
        }
    }
    let n = map.pixel_count() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

fn check_frames<'a>(frames: &'a [Vec<f64>]) -> Result<usize> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("cannot pool an empty frame list"))?;
    let dim = first.len();
    if let Some(bad) = frames.iter().find(|f| f.len() != dim) {
        return Err(Error::DimMismatch(format!(
            "ragged frames: expected dim {dim}, found {}",
            bad.len()
        )));
    }
    Ok(dim)
}

pub fn temporal_max_pool(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_frames(frames)?;
    let mut out = frames[0].clone();
    for f in &frames[1..] {
        for (o, &x) in out.iter_mut().zip(f) {
            *o = o.max(x);
        }
    }
    Ok(out)
}

pub fn temporal_avg_pool(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = check_frames(frames)?;
    let mut out = vec![0.0; dim];
    for f in frames {
        for (o, &x) in out.iter_mut().zip(f) {
            *o += x;
        }
    }
    let n = frames.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `v / |v|_2 * scale`; the zero vector maps to zero.
pub fn normalize_and_scale(v: &[f64], scale: f64) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) || !scale.is_finite() {
        return Err(Error::invalid("normalize_and_scale: non-finite input"));
    }
    let norm = l2_norm(v);
    if norm == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    Ok(v.iter().map(|x| x / norm * scale).collect())
}

/// Inverted dropout: in training each entry is zeroed with probability
/// `ratio` and survivors are scaled by `1 / (1 - ratio)`; evaluation is the
/// identity.
pub fn apply_dropout(v: &[f64], ratio: f64, mode: Mode, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("dropout ratio must lie in [0, 1), got {ratio}")));
    }
    if mode == Mode::Eval || ratio == 0.0 {
        return Ok(v.to_vec());
    }
    Ok(dropout_mask(v.len(), ratio, seed)
        .into_iter()
        .zip(v)
        .map(|(m, x)| m * x)
        .collect())
}

/// Per-entry multipliers (`0` or `1 / (1 - ratio)`) used by [`apply_dropout`].
pub fn dropout_mask(len: usize, ratio: f64, seed: u64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| if rng.gen::<f64>() < ratio { 0.0 } else { keep })
        .collect()
}

/// Input of the high-level projection:
/// `dropout(normalize(v_obj) * s_obj, d_obj) ++ dropout(v_vac, d_vac)`.
///
/// The two dropout streams draw from independent seeds derived from `seed`.
pub fn build_mlp_high_input(
    v_obj: &[f64],
    v_vac: &[f64],
    cfg: &HighLevelFusionConfig,
    mode: Mode,
    seed: u64,
) -> Result<Vec<f64>> {
    let (obj_seed, vac_seed) = dropout_seeds(seed);
    let obj = normalize_and_scale(v_obj, cfg.s_obj)?;
    let mut out = apply_dropout(&obj, cfg.d_obj, mode, obj_seed)?;
    out.extend(apply_dropout(v_vac, cfg.d_vac, mode, vac_seed)?);
    Ok(out)
}

pub fn dropout_seeds(seed: u64) -> (u64, u64) {
    (
        crate::seeds::derive(seed, &[0x0b1]),
        crate::seeds::derive(seed, &[0x7ac]),
    )
}

/// `fc6 ++ normalize(captioning) * s_cap`.
pub fn build_low_input(fc6: &[f64], captioning: &[f64], s_cap: f64, expected_cap_dim: usize) -> Result<Vec<f64>> {
    if captioning.len() != expected_cap_dim {
        return Err(Error::DimMismatch(format!(
            "captioning feature has dim {}, expected {expected_cap_dim}",
            captioning.len()
        )));
    }
    let mut out = fc6.to_vec();
    out.extend(normalize_and_scale(captioning, s_cap)?);
    Ok(out)
}

/// Full object pathway from raw segmentation maps of the sampled frames.
pub fn object_feature_from_maps(maps: &[FrameClassMap], s_obj: f64) -> Result<Vec<f64>> {
    let means: Vec<Vec<f64>> = maps.iter().map(frame_class_means).collect();
    let pooled = temporal_max_pool(&means)?;
    normalize_and_scale(&pooled, s_obj)
}
