//! Multi-scale sliding-window clip proposals and boundary refinement.

use serde::{Deserialize, Serialize};

use crate::data_model::{Interval, VideoMeta};
use crate::error::{Error, Result};

const MIN_STRIDE: f64 = 1e-9;
const EDGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub window_lengths: Vec<f64>,
    pub overlap_ratio: f64,
}

impl Default for ProposalConfig {
    /// 128 and 256 frames at 30 fps, 80% overlap.
    fn default() -> Self {
        ProposalConfig {
            window_lengths: vec![4.27, 8.53],
            overlap_ratio: 0.8,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_lengths.is_empty() {
            return Err(Error::Config("proposals.window_lengths must be non-empty".into()));
        }
        if let Some(l) = self
            .window_lengths
            .iter()
            .find(|l| !(l.is_finite() && **l > 0.0))
        {
            return Err(Error::Config(format!("proposals: window length {l} must be > 0")));
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return Err(Error::Config(format!(
                "proposals.overlap_ratio must lie in [0, 1), got {}",
                self.overlap_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipCandidate {
    pub video_id: String,
    pub bounds: Interval,
    pub scale_index: usize,
}

/// Clips ordered by scale, then start. For each window length `L` starts are
/// `k * (1 - overlap) * L`; the last window is clamped to the video end.
pub fn generate_proposals(meta: &VideoMeta, cfg: &ProposalConfig) -> Result<Vec<ClipCandidate>> {
    meta.validate()?;
    cfg.validate()?;
    let duration = meta.duration;
    let mut out = Vec::new();
    for (scale_index, &len) in cfg.window_lengths.iter().enumerate() {
        let stride = (1.0 - cfg.overlap_ratio) * len;
        if stride < MIN_STRIDE {
            return Err(Error::invalid(format!(
                "stride {stride} s underflows for window {len} s at overlap {}",
                cfg.overlap_ratio
            )));
        }
        let mut k = 0usize;
        loop {
            let start = k as f64 * stride;
            if start >= duration {
                break;
            }
            let end = (start + len).min(duration);
            out.push(ClipCandidate {
                video_id: meta.video_id.clone(),
                bounds: Interval::new(start, end)?,
                scale_index,
            });
            if start + len >= duration - EDGE_EPS {
                break;
            }
            k += 1;
        }
    }
    Ok(out)
}

/// Adds predicted offsets to the clip bounds and clamps to the video. A
/// degenerate result falls back to the unrefined clip.
pub fn apply_offsets(
    clip: &ClipCandidate,
    start_offset: f64,
    end_offset: f64,
    duration: f64,
) -> Result<Interval> {
    if !start_offset.is_finite() || !end_offset.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite offsets ({start_offset}, {end_offset})"
        )));
    }
    let start = (clip.bounds.start() + start_offset).clamp(0.0, duration);
    let end = (clip.bounds.end() + end_offset).clamp(0.0, duration);
    if end <= start {
        return Ok(clip.bounds);
    }
    Interval::new(start, end)
}
