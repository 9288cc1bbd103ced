//! Domain types shared by every stage, the line-delimited dataset manifest and
//! the `MMLF` binary feature archive.

pub mod archive;
pub mod manifest;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use archive::{read_archive, write_archive, ArchiveError, FeatureStore, TensorRecord};
pub use manifest::{parse_manifest, write_manifest, Manifest};

/// A closed time span `[start, end]` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInterval", into = "RawInterval")]
pub struct Interval {
    start: f64,
    end: f64,
}

#[derive(Serialize, Deserialize)]
struct RawInterval {
    start: f64,
    end: f64,
}

impl TryFrom<RawInterval> for Interval {
    type Error = Error;

    fn try_from(raw: RawInterval) -> Result<Self> {
        Interval::new(raw.start, raw.end)
    }
}

impl From<Interval> for RawInterval {
    fn from(iv: Interval) -> Self {
        RawInterval {
            start: iv.start,
            end: iv.end,
        }
    }
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() || start < 0.0 || end < start {
            return Err(Error::InvalidInterval { start, end });
        }
        Ok(Interval { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn within(&self, duration: f64) -> bool {
        self.end <= duration
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

/// Every feature family the pipeline knows how to consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    SentenceBert,
    SentenceSkipthought,
    SentenceRoberta,
    VoGlove,
    VoBert,
    C3dFc6,
    VisualActivityConcepts,
    ObjectSegmentation,
    VideoCaptioning,
    Actionness,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 10] = [
        EmbeddingKind::SentenceBert,
        EmbeddingKind::SentenceSkipthought,
        EmbeddingKind::SentenceRoberta,
        EmbeddingKind::VoGlove,
        EmbeddingKind::VoBert,
        EmbeddingKind::C3dFc6,
        EmbeddingKind::VisualActivityConcepts,
        EmbeddingKind::ObjectSegmentation,
        EmbeddingKind::VideoCaptioning,
        EmbeddingKind::Actionness,
    ];

    pub fn default_dim(self) -> usize {
        match self {
            EmbeddingKind::SentenceBert => 768,
            EmbeddingKind::SentenceSkipthought => 4800,
            EmbeddingKind::SentenceRoberta => 768,
            EmbeddingKind::VoGlove => 300,
            EmbeddingKind::VoBert => 768,
            EmbeddingKind::C3dFc6 => 4096,
            EmbeddingKind::VisualActivityConcepts => 400,
            EmbeddingKind::ObjectSegmentation => 150,
            EmbeddingKind::VideoCaptioning => 2048,
            EmbeddingKind::Actionness => 1,
        }
    }

    pub fn is_sentence(self) -> bool {
        matches!(
            self,
            EmbeddingKind::SentenceBert
                | EmbeddingKind::SentenceSkipthought
                | EmbeddingKind::SentenceRoberta
        )
    }

    pub fn is_vo(self) -> bool {
        matches!(self, EmbeddingKind::VoGlove | EmbeddingKind::VoBert)
    }

    /// Visual kinds are stored per video as `[rows, dim]` time series.
    pub fn is_visual(self) -> bool {
        !self.is_sentence() && !self.is_vo()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::SentenceBert => "sentence_bert",
            EmbeddingKind::SentenceSkipthought => "sentence_skipthought",
            EmbeddingKind::SentenceRoberta => "sentence_roberta",
            EmbeddingKind::VoGlove => "vo_glove",
            EmbeddingKind::VoBert => "vo_bert",
            EmbeddingKind::C3dFc6 => "c3d_fc6",
            EmbeddingKind::VisualActivityConcepts => "visual_activity_concepts",
            EmbeddingKind::ObjectSegmentation => "object_segmentation",
            EmbeddingKind::VideoCaptioning => "video_captioning",
            EmbeddingKind::Actionness => "actionness",
        }
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A feature kind together with its vector width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    pub dim: usize,
}

impl EmbeddingSpec {
    pub fn new(kind: EmbeddingKind) -> Self {
        EmbeddingSpec {
            kind,
            dim: kind.default_dim(),
        }
    }

    pub fn with_dim(kind: EmbeddingKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config(format!("{kind}: dimension must be positive")));
        }
        Ok(EmbeddingSpec { kind, dim })
    }
}

/// Per-kind dimension table: defaults plus explicit overrides.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DimTable {
    overrides: BTreeMap<EmbeddingKind, usize>,
}

impl DimTable {
    pub fn with_override(mut self, kind: EmbeddingKind, dim: usize) -> Self {
        self.overrides.insert(kind, dim);
        self
    }

    pub fn spec(&self, kind: EmbeddingKind) -> EmbeddingSpec {
        EmbeddingSpec {
            kind,
            dim: self.dim(kind),
        }
    }

    pub fn dim(&self, kind: EmbeddingKind) -> usize {
        self.overrides
            .get(&kind)
            .copied()
            .unwrap_or_else(|| kind.default_dim())
    }

    pub fn validate(&self) -> Result<()> {
        for (&kind, &dim) in &self.overrides {
            EmbeddingSpec::with_dim(kind, dim)?;
            if kind == EmbeddingKind::Actionness && dim != 1 {
                return Err(Error::Config("actionness is a scalar (dim 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoPair {
    pub verb: String,
    pub object: String,
}

/// One clip-sentence pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub video_id: String,
    pub query_id: String,
    pub text: String,
    pub vo_pair: VoPair,
    pub gt: Interval,
    pub embedding_refs: BTreeMap<EmbeddingKind, String>,
}

fn default_feature_stride() -> u32 {
    16
}

/// Per-video metadata. Visual features are referenced as per-video
/// `[rows, dim]` sequences; row `r` describes frame `r * feature_stride`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub video_id: String,
    pub duration: f64,
    pub frame_rate: f64,
    pub clip_feature_refs: BTreeMap<EmbeddingKind, String>,
    #[serde(default = "default_feature_stride")]
    pub feature_stride: u32,
}

impl VideoMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::invalid(format!(
                "video {}: duration must be > 0, got {}",
                self.video_id, self.duration
            )));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::invalid(format!(
                "video {}: frame_rate must be > 0, got {}",
                self.video_id, self.frame_rate
            )));
        }
        if self.feature_stride == 0 {
            return Err(Error::invalid(format!(
                "video {}: feature_stride must be positive",
                self.video_id
            )));
        }
        Ok(())
    }

    /// Rows a visual sequence is expected to hold for this video.
    pub fn expected_rows(&self) -> usize {
        let frames = (self.duration * self.frame_rate).ceil() as usize;
        frames.div_ceil(self.feature_stride as usize).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dims_match_extractor_widths() {
        assert_eq!(EmbeddingKind::SentenceBert.default_dim(), 768);
        assert_eq!(EmbeddingKind::SentenceSkipthought.default_dim(), 4800);
        assert_eq!(EmbeddingKind::VoGlove.default_dim(), 300);
        assert_eq!(EmbeddingKind::VoBert.default_dim(), 768);
        assert_eq!(EmbeddingKind::ObjectSegmentation.default_dim(), 150);
        assert_eq!(EmbeddingKind::VideoCaptioning.default_dim(), 2048);
        assert_eq!(EmbeddingKind::C3dFc6.default_dim(), 4096);
        assert_eq!(EmbeddingKind::VisualActivityConcepts.default_dim(), 400);
    }

    #[test]
    fn dim_overrides_take_precedence() {
        let dims = DimTable::default().with_override(EmbeddingKind::C3dFc6, 64);
        assert_eq!(dims.dim(EmbeddingKind::C3dFc6), 64);
        assert_eq!(dims.dim(EmbeddingKind::SentenceBert), 768);
        assert!(DimTable::default()
            .with_override(EmbeddingKind::Actionness, 3)
            .validate()
            .is_err());
    }

    #[test]
    fn interval_rejects_reversed_and_non_finite() {
        assert!(Interval::new(5.0, 2.0).is_err());
        assert!(Interval::new(0.0, f64::NAN).is_err());
        assert!(Interval::new(-1.0, 2.0).is_err());
        let iv = Interval::new(2.0, 5.0).unwrap();
        assert_eq!(iv.length(), 3.0);
    }

    #[test]
    fn interval_deserialization_validates() {
        let err = serde_json::from_str::<Interval>(r#"{"start":5.0,"end":2.0}"#).unwrap_err();
        assert!(err.to_string().contains("invalid interval"));
    }

    #[test]
    fn kind_names_round_trip_through_serde() {
        for kind in EmbeddingKind::ALL {
            let s = serde_json::to_string(&kind).unwrap();
            assert_eq!(s, format!("\"{}\"", kind.name()));
        }
    }
}
