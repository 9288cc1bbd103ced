//! Resolves manifest references against the feature store and pools
//! per-video feature sequences into per-candidate clip features.

use std::collections::HashMap;

use crate::data_model::{DimTable, EmbeddingKind, FeatureStore, Manifest, QueryRecord, TensorRecord, VideoMeta};
use crate::error::{Error, Result};
use crate::features::{sample_frame_indices, temporal_avg_pool, temporal_max_pool};
use crate::network::ModelConfig;
use crate::proposals::{generate_proposals, ClipCandidate, ProposalConfig};

/// Pooled (pre-normalization) features of one candidate clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    pub fc6: Vec<f64>,
    pub captioning: Option<Vec<f64>>,
    pub v_obj: Vec<f64>,
    pub v_vac: Vec<f64>,
    pub actionness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatures {
    pub sentence: Vec<f64>,
    /// Verb and object embeddings, concatenated.
    pub vo: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VideoCandidates {
    pub meta: VideoMeta,
    pub clips: Vec<ClipCandidate>,
    pub features: Vec<ClipFeatures>,
}

/// Everything the network needs for one split, fully materialized.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<VideoCandidates>,
    pub queries: Vec<QueryRecord>,
    pub query_features: Vec<QueryFeatures>,
    video_index: HashMap<String, usize>,
}

impl Dataset {
    pub fn assemble(
        manifest: &Manifest,
        store: &FeatureStore,
        dims: &DimTable,
        model: &ModelConfig,
        proposals: &ProposalConfig,
    ) -> Result<Self> {
        let mut videos = Vec::with_capacity(manifest.videos.len());
        let mut video_index = HashMap::with_capacity(manifest.videos.len());
        for meta in &manifest.videos {
            let clips = generate_proposals(meta, proposals)?;
            let seqs = VideoSequences::resolve(meta, store, dims, model)?;
            let features = clips
                .iter()
                .map(|c| seqs.pool(meta, c))
                .collect::<Result<Vec<_>>>()?;
            video_index.insert(meta.video_id.clone(), videos.len());
            videos.push(VideoCandidates {
                meta: meta.clone(),
                clips,
                features,
            });
        }
        let query_features = manifest
            .queries
            .iter()
            .map(|q| query_features(q, store, dims, model))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            videos,
            queries: manifest.queries.clone(),
            query_features,
            video_index,
        })
    }

    pub fn video_of(&self, query: &QueryRecord) -> Result<&VideoCandidates> {
        self.video_index
            .get(&query.video_id)
            .map(|&i| &self.videos[i])
            .ok_or_else(|| Error::invalid(format!("unknown video `{}`", query.video_id)))
    }

    pub fn video_position(&self, video_id: &str) -> Option<usize> {
        self.video_index.get(video_id).copied()
    }

    /// Restricts to the queries accepted by `keep`, sharing video features.
    pub fn subset(&self, keep: impl Fn(&QueryRecord) -> bool) -> Dataset {
        let (queries, query_features) = self
            .queries
            .iter()
            .zip(&self.query_features)
            .filter(|(q, _)| keep(q))
            .map(|(q, f)| (q.clone(), f.clone()))
            .unzip();
        Dataset {
            videos: self.videos.clone(),
            queries,
            query_features,
            video_index: self.video_index.clone(),
        }
    }
}

struct VideoSequences<'a> {
    fc6: &'a TensorRecord,
    vac: &'a TensorRecord,
    obj: Option<&'a TensorRecord>,
    captioning: Option<&'a TensorRecord>,
    actionness: Option<&'a TensorRecord>,
    obj_dim: usize,
}

fn sequence<'a>(
    meta: &VideoMeta,
    store: &'a FeatureStore,
    kind: EmbeddingKind,
    dim: usize,
) -> Result<&'a TensorRecord> {
    let key = meta
        .clip_feature_refs
        .get(&kind)
        .ok_or_else(|| Error::MissingFeature(format!("{kind} for video {}", meta.video_id)))?;
    let rec = store.get(key)?;
    let width = rec.data.len() / rec.rows();
    let ok_shape = match rec.shape.as_slice() {
        [_, w] => *w == dim,
        [_] => dim == 1,
        _ => false,
    };
    if !ok_shape || width != dim {
        return Err(Error::DimMismatch(format!(
            "{kind} sequence `{key}` has shape {:?}, expected [rows, {dim}]",
            rec.shape
        )));
    }
    Ok(rec)
}

impl<'a> VideoSequences<'a> {
    fn resolve(meta: &VideoMeta, store: &'a FeatureStore, dims: &DimTable, model: &ModelConfig) -> Result<Self> {
        use EmbeddingKind as K;
        let obj_dim = dims.dim(K::ObjectSegmentation);
        Ok(VideoSequences {
            fc6: sequence(meta, store, K::C3dFc6, dims.dim(K::C3dFc6))?,
            vac: sequence(meta, store, K::VisualActivityConcepts, dims.dim(K::VisualActivityConcepts))?,
            obj: if model.use_object_features {
                Some(sequence(meta, store, K::ObjectSegmentation, obj_dim)?)
            } else {
                None
            },
            captioning: if model.use_captioning_features {
                Some(sequence(meta, store, K::VideoCaptioning, dims.dim(K::VideoCaptioning))?)
            } else {
                None
            },
            actionness: match meta.clip_feature_refs.get(&K::Actionness) {
                Some(_) => Some(sequence(meta, store, K::Actionness, 1)?),
                None => None,
            },
            obj_dim,
        })
    }

    fn pool(&self, meta: &VideoMeta, clip: &ClipCandidate) -> Result<ClipFeatures> {
        let gather = |rec: &TensorRecord| -> Result<Vec<Vec<f64>>> {
            Ok(clip_rows(meta, clip, rec.rows())?
                .into_iter()
                .map(|r| rec.row(r).iter().map(|&x| f64::from(x)).collect())
                .collect())
        };
        let actionness = match self.actionness {
            Some(rec) => temporal_avg_pool(&gather(rec)?)?[0].clamp(0.0, 1.0),
            None => 1.0,
        };
        Ok(ClipFeatures {
            fc6: temporal_avg_pool(&gather(self.fc6)?)?,
            captioning: self
                .captioning
                .map(|rec| temporal_avg_pool(&gather(rec)?))
                .transpose()?,
            v_obj: match self.obj {
                Some(rec) => temporal_max_pool(&gather(rec)?)?,
                None => vec![0.0; self.obj_dim],
            },
            v_vac: temporal_avg_pool(&gather(self.vac)?)?,
            actionness,
        })
    }
}

/// Sequence rows covering the every-16th-frame samples of a clip. Row `r`
/// describes frame `r * feature_stride`.
pub fn clip_rows(meta: &VideoMeta, clip: &ClipCandidate, available: usize) -> Result<Vec<usize>> {
    let first_frame = (clip.bounds.start() * meta.frame_rate).floor() as usize;
    let frames = ((clip.bounds.length() * meta.frame_rate).round() as usize).max(1);
    let stride = meta.feature_stride as usize;
    let mut rows: Vec<usize> = sample_frame_indices(frames)?
        .into_iter()
        .map(|i| ((first_frame + i) / stride).min(available - 1))
        .collect();
    rows.dedup();
    Ok(rows)
}

fn query_features(q: &QueryRecord, store: &FeatureStore, dims: &DimTable, model: &ModelConfig) -> Result<QueryFeatures> {
    let lookup = |kind: EmbeddingKind, expected: usize| -> Result<Vec<f64>> {
        let key = q
            .embedding_refs
            .get(&kind)
            .ok_or_else(|| Error::MissingFeature(format!("{kind} for query {}", q.query_id)))?;
        let rec = store.get(key)?;
        if rec.data.len() != expected {
            return Err(Error::DimMismatch(format!(
                "{kind} embedding `{key}` has {} values, expected {expected}",
                rec.data.len()
            )));
        }
        Ok(rec.to_f64())
    };
    Ok(QueryFeatures {
        sentence: lookup(model.sentence_kind, dims.dim(model.sentence_kind))?,
        vo: lookup(model.vo_kind, 2 * dims.dim(model.vo_kind))?,
    })
}
