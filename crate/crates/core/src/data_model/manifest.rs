//! Line-delimited JSON manifest: one `video` or `query` record per line.
//!
//! ```text
//! {"record":"video","video_id":"v0","duration":30.0,"frame_rate":30.0,"clip_feature_refs":{...}}
//! {"record":"query","video_id":"v0","query_id":"q0","text":"...","vo_pair":{...},"gt":{"start":2.0,"end":5.0},"embedding_refs":{...}}
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureStore, QueryRecord, VideoMeta};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Video(VideoMeta),
    Query(QueryRecord),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub videos: Vec<VideoMeta>,
    pub queries: Vec<QueryRecord>,
}

impl Manifest {
    pub fn video(&self, video_id: &str) -> Option<&VideoMeta> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn video_index(&self) -> HashMap<&str, &VideoMeta> {
        self.videos.iter().map(|v| (v.video_id.as_str(), v)).collect()
    }

    /// Every archive key the manifest references, in file order.
    pub fn archive_keys(&self) -> impl Iterator<Item = &str> {
        self.videos
            .iter()
            .flat_map(|v| v.clip_feature_refs.values())
            .chain(self.queries.iter().flat_map(|q| q.embedding_refs.values()))
            .map(String::as_str)
    }

    /// Fails on the first referenced key the store cannot resolve.
    pub fn check_refs(&self, store: &FeatureStore) -> Result<()> {
        match self.archive_keys().find(|k| !store.contains(k)) {
            Some(key) => Err(Error::DanglingKey(key.to_owned())),
            None => Ok(()),
        }
    }

    /// Keeps the videos referenced by the retained queries.
    pub fn filter_queries(&self, keep: impl Fn(&QueryRecord) -> bool) -> Manifest {
        let queries: Vec<QueryRecord> = self.queries.iter().filter(|q| keep(q)).cloned().collect();
        let used: HashSet<&str> = queries.iter().map(|q| q.video_id.as_str()).collect();
        let videos = self
            .videos
            .iter()
            .filter(|v| used.contains(v.video_id.as_str()))
            .cloned()
            .collect();
        Manifest { videos, queries }
    }
}

pub fn parse_manifest_str(text: &str) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    let mut query_lines = Vec::new();
    let mut video_ids = HashSet::new();
    let mut query_ids = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(raw).map_err(|e| Error::Manifest {
            line,
            message: e.to_string(),
        })?;
        match rec {
            Line::Video(v) => {
                v.validate().map_err(|e| Error::Manifest {
                    line,
                    message: e.to_string(),
                })?;
                if !video_ids.insert(v.video_id.clone()) {
                    return Err(Error::Manifest {
                        line,
                        message: format!("duplicate video_id `{}`", v.video_id),
                    });
                }
                manifest.videos.push(v);
            }
            Line::Query(q) => {
                if !query_ids.insert(q.query_id.clone()) {
                    return Err(Error::Manifest {
                        line,
                        message: format!("duplicate query_id `{}`", q.query_id),
                    });
                }
                query_lines.push(line);
                manifest.queries.push(q);
            }
        }
    }
    let videos = manifest.video_index();
    for (q, &line) in manifest.queries.iter().zip(&query_lines) {
        let video = videos.get(q.video_id.as_str()).ok_or_else(|| Error::Manifest {
            line,
            message: format!("query `{}` references unknown video `{}`", q.query_id, q.video_id),
        })?;
        if !q.gt.within(video.duration) {
            return Err(Error::Manifest {
                line,
                message: format!(
                    "invalid interval: gt {} exceeds video duration {}",
                    q.gt, video.duration
                ),
            });
        }
    }
    Ok(manifest)
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_str(&text)
}

pub fn manifest_to_string(manifest: &Manifest) -> String {
    let mut out = String::new();
    for v in &manifest.videos {
        out.push_str(&serde_json::to_string(&Line::Video(v.clone())).expect("video record serializes"));
        out.push('\n');
    }
    for q in &manifest.queries {
        out.push_str(&serde_json::to_string(&Line::Query(q.clone())).expect("query record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(manifest_to_string(manifest).as_bytes())
        .map_err(|e| Error::io(path, e))
}
