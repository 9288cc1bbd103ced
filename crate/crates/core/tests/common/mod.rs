#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mml_core::data_model::{
    DimTable, EmbeddingKind, FeatureStore, Interval, Manifest, QueryRecord, TensorRecord, VideoMeta, VoPair,
};
use mml_core::network::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VISUAL: [EmbeddingKind; 4] = [
    EmbeddingKind::C3dFc6,
    EmbeddingKind::VisualActivityConcepts,
    EmbeddingKind::ObjectSegmentation,
    EmbeddingKind::VideoCaptioning,
];

pub fn tiny_dims() -> DimTable {
    DimTable::default()
        .with_override(EmbeddingKind::SentenceBert, 16)
        .with_override(EmbeddingKind::VoGlove, 8)
        .with_override(EmbeddingKind::C3dFc6, 12)
        .with_override(EmbeddingKind::VisualActivityConcepts, 7)
        .with_override(EmbeddingKind::ObjectSegmentation, 12)
        .with_override(EmbeddingKind::VideoCaptioning, 10)
}

pub fn tiny_model(d: usize) -> ModelConfig {
    ModelConfig {
        common_dim: d,
        hidden_dim: d,
        ..ModelConfig::default()
    }
}

/// Random features for the given videos `(id, duration)` and queries
/// `(query id, video id, gt start, gt end)`, at 30 fps and stride 16.
pub fn toy_data(seed: u64, dims: &DimTable, videos: &[(&str, f64)], queries: &[(&str, &str, f64, f64)]) -> (Manifest, FeatureStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut manifest = Manifest::default();
    for &(id, duration) in videos {
        let mut meta = VideoMeta {
            video_id: id.into(),
            duration,
            frame_rate: 30.0,
            clip_feature_refs: BTreeMap::new(),
            feature_stride: 16,
        };
        let rows = meta.expected_rows();
        for kind in VISUAL {
            let dim = dims.dim(kind);
            let data: Vec<f64> = (0..rows * dim).map(|_| rng.gen::<f64>()).collect();
            let key = format!("{id}/{kind}");
            records.push(TensorRecord::from_f64(key.clone(), vec![rows, dim], &data).unwrap());
            meta.clip_feature_refs.insert(kind, key);
        }
        manifest.videos.push(meta);
    }
    for &(qid, vid, s, e) in queries {
        let sd = dims.dim(EmbeddingKind::SentenceBert);
        let vd = dims.dim(EmbeddingKind::VoGlove);
        let sent: Vec<f64> = (0..sd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vo: Vec<f64> = (0..2 * vd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (sk, vk) = (format!("{qid}/s"), format!("{qid}/vo"));
        records.push(TensorRecord::from_f64(sk.clone(), vec![sd], &sent).unwrap());
        records.push(TensorRecord::from_f64(vk.clone(), vec![2, vd], &vo).unwrap());
        manifest.queries.push(QueryRecord {
            video_id: vid.into(),
            query_id: qid.into(),
            text: format!("query {qid}"),
            vo_pair: VoPair {
                verb: "take".into(),
                object: "cup".into(),
            },
            gt: Interval::new(s, e).unwrap(),
            embedding_refs: BTreeMap::from([(EmbeddingKind::SentenceBert, sk), (EmbeddingKind::VoGlove, vk)]),
        });
    }
    (manifest, FeatureStore::from_records(records).unwrap())
}

pub fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

/// TOML `[dims]` section matching [`tiny_dims`].
pub const TINY_DIMS_TOML: &str = "[dims]
sentence_bert = 16
vo_glove = 8
c3d_fc6 = 12
visual_activity_concepts = 7
object_segmentation = 12
video_captioning = 10
";
