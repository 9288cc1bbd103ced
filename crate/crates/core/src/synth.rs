//! Deterministic synthetic datasets with planted, recoverable localization
//! signals.
//!
//! Each query owns a verb and an object. On every signal-carrying visual
//! kind, the rows inside the query's ground-truth interval light up the
//! channel assigned to its word (object channels for `object_segmentation`,
//! verb channels for the other kinds) and the rows outside light up a paired
//! "context" channel, so that both entering and leaving the moment are
//! visible. All other entries are Gaussian background noise (clamped at zero
//! for object evidence). Sentence and verb/object embeddings are fixed random
//! codes composed from per-word codes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{DimTable, EmbeddingKind, Interval, Manifest, QueryRecord, TensorRecord, VideoMeta, VoPair};
use crate::error::{Error, Result};
use crate::dataset::clip_rows;
use crate::evaluation::{recall_at_n, EvalResult, EvalSpec};
use crate::features::FrameClassMap;
use crate::proposals::{generate_proposals, ProposalConfig};
use crate::seeds;

const VERBS: [&str; 12] = [
    "open", "hold", "take", "put", "eat", "drink", "wash", "close", "throw", "fix", "watch", "tidy",
];
const OBJECTS: [&str; 16] = [
    "door", "cup", "phone", "pillow", "shoe", "sandwich", "towel", "book", "laptop", "box", "dish",
    "blanket", "broom", "mirror", "bag", "window",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub n_queries: usize,
    pub duration_range: (f64, f64),
    pub gt_length_range: (f64, f64),
    pub n_verbs: usize,
    pub n_objects: usize,
    pub signal_strength: f64,
    pub noise_sigma: f64,
    /// Visual kinds that carry the planted signal.
    pub channel_allocation: Vec<EmbeddingKind>,
    /// Emit captioning sequences even when they carry no signal.
    pub emit_captioning: bool,
    pub frame_rate: f64,
    pub feature_stride: u32,
    /// Fraction of videos held out as the test split.
    pub test_fraction: f64,
    pub sentence_kind: EmbeddingKind,
    pub vo_kind: EmbeddingKind,
    /// Not read from the `[synth]` section: the command line fills it from
    /// the run's `[dims]` table so generated data and model agree.
    #[serde(skip)]
    pub dims: DimTable,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_videos: 50,
            n_queries: 200,
            duration_range: (20.0, 40.0),
            gt_length_range: (4.5, 8.0),
            n_verbs: 8,
            n_objects: 12,
            signal_strength: 1.0,
            noise_sigma: 0.1,
            channel_allocation: vec![
                EmbeddingKind::ObjectSegmentation,
                EmbeddingKind::C3dFc6,
                EmbeddingKind::VisualActivityConcepts,
            ],
            emit_captioning: false,
            frame_rate: 30.0,
            feature_stride: 16,
            test_fraction: 0.2,
            sentence_kind: EmbeddingKind::SentenceBert,
            vo_kind: EmbeddingKind::VoGlove,
            dims: DimTable::default()
                .with_override(EmbeddingKind::C3dFc6, 64)
                .with_override(EmbeddingKind::VisualActivityConcepts, 32)
                .with_override(EmbeddingKind::VideoCaptioning, 64),
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn signal_kind_channels(&self, kind: EmbeddingKind) -> usize {
        if kind == EmbeddingKind::ObjectSegmentation {
            self.n_objects
        } else {
            self.n_verbs
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.n_videos == 0 {
            return err("n_videos must be positive".into());
        }
        if self.n_verbs == 0 || self.n_objects == 0 {
            return err("vocabulary sizes must be positive".into());
        }
        let (dmin, dmax) = self.duration_range;
        if !(dmin > 0.0 && dmax >= dmin) {
            return err(format!("invalid duration_range ({dmin}, {dmax})"));
        }
        let (gmin, gmax) = self.gt_length_range;
        if !(gmin > 0.0 && gmax >= gmin) {
            return err(format!("invalid gt_length_range ({gmin}, {gmax})"));
        }
        if !(self.signal_strength > 0.0) || !(self.noise_sigma >= 0.0) {
            return err("signal_strength must be > 0 and noise_sigma >= 0".into());
        }
        if !(self.frame_rate > 0.0) || self.feature_stride == 0 {
            return err("frame_rate and feature_stride must be positive".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return err(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        if !self.sentence_kind.is_sentence() || !self.vo_kind.is_vo() {
            return err("sentence_kind / vo_kind have the wrong family".into());
        }
        for &kind in &self.channel_allocation {
            if !kind.is_visual() || kind == EmbeddingKind::Actionness {
                return err(format!("{kind} cannot carry a planted signal"));
            }
            let need = 2 * self.signal_kind_channels(kind);
            let dim = self.dims.dim(kind);
            if need > dim {
                return err(format!(
                    "vocabulary needs {need} channels of {kind} but its dim is {dim}"
                ));
            }
        }
        let per_video = self.n_queries.div_ceil(self.n_videos);
        if per_video > self.n_verbs || per_video > self.n_objects {
            return err(format!(
                "{per_video} queries per video need at least that many distinct verbs and objects"
            ));
        }
        self.dims.validate()
    }

    fn emitted_visual_kinds(&self) -> Vec<EmbeddingKind> {
        let mut kinds = vec![
            EmbeddingKind::C3dFc6,
            EmbeddingKind::VisualActivityConcepts,
            EmbeddingKind::ObjectSegmentation,
        ];
        if self.emit_captioning || self.channel_allocation.contains(&EmbeddingKind::VideoCaptioning) {
            kinds.push(EmbeddingKind::VideoCaptioning);
        }
        kinds
    }
}

fn word(list: &[&str], i: usize, prefix: &str) -> String {
    list.get(i).map_or_else(|| format!("{prefix}{i}"), |w| (*w).to_owned())
}

/// Channel indices carrying each word's evidence and its context.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
}

impl Vocabulary {
    fn new(cfg: &SynthConfig) -> Self {
        Vocabulary {
            verbs: (0..cfg.n_verbs).map(|i| word(&VERBS, i, "verb")).collect(),
            objects: (0..cfg.n_objects).map(|i| word(&OBJECTS, i, "object")).collect(),
        }
    }

    /// `(signal channel, context channel)` of the query's word for `kind`.
    pub fn channels(&self, kind: EmbeddingKind, pair: &VoPair) -> Option<(usize, usize)> {
        if kind == EmbeddingKind::ObjectSegmentation {
            let i = self.objects.iter().position(|o| *o == pair.object)?;
            Some((i, i + self.objects.len()))
        } else {
            let i = self.verbs.iter().position(|v| *v == pair.verb)?;
            Some((i, i + self.verbs.len()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Manifest,
    pub test: Manifest,
    pub records: Vec<TensorRecord>,
    pub vocabulary: Vocabulary,
    pub config: SynthConfig,
}

impl SynthDataset {
    /// Train and test splits as one manifest.
    pub fn full_manifest(&self) -> Manifest {
        Manifest {
            videos: self.train.videos.iter().chain(&self.test.videos).cloned().collect(),
            queries: self.train.queries.iter().chain(&self.test.queries).cloned().collect(),
        }
    }
}

fn gaussian_code(seed: u64, dim: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).expect("positive scale");
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

const CODE_SCALE: f64 = 0.5;

fn word_code(base: u64, family: &str, word: &str, dim: usize) -> Vec<f64> {
    gaussian_code(
        seeds::derive(base, &[seeds::hash_str(family), seeds::hash_str(word)]),
        dim,
        CODE_SCALE,
    )
}

fn sentence_code(cfg: &SynthConfig, pair: &VoPair) -> Vec<f64> {
    let dim = cfg.dims.dim(cfg.sentence_kind);
    let verb = word_code(cfg.seed, "sentence/verb", &pair.verb, dim);
    let object = word_code(cfg.seed, "sentence/object", &pair.object, dim);
    let jitter = gaussian_code(
        seeds::derive(cfg.seed, &[seeds::hash_str(&pair.verb), seeds::hash_str(&pair.object)]),
        dim,
        0.1 * CODE_SCALE,
    );
    verb.iter()
        .zip(&object)
        .zip(&jitter)
        .map(|((a, b), c)| std::f64::consts::FRAC_1_SQRT_2 * (a + b) + c)
        .collect()
}

fn vo_code(cfg: &SynthConfig, pair: &VoPair) -> Vec<f64> {
    let dim = cfg.dims.dim(cfg.vo_kind);
    let mut out = word_code(cfg.seed, "vo", &pair.verb, dim);
    out.extend(word_code(cfg.seed, "vo", &pair.object, dim));
    out
}

struct PlannedQuery {
    vo: VoPair,
    gt: Interval,
    text: String,
}

/// Generates the dataset. Fully determined by `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let vocab = Vocabulary::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[0x5e7]));
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let n_test = ((cfg.n_videos as f64) * cfg.test_fraction).round() as usize;
    let n_train_videos = cfg.n_videos - n_test;

    let mut train = Manifest::default();
    let mut test = Manifest::default();
    let mut records = Vec::new();

    for v in 0..cfg.n_videos {
        let video_id = format!("v{v:03}");
        let duration = rng.gen_range(cfg.duration_range.0..=cfg.duration_range.1);
        let query_ids: Vec<usize> = (v..cfg.n_queries).step_by(cfg.n_videos).collect();
        let mut verbs: Vec<usize> = (0..cfg.n_verbs).collect();
        let mut objects: Vec<usize> = (0..cfg.n_objects).collect();
        verbs.shuffle(&mut rng);
        objects.shuffle(&mut rng);
        let planned: Vec<PlannedQuery> = query_ids
            .iter()
            .enumerate()
            .map(|(k, _)| {
                let len = rng
                    .gen_range(cfg.gt_length_range.0..=cfg.gt_length_range.1)
                    .min(duration);
                let start = rng.gen_range(0.0..=(duration - len));
                let vo = VoPair {
                    verb: vocab.verbs[verbs[k]].clone(),
                    object: vocab.objects[objects[k]].clone(),
                };
                let text = format!("person {} the {}", vo.verb, vo.object);
                Ok(PlannedQuery {
                    vo,
                    gt: Interval::new(start, start + len)?,
                    text,
                })
            })
            .collect::<Result<_>>()?;

        let meta_rows = VideoMeta {
            video_id: video_id.clone(),
            duration,
            frame_rate: cfg.frame_rate,
            clip_feature_refs: BTreeMap::new(),
            feature_stride: cfg.feature_stride,
        }
        .expected_rows();
        let row_time = |r: usize| (r * cfg.feature_stride as usize) as f64 / cfg.frame_rate;

        let mut refs = BTreeMap::new();
        for kind in cfg.emitted_visual_kinds() {
            let dim = cfg.dims.dim(kind);
            let mut data = vec![0.0f64; meta_rows * dim];
            if cfg.noise_sigma > 0.0 {
                for x in data.iter_mut() {
                    let n = noise.sample(&mut rng);
                    *x = if kind == EmbeddingKind::ObjectSegmentation { n.max(0.0) } else { n };
                }
            }
            if cfg.channel_allocation.contains(&kind) {
                for q in &planned {
                    let (sig, ctx) = vocab.channels(kind, &q.vo).expect("vocabulary word");
                    for r in 0..meta_rows {
                        let t = row_time(r);
                        let inside = t >= q.gt.start() && t <= q.gt.end();
                        let ch = if inside { sig } else { ctx };
                        data[r * dim + ch] += cfg.signal_strength;
                    }
                }
            }
            let key = format!("{video_id}/{}", kind.name());
            records.push(TensorRecord::from_f64(key.clone(), vec![meta_rows, dim], &data)?);
            refs.insert(kind, key);
        }
        let meta = VideoMeta {
            video_id: video_id.clone(),
            duration,
            frame_rate: cfg.frame_rate,
            clip_feature_refs: refs,
            feature_stride: cfg.feature_stride,
        };

        let split = if v < n_train_videos { &mut train } else { &mut test };
        for (&qi, q) in query_ids.iter().zip(planned) {
            let query_id = format!("q{qi:04}");
            let s_key = format!("{query_id}/{}", cfg.sentence_kind.name());
            let vo_key = format!("{query_id}/{}", cfg.vo_kind.name());
            records.push(TensorRecord::from_f64(
                s_key.clone(),
                vec![cfg.dims.dim(cfg.sentence_kind)],
                &sentence_code(cfg, &q.vo),
            )?);
            records.push(TensorRecord::from_f64(
                vo_key.clone(),
                vec![2, cfg.dims.dim(cfg.vo_kind)],
                &vo_code(cfg, &q.vo),
            )?);
            split.queries.push(QueryRecord {
                video_id: video_id.clone(),
                query_id,
                text: q.text,
                vo_pair: q.vo,
                gt: q.gt,
                embedding_refs: BTreeMap::from([(cfg.sentence_kind, s_key), (cfg.vo_kind, vo_key)]),
            });
        }
        split.videos.push(meta);
    }
    Ok(SynthDataset {
        train,
        test,
        records,
        vocabulary: vocab,
        config: cfg.clone(),
    })
}

/// Random per-pixel class distributions with extra mass on `planted`.
pub fn random_class_map<R: Rng>(
    rng: &mut R,
    height: usize,
    width: usize,
    classes: usize,
    planted: Option<usize>,
    strength: f64,
) -> Result<FrameClassMap> {
    let mut probs = Vec::with_capacity(height * width * classes);
    for _ in 0..height * width {
        let mut pixel: Vec<f64> = (0..classes).map(|_| rng.gen::<f64>()).collect();
        if let Some(c) = planted {
            pixel[c] += strength;
        }
        let s: f64 = pixel.iter().sum();
        probs.extend(pixel.iter().map(|x| x / s));
    }
    FrameClassMap::new(height, width, classes, probs)
}

fn top_n_by<F: Fn(usize) -> f64>(n_clips: usize, score: F) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_clips).collect();
    idx.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    idx
}

/// Brute-force decoder that reads the planted channel directly: candidates
/// are ranked by the query's signal channel averaged over the clip's rows.
pub fn decoding_oracle(
    data: &SynthDataset,
    manifest: &Manifest,
    proposals: &ProposalConfig,
    kind: EmbeddingKind,
    spec: &EvalSpec,
) -> Result<EvalResult> {
    let store: BTreeMap<&str, &TensorRecord> = data.records.iter().map(|r| (r.key.as_str(), r)).collect();
    let videos = manifest.video_index();
    let mut ranked = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for q in &manifest.queries {
        let meta = videos[q.video_id.as_str()];
        let clips = generate_proposals(meta, proposals)?;
        let seq = store[meta.clip_feature_refs[&kind].as_str()];
        let (sig, _) = data
            .vocabulary
            .channels(kind, &q.vo_pair)
            .ok_or_else(|| Error::invalid(format!("query {} uses an unknown word", q.query_id)))?;
        let mut pooled = Vec::with_capacity(clips.len());
        for clip in &clips {
            let rows = clip_rows(meta, clip, seq.rows())?;
            let sum: f64 = rows.iter().map(|&r| f64::from(seq.row(r)[sig])).sum();
            pooled.push(sum / rows.len() as f64);
        }
        let order = top_n_by(clips.len(), |i| pooled[i]);
        ranked.insert(q.query_id.clone(), order.iter().map(|&i| clips[i].bounds).collect());
        gts.insert(q.query_id.clone(), q.gt);
    }
    recall_at_n(&ranked, &gts, spec)
}

/// Chance level: candidates ranked uniformly at random.
pub fn random_ranking_oracle(manifest: &Manifest, proposals: &ProposalConfig, spec: &EvalSpec, seed: u64) -> Result<EvalResult> {
    let videos = manifest.video_index();
    let mut ranked = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for q in &manifest.queries {
        let mut clips: Vec<Interval> = generate_proposals(videos[q.video_id.as_str()], proposals)?
            .into_iter()
            .map(|c| c.bounds)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[seeds::hash_str(&q.query_id)]));
        clips.shuffle(&mut rng);
        ranked.insert(q.query_id.clone(), clips);
        gts.insert(q.query_id.clone(), q.gt);
    }
    recall_at_n(&ranked, &gts, spec)
}
