//! Two-stream fusion network.
//!
//! ```text
//! low visual  --proj--\
//!                      MPU_low  --\
//! sentence    --proj--/            \
//!                                   concat -> hidden (tanh) -> [score, d_start, d_end]
//! high visual --proj--\            /
//!                      MPU_high --/
//! VO pair     --proj--/
//! ```
//!
//! Projections and the hidden layer use `tanh`. All parameters live in one
//! flat buffer so the optimizer and the finite-difference checks can treat
//! them uniformly; [`LayerId`] addresses the per-layer views.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{DimTable, EmbeddingKind, Interval, TensorRecord};
use crate::dataset::{ClipFeatures, QueryFeatures, VideoCandidates};
use crate::error::{Error, Result};
use crate::features::{build_low_input, build_mlp_high_input, HighLevelFusionConfig, Mode};
use crate::proposals::{apply_offsets, ClipCandidate};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub sentence_kind: EmbeddingKind,
    pub vo_kind: EmbeddingKind,
    pub use_object_features: bool,
    pub use_captioning_features: bool,
    pub common_dim: usize,
    pub hidden_dim: usize,
    pub fusion: HighLevelFusionConfig,
    pub s_cap: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sentence_kind: EmbeddingKind::SentenceBert,
            vo_kind: EmbeddingKind::VoGlove,
            use_object_features: true,
            use_captioning_features: false,
            common_dim: 256,
            hidden_dim: 256,
            fusion: HighLevelFusionConfig::default(),
            s_cap: 0.005,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Feature-toggle presets named after the ablation rows: `mac`
    /// (skip-thought + GloVe), `model1` .. `model7`.
    pub fn preset(name: &str) -> Result<Self> {
        use EmbeddingKind as K;
        let row = |sentence, vo, objects, captioning| ModelConfig {
            sentence_kind: sentence,
            vo_kind: vo,
            use_object_features: objects,
            use_captioning_features: captioning,
            ..ModelConfig::default()
        };
        Ok(match name {
            "mac" => row(K::SentenceSkipthought, K::VoGlove, false, false),
            "model1" => row(K::SentenceBert, K::VoGlove, false, false),
            "model2" => row(K::SentenceSkipthought, K::VoGlove, true, false),
            "model3" => row(K::SentenceBert, K::VoGlove, true, false),
            "model4" => row(K::SentenceSkipthought, K::VoBert, true, false),
            "model5" => row(K::SentenceBert, K::VoBert, true, false),
            "model6" => row(K::SentenceRoberta, K::VoGlove, true, false),
            "model7" => row(K::SentenceBert, K::VoGlove, true, true),
            other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sentence_kind.is_sentence() {
            return Err(Error::Config(format!("{} is not a sentence embedding", self.sentence_kind)));
        }
        if !self.vo_kind.is_vo() {
            return Err(Error::Config(format!("{} is not a VO embedding", self.vo_kind)));
        }
        if self.common_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("common_dim and hidden_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.s_cap) {
            return Err(Error::Config(format!("s_cap must lie in [0, 1], got {}", self.s_cap)));
        }
        self.fusion.validate()
    }

    /// Effective high-level fusion settings: with object features disabled
    /// the object slot is fed zeros.
    fn effective_fusion(&self) -> HighLevelFusionConfig {
        if self.use_object_features {
            self.fusion
        } else {
            HighLevelFusionConfig {
                s_obj: 0.0,
                ..self.fusion
            }
        }
    }
}

/// Input widths of every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub low_in: usize,
    pub sentence_in: usize,
    pub high_in: usize,
    pub vo_in: usize,
    pub common: usize,
    pub hidden: usize,
    pub captioning: usize,
    pub object: usize,
}

impl NetworkShape {
    pub fn new(cfg: &ModelConfig, dims: &DimTable) -> Self {
        use EmbeddingKind as K;
        let captioning = if cfg.use_captioning_features {
            dims.dim(K::VideoCaptioning)
        } else {
            0
        };
        NetworkShape {
            low_in: dims.dim(K::C3dFc6) + captioning,
            sentence_in: dims.dim(cfg.sentence_kind),
            high_in: dims.dim(K::ObjectSegmentation) + dims.dim(K::VisualActivityConcepts),
            vo_in: 2 * dims.dim(cfg.vo_kind),
            common: cfg.common_dim,
            hidden: cfg.hidden_dim,
            captioning,
            object: dims.dim(K::ObjectSegmentation),
        }
    }

    fn layer_dims(&self, id: LayerId) -> (usize, usize) {
        match id {
            LayerId::Low => (self.low_in, self.common),
            LayerId::Sentence => (self.sentence_in, self.common),
            LayerId::High => (self.high_in, self.common),
            LayerId::Vo => (self.vo_in, self.common),
            LayerId::Hidden => (8 * self.common, self.hidden),
            LayerId::Output => (self.hidden, 3),
        }
    }

    /// `(start, in, out)` of every layer in the flat buffer; weights come
    /// first (`out x in`, row-major), then the `out` biases.
    pub fn offsets(&self) -> [(usize, usize, usize); 6] {
        let mut out = [(0, 0, 0); 6];
        let mut at = 0;
        for (slot, id) in out.iter_mut().zip(LayerId::ALL) {
            let (i, o) = self.layer_dims(id);
            *slot = (at, i, o);
            at += i * o + o;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let (at, i, o) = self.offsets()[5];
        at + i * o + o
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerId {
    Low,
    Sentence,
    High,
    Vo,
    Hidden,
    Output,
}

impl LayerId {
    pub const ALL: [LayerId; 6] = [
        LayerId::Low,
        LayerId::Sentence,
        LayerId::High,
        LayerId::Vo,
        LayerId::Hidden,
        LayerId::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerId::Low => "proj_low",
            LayerId::Sentence => "proj_sentence",
            LayerId::High => "proj_high",
            LayerId::Vo => "proj_vo",
            LayerId::Hidden => "head_hidden",
            LayerId::Output => "head_output",
        }
    }
}

/// Borrowed view of one affine layer: row-major `weight[out][in]`, `bias[out]`.
#[derive(Clone, Copy)]
struct Linear<'a> {
    weight: &'a [f64],
    bias: &'a [f64],
    in_dim: usize,
}

impl Linear<'_> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.bias
            .iter()
            .zip(self.weight.chunks_exact(self.in_dim))
            .map(|(b, row)| b + dot(row, x))
            .collect()
    }

    /// `W^T g`.
    fn transpose_apply(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim];
        for (&gi, row) in g.iter().zip(self.weight.chunks_exact(self.in_dim)) {
            if gi != 0.0 {
                axpy(&mut out, gi, row);
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Network parameters (or gradients, which share the layout).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    shape: NetworkShape,
    values: Vec<f64>,
    generation: u64,
}

pub type Gradients = NetworkParams;

impl NetworkParams {
    pub fn zeros(shape: NetworkShape) -> Self {
        NetworkParams {
            values: vec![0.0; shape.param_count()],
            shape,
            generation: 0,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: &ModelConfig, dims: &DimTable) -> Self {
        let shape = NetworkShape::new(cfg, dims);
        let mut params = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[0x1417]));
        for (at, i, o) in shape.offsets() {
            let limit = (6.0 / (i + o) as f64).sqrt();
            for w in &mut params.values[at..at + i * o] {
                *w = rng.gen_range(-limit..=limit);
            }
        }
        params
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access; bumps the generation so stale forward records are
    /// detected by [`backward`].
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.values
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    fn layer(&self, id: LayerId) -> Linear<'_> {
        let (at, i, o) = self.shape.offsets()[id as usize];
        Linear {
            weight: &self.values[at..at + i * o],
            bias: &self.values[at + i * o..at + i * o + o],
            in_dim: i,
        }
    }

    fn layer_mut(&mut self, id: LayerId) -> (&mut [f64], &mut [f64]) {
        let (at, i, o) = self.shape.offsets()[id as usize];
        let (w, rest) = self.values[at..at + i * o + o].split_at_mut(i * o);
        (w, rest)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &NetworkParams) {
        self.generation += 1;
        axpy(&mut self.values, scale, &other.values);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Parameter tensors under canonical keys (`<layer>.weight`, `<layer>.bias`).
    pub fn to_records(&self) -> Vec<TensorRecord> {
        let mut out = Vec::with_capacity(12);
        for id in LayerId::ALL {
            let (i, o) = self.shape.layer_dims(id);
            let layer = self.layer(id);
            out.push(
                TensorRecord::from_f64(format!("{}.weight", id.name()), vec![o, i], layer.weight)
                    .expect("finite parameters"),
            );
            out.push(
                TensorRecord::from_f64(format!("{}.bias", id.name()), vec![o], layer.bias)
                    .expect("finite parameters"),
            );
        }
        out
    }

    pub fn from_records(shape: NetworkShape, records: &[TensorRecord]) -> Result<Self> {
        let mut params = Self::zeros(shape);
        for id in LayerId::ALL {
            let (i, o) = shape.layer_dims(id);
            let find = |suffix: &str, expect: Vec<usize>| -> Result<Vec<f64>> {
                let key = format!("{}.{suffix}", id.name());
                let rec = records
                    .iter()
                    .find(|r| r.key == key)
                    .ok_or_else(|| Error::DanglingKey(key.clone()))?;
                if rec.shape != expect {
                    return Err(Error::DimMismatch(format!(
                        "checkpoint tensor `{key}` has shape {:?}, expected {expect:?}",
                        rec.shape
                    )));
                }
                Ok(rec.to_f64())
            };
            let w = find("weight", vec![o, i])?;
            let b = find("bias", vec![o])?;
            let (wd, bd) = params.layer_mut(id);
            wd.copy_from_slice(&w);
            bd.copy_from_slice(&b);
        }
        Ok(params)
    }
}

/// `[v + s; v * s; v; s]`.
pub fn mpu_fuse(v: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    if v.len() != s.len() {
        return Err(Error::DimMismatch(format!(
            "MPU inputs have dims {} and {}",
            v.len(),
            s.len()
        )));
    }
    let mut out = Vec::with_capacity(4 * v.len());
    out.extend(v.iter().zip(s).map(|(a, b)| a + b));
    out.extend(v.iter().zip(s).map(|(a, b)| a * b));
    out.extend_from_slice(v);
    out.extend_from_slice(s);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Raw (pre-logistic) alignment score.
    pub score: f64,
    pub start_offset: f64,
    pub end_offset: f64,
}

impl Prediction {
    pub fn as_array(&self) -> [f64; 3] {
        [self.score, self.start_offset, self.end_offset]
    }
}

/// Intermediate activations of one sample.
#[derive(Debug, Clone)]
struct SampleTape {
    x_low: Vec<f64>,
    x_sentence: Vec<f64>,
    x_high: Vec<f64>,
    x_vo: Vec<f64>,
    p_low: Vec<f64>,
    p_sentence: Vec<f64>,
    p_high: Vec<f64>,
    p_vo: Vec<f64>,
    fused: Vec<f64>,
    hidden: Vec<f64>,
}

/// Activations recorded by [`forward_batch`] for a later [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    generation: u64,
    shape: NetworkShape,
    tapes: Vec<SampleTape>,
}

impl ForwardRecord {
    pub fn len(&self) -> usize {
        self.tapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tapes.is_empty()
    }
}

fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::DimMismatch(format!("{what}: got {got} values, expected {want}")));
    }
    Ok(())
}

fn run_sample(
    params: &NetworkParams,
    cfg: &ModelConfig,
    clip: &ClipFeatures,
    query: &QueryFeatures,
    mode: Mode,
    seed: u64,
) -> Result<(Prediction, SampleTape)> {
    let shape = params.shape;
    let x_low = if cfg.use_captioning_features {
        let cap = clip
            .captioning
            .as_deref()
            .ok_or_else(|| Error::MissingFeature(EmbeddingKind::VideoCaptioning.name().into()))?;
        build_low_input(&clip.fc6, cap, cfg.s_cap, shape.captioning)?
    } else {
        clip.fc6.clone()
    };
    check_len(EmbeddingKind::C3dFc6.name(), x_low.len(), shape.low_in)?;
    check_len("sentence embedding", query.sentence.len(), shape.sentence_in)?;
    check_len("VO embedding", query.vo.len(), shape.vo_in)?;
    check_len(EmbeddingKind::ObjectSegmentation.name(), clip.v_obj.len(), shape.object)?;
    let x_high = build_mlp_high_input(&clip.v_obj, &clip.v_vac, &cfg.effective_fusion(), mode, seed)?;
    check_len("high-level visual input", x_high.len(), shape.high_in)?;

    let project = |id: LayerId, x: &[f64]| {
        let mut p = params.layer(id).apply(x);
        tanh_in_place(&mut p);
        p
    };
    let p_low = project(LayerId::Low, &x_low);
    let p_sentence = project(LayerId::Sentence, &query.sentence);
    let p_high = project(LayerId::High, &x_high);
    let p_vo = project(LayerId::Vo, &query.vo);
    let mut fused = mpu_fuse(&p_low, &p_sentence)?;
    fused.extend(mpu_fuse(&p_high, &p_vo)?);
    let hidden = project(LayerId::Hidden, &fused);
    let out = params.layer(LayerId::Output).apply(&hidden);
    let pred = Prediction {
        score: out[0],
        start_offset: out[1],
        end_offset: out[2],
    };
    Ok((
        pred,
        SampleTape {
            x_low,
            x_sentence: query.sentence.clone(),
            x_high,
            x_vo: query.vo.clone(),
            p_low,
            p_sentence,
            p_high,
            p_vo,
            fused,
            hidden,
        },
    ))
}

/// Single-sample forward pass. Deterministic in `(params, inputs, mode, seed)`.
pub fn forward(
    params: &NetworkParams,
    cfg: &ModelConfig,
    clip: &ClipFeatures,
    query: &QueryFeatures,
    mode: Mode,
    seed: u64,
) -> Result<Prediction> {
    run_sample(params, cfg, clip, query, mode, seed).map(|(p, _)| p)
}

/// Per-sample dropout seed inside a batch.
pub fn sample_seed(batch_seed: u64, index: usize) -> u64 {
    seeds::derive(batch_seed, &[index as u64])
}

/// Batched forward pass that records activations for [`backward`].
pub fn forward_batch(
    params: &NetworkParams,
    cfg: &ModelConfig,
    batch: &[(&ClipFeatures, &QueryFeatures)],
    mode: Mode,
    seed: u64,
) -> Result<(Vec<Prediction>, ForwardRecord)> {
    let results: Vec<(Prediction, SampleTape)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (clip, query))| run_sample(params, cfg, clip, query, mode, sample_seed(seed, i)))
        .collect::<Result<_>>()?;
    let (preds, tapes) = results.into_iter().unzip();
    Ok((
        preds,
        ForwardRecord {
            generation: params.generation,
            shape: params.shape,
            tapes,
        },
    ))
}

const REDUCTION_CHUNK: usize = 8;

/// Gradients of `sum_i <loss_grads[i], output_i>` w.r.t. every parameter.
///
/// Samples are reduced in fixed-size chunks, and chunk sums are added in
/// order, so the result does not depend on the thread count.
pub fn backward(params: &NetworkParams, record: &ForwardRecord, loss_grads: &[[f64; 3]]) -> Result<Gradients> {
    if record.generation != params.generation || record.shape != params.shape {
        return Err(Error::StaleForward(format!(
            "record taken at parameter generation {}, parameters are at {}",
            record.generation, params.generation
        )));
    }
    if record.tapes.len() != loss_grads.len() {
        return Err(Error::StaleForward(format!(
            "record holds {} samples but {} loss gradients were given",
            record.tapes.len(),
            loss_grads.len()
        )));
    }
    let partials: Vec<Gradients> = record
        .tapes
        .par_chunks(REDUCTION_CHUNK)
        .zip(loss_grads.par_chunks(REDUCTION_CHUNK))
        .map(|(tapes, grads)| {
            let mut acc = Gradients::zeros(params.shape);
            for (tape, g) in tapes.iter().zip(grads) {
                accumulate_sample(params, tape, g, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = Gradients::zeros(params.shape);
    for p in &partials {
        axpy(&mut total.values, 1.0, &p.values);
    }
    Ok(total)
}

fn accumulate_layer(acc: &mut Gradients, id: LayerId, dz: &[f64], x: &[f64]) {
    let (w, b) = acc.layer_mut(id);
    let in_dim = x.len();
    for ((row, bo), &d) in w.chunks_exact_mut(in_dim).zip(b.iter_mut()).zip(dz) {
        if d != 0.0 {
            axpy(row, d, x);
            *bo += d;
        }
    }
}

fn tanh_backward(upstream: &[f64], activated: &[f64]) -> Vec<f64> {
    upstream
        .iter()
        .zip(activated)
        .map(|(g, a)| g * (1.0 - a * a))
        .collect()
}

/// Gradients of an MPU's output w.r.t. its two inputs.
fn mpu_backward(g: &[f64], v: &[f64], s: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = v.len();
    let (g_sum, rest) = g.split_at(d);
    let (g_prod, rest) = rest.split_at(d);
    let (g_v, g_s) = rest.split_at(d);
    let dv = (0..d).map(|i| g_sum[i] + g_prod[i] * s[i] + g_v[i]).collect();
    let ds = (0..d).map(|i| g_sum[i] + g_prod[i] * v[i] + g_s[i]).collect();
    (dv, ds)
}

fn accumulate_sample(params: &NetworkParams, tape: &SampleTape, g_out: &[f64; 3], acc: &mut Gradients) {
    if g_out.iter().all(|&g| g == 0.0) {
        return;
    }
    accumulate_layer(acc, LayerId::Output, g_out, &tape.hidden);
    let d_hidden = params.layer(LayerId::Output).transpose_apply(g_out);
    let dz_hidden = tanh_backward(&d_hidden, &tape.hidden);
    accumulate_layer(acc, LayerId::Hidden, &dz_hidden, &tape.fused);
    let d_fused = params.layer(LayerId::Hidden).transpose_apply(&dz_hidden);

    let quarter = 4 * params.shape.common;
    let (g_low, g_high) = d_fused.split_at(quarter);
    let (d_plow, d_psent) = mpu_backward(g_low, &tape.p_low, &tape.p_sentence);
    let (d_phigh, d_pvo) = mpu_backward(g_high, &tape.p_high, &tape.p_vo);

    for (id, d_p, p, x) in [
        (LayerId::Low, &d_plow, &tape.p_low, &tape.x_low),
        (LayerId::Sentence, &d_psent, &tape.p_sentence, &tape.x_sentence),
        (LayerId::High, &d_phigh, &tape.p_high, &tape.x_high),
        (LayerId::Vo, &d_pvo, &tape.p_vo, &tape.x_vo),
    ] {
        let dz = tanh_backward(d_p, p);
        accumulate_layer(acc, id, &dz, x);
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub clip: ClipCandidate,
    /// Logistic of the raw head score.
    pub alignment_score: f64,
    pub actionness: f64,
    pub weighted_score: f64,
    pub refined: Interval,
}

impl PredictionRecord {
    pub fn new(clip: ClipCandidate, alignment_score: f64, actionness: f64, refined: Interval) -> Self {
        PredictionRecord {
            clip,
            alignment_score,
            actionness,
            weighted_score: alignment_score * actionness,
            refined,
        }
    }
}

/// Descending weighted score; ties go to the earlier clip, then the smaller scale.
pub fn rank_predictions(records: &mut [PredictionRecord]) {
    records.sort_by(|a, b| {
        b.weighted_score
            .total_cmp(&a.weighted_score)
            .then(a.clip.bounds.start().total_cmp(&b.clip.bounds.start()))
            .then(a.clip.scale_index.cmp(&b.clip.scale_index))
    });
}

/// Scores every candidate of a video against one query (evaluation mode).
pub fn score_candidates(
    params: &NetworkParams,
    cfg: &ModelConfig,
    video: &VideoCandidates,
    query: &QueryFeatures,
) -> Result<Vec<PredictionRecord>> {
    if video.clips.is_empty() {
        return Err(Error::invalid(format!("video {} has no candidates", video.meta.video_id)));
    }
    let mut records = video
        .clips
        .iter()
        .zip(&video.features)
        .map(|(clip, feats)| {
            let p = forward(params, cfg, feats, query, Mode::Eval, 0)?;
            let refined = apply_offsets(clip, p.start_offset, p.end_offset, video.meta.duration)?;
            Ok(PredictionRecord::new(
                clip.clone(),
                logistic(p.score),
                feats.actionness,
                refined,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    rank_predictions(&mut records);
    Ok(records)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    logistic(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_dims() -> DimTable {
        use EmbeddingKind as K;
        DimTable::default()
            .with_override(K::C3dFc6, 5)
            .with_override(K::SentenceBert, 6)
            .with_override(K::VoGlove, 3)
            .with_override(K::ObjectSegmentation, 7)
            .with_override(K::VisualActivityConcepts, 4)
            .with_override(K::VideoCaptioning, 5)
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            common_dim: 4,
            hidden_dim: 5,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    fn inputs(seed: u64) -> (ClipFeatures, QueryFeatures) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        (
            ClipFeatures {
                fc6: v(5),
                captioning: Some(v(5)),
                v_obj: v(7).iter().map(|x: &f64| x.abs()).collect(),
                v_vac: v(4),
                actionness: 1.0,
            },
            QueryFeatures {
                sentence: v(6),
                vo: v(6),
            },
        )
    }

    #[test]
    fn mpu_examples() {
        assert_eq!(
            mpu_fuse(&[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            vec![4.0, 6.0, 3.0, 8.0, 1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(
            mpu_fuse(&[1.0, 2.0], &[0.0, 0.0]).unwrap(),
            vec![1.0, 2.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0]
        );
        assert_eq!(mpu_fuse(&[0.5; 32], &[0.25; 32]).unwrap().len(), 128);
        assert!(mpu_fuse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let cfg = tiny_cfg();
        let params = NetworkParams::zeros(NetworkShape::new(&cfg, &tiny_dims()));
        let (clip, query) = inputs(1);
        let p = forward(&params, &cfg, &clip, &query, Mode::Train, 5).unwrap();
        assert_eq!(p.as_array(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let params = NetworkParams::init(&cfg, &tiny_dims());
        let (clip, query) = inputs(2);
        let a = forward(&params, &cfg, &clip, &query, Mode::Train, 9).unwrap();
        let b = forward(&params, &cfg, &clip, &query, Mode::Train, 9).unwrap();
        assert_eq!(a.as_array().map(f64::to_bits), b.as_array().map(f64::to_bits));
    }

    #[test]
    fn missing_captioning_is_named() {
        let cfg = ModelConfig {
            use_captioning_features: true,
            ..tiny_cfg()
        };
        let params = NetworkParams::init(&cfg, &tiny_dims());
        let (mut clip, query) = inputs(3);
        clip.captioning = None;
        let err = forward(&params, &cfg, &clip, &query, Mode::Eval, 0).unwrap_err();
        assert!(err.to_string().contains("video_captioning"));
    }

    #[test]
    fn object_toggle_matches_zero_scale() {
        let dims = tiny_dims();
        let off = ModelConfig {
            use_object_features: false,
            ..tiny_cfg()
        };
        let zero = ModelConfig {
            fusion: HighLevelFusionConfig {
                s_obj: 0.0,
                ..off.fusion
            },
            use_object_features: true,
            ..off.clone()
        };
        let params = NetworkParams::init(&off, &dims);
        assert_eq!(params, NetworkParams::init(&zero, &dims));
        for seed in 0..20 {
            let (clip, query) = inputs(seed);
            let a = forward(&params, &off, &clip, &query, Mode::Train, seed).unwrap();
            let b = forward(&params, &zero, &clip, &query, Mode::Train, seed).unwrap();
            assert_eq!(a.as_array().map(f64::to_bits), b.as_array().map(f64::to_bits));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny_cfg();
        let params = NetworkParams::init(&cfg, &tiny_dims());
        let (clip, query) = inputs(4);
        let (_, rec) = forward_batch(&params, &cfg, &[(&clip, &query)], Mode::Train, 1).unwrap();
        let g = backward(&params, &rec, &[[0.0; 3]]).unwrap();
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stale_record_rejected() {
        let cfg = tiny_cfg();
        let mut params = NetworkParams::init(&cfg, &tiny_dims());
        let (clip, query) = inputs(5);
        let (_, rec) = forward_batch(&params, &cfg, &[(&clip, &query)], Mode::Train, 1).unwrap();
        assert!(backward(&params, &rec, &[[1.0; 3], [1.0; 3]]).is_err());
        params.values_mut()[0] += 1e-3;
        assert!(matches!(
            backward(&params, &rec, &[[1.0; 3]]),
            Err(Error::StaleForward(_))
        ));
    }

    /// Output layer is affine in its weights, so central differences are exact
    /// up to rounding.
    #[test]
    fn output_layer_matches_finite_differences() {
        let cfg = tiny_cfg();
        let mut params = NetworkParams::init(&cfg, &tiny_dims());
        let (clip, query) = inputs(6);
        let upstream = [0.7, -0.3, 1.1];
        let objective = |p: &NetworkParams| {
            let out = forward(p, &cfg, &clip, &query, Mode::Eval, 0).unwrap().as_array();
            out.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, rec) = forward_batch(&params, &cfg, &[(&clip, &query)], Mode::Eval, 0).unwrap();
        let grads = backward(&params, &rec, &[upstream]).unwrap();
        let (start, i, o) = params.shape.offsets()[LayerId::Output as usize];
        let h = 1e-5;
        for k in start..start + i * o + o {
            let orig = params.values[k];
            params.values_mut()[k] = orig + h;
            let plus = objective(&params);
            params.values_mut()[k] = orig - h;
            let minus = objective(&params);
            params.values_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = grads.values[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-6, "param {k}: analytic {a}, fd {fd}");
        }
    }

    #[test]
    fn checkpoint_records_round_trip_through_f32() {
        let cfg = tiny_cfg();
        let dims = tiny_dims();
        let params = NetworkParams::init(&cfg, &dims);
        let recs = params.to_records();
        assert_eq!(recs.len(), 12);
        let back = NetworkParams::from_records(*params.shape(), &recs).unwrap();
        for (a, b) in params.values().iter().zip(back.values()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(NetworkParams::from_records(*params.shape(), &recs[1..]).is_err());
    }

    #[test]
    fn ranking_weights_by_actionness() {
        let clip = |s: f64| ClipCandidate {
            video_id: "v".into(),
            bounds: Interval::new(s, s + 1.0).unwrap(),
            scale_index: 0,
        };
        let mut recs = vec![
            PredictionRecord::new(clip(0.0), 0.2, 1.0, clip(0.0).bounds),
            PredictionRecord::new(clip(5.0), 0.9, 0.1, clip(5.0).bounds),
        ];
        rank_predictions(&mut recs);
        assert_eq!(recs[0].clip.bounds.start(), 0.0);
        assert!((recs[1].weighted_score - 0.09).abs() < 1e-15);

        let mut tied = vec![
            PredictionRecord::new(clip(3.0), 0.5, 1.0, clip(3.0).bounds),
            PredictionRecord::new(clip(1.0), 0.5, 1.0, clip(1.0).bounds),
        ];
        rank_predictions(&mut tied);
        assert_eq!(tied[0].clip.bounds.start(), 1.0);
    }

    #[test]
    fn presets_follow_ablation_rows() {
        let m3 = ModelConfig::preset("model3").unwrap();
        assert!(m3.use_object_features && !m3.use_captioning_features);
        assert_eq!(m3.sentence_kind, EmbeddingKind::SentenceBert);
        let m7 = ModelConfig::preset("model7").unwrap();
        assert!(m7.use_object_features && m7.use_captioning_features);
        let mac = ModelConfig::preset("mac").unwrap();
        assert_eq!(mac.sentence_kind, EmbeddingKind::SentenceSkipthought);
        assert!(!mac.use_object_features);
        assert!(ModelConfig::preset("model9").is_err());
    }
}
