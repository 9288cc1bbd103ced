//! Pair mining, alignment + regression loss and the SGD loop.
//!
//! Positives are candidates overlapping the ground truth by at least
//! `positive_iou_threshold`; negatives are drawn from other videos and from
//! low-overlap clips of the same video. The alignment term is the logistic
//! loss on the raw score, the regression term a smooth-L1 penalty on both
//! boundary offsets of the positives.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::data_model::{DimTable, QueryRecord};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{recall_at_n, EvalSpec};
use crate::features::Mode;
use crate::network::{backward, forward_batch, ModelConfig, NetworkParams, Prediction};
use crate::proposals::ClipCandidate;
use crate::seeds;

/// Same-video clips below this IoU are eligible negatives.
pub const SAME_VIDEO_NEGATIVE_IOU: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub positive_iou_threshold: f64,
    pub negatives_per_positive: usize,
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            positive_iou_threshold: 0.5,
            negatives_per_positive: 10,
            lambda_reg: 0.01,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 30,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.positive_iou_threshold > 0.0 && self.positive_iou_threshold <= 1.0) {
            return bad(format!(
                "positive_iou_threshold must lie in (0, 1], got {}",
                self.positive_iou_threshold
            ));
        }
        if self.negatives_per_positive == 0 || self.batch_size == 0 {
            return bad("negatives_per_positive and batch_size must be positive".into());
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return bad(format!("lambda_reg must be >= 0, got {}", self.lambda_reg));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Index into the dataset's queries.
    pub query: usize,
    pub query_id: String,
    /// `(video position, clip index)` of the candidate.
    pub clip_ref: (usize, usize),
    pub clip: ClipCandidate,
    pub label: Label,
    /// `(gt.start - clip.start, gt.end - clip.end)`; positives only.
    pub offset_target: Option<(f64, f64)>,
}

/// Positives and seeded negatives for every query. Queries without any
/// positive candidate are skipped with a warning.
pub fn mine_pairs(data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<Vec<TrainingPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (qi, query) in data.queries.iter().enumerate() {
        let vpos = data
            .video_position(&query.video_id)
            .ok_or_else(|| Error::invalid(format!("unknown video `{}`", query.video_id)))?;
        let video = &data.videos[vpos];
        let mut positives = Vec::new();
        let mut pool = Vec::new();
        for (ci, clip) in video.clips.iter().enumerate() {
            let iou = crate::evaluation::temporal_iou(&clip.bounds, &query.gt);
            if iou >= cfg.positive_iou_threshold {
                positives.push(ci);
            } else if iou < SAME_VIDEO_NEGATIVE_IOU {
                pool.push((vpos, ci));
            }
        }
        if positives.is_empty() {
            warn!(query = %query.query_id, "no candidate reaches the positive IoU threshold; skipping");
            continue;
        }
        for (other, v) in data.videos.iter().enumerate() {
            if other != vpos {
                pool.extend((0..v.clips.len()).map(|ci| (other, ci)));
            }
        }
        for &ci in &positives {
            let clip = &video.clips[ci];
            pairs.push(TrainingPair {
                query: qi,
                query_id: query.query_id.clone(),
                clip_ref: (vpos, ci),
                clip: clip.clone(),
                label: Label::Positive,
                offset_target: Some(offset_target(clip, query)),
            });
        }
        let wanted = positives.len() * cfg.negatives_per_positive;
        if pool.is_empty() {
            continue;
        }
        let picks: Vec<(usize, usize)> = if wanted <= pool.len() {
            rand::seq::index::sample(&mut rng, pool.len(), wanted)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        } else {
            (0..wanted).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };
        for (v, ci) in picks {
            pairs.push(TrainingPair {
                query: qi,
                query_id: query.query_id.clone(),
                clip_ref: (v, ci),
                clip: data.videos[v].clips[ci].clone(),
                label: Label::Negative,
                offset_target: None,
            });
        }
    }
    Ok(pairs)
}

pub fn offset_target(clip: &ClipCandidate, query: &QueryRecord) -> (f64, f64) {
    (
        query.gt.start() - clip.bounds.start(),
        query.gt.end() - clip.bounds.end(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub aln: f64,
    pub reg: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Loss value and its gradient w.r.t. every prediction's outputs.
pub fn loss_with_grads(
    preds: &[Prediction],
    pairs: &[&TrainingPair],
    lambda_reg: f64,
) -> Result<(LossValue, Vec<[f64; 3]>)> {
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if preds.len() != pairs.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} pairs",
            preds.len(),
            pairs.len()
        )));
    }
    let n = preds.len() as f64;
    let n_pos = pairs.iter().filter(|p| p.label == Label::Positive).count();
    let mut aln = 0.0;
    let mut reg = 0.0;
    let mut grads = vec![[0.0; 3]; preds.len()];
    for ((p, pair), g) in preds.iter().zip(pairs).zip(grads.iter_mut()) {
        let y = match pair.label {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        };
        aln += softplus(-y * p.score);
        g[0] = -y * crate::network::sigmoid(-y * p.score) / n;
        if let Some((ts, te)) = pair.offset_target {
            let (rs, re) = (p.start_offset - ts, p.end_offset - te);
            reg += smooth_l1(rs) + smooth_l1(re);
            let scale = lambda_reg / n_pos as f64;
            g[1] = scale * smooth_l1_grad(rs);
            g[2] = scale * smooth_l1_grad(re);
        }
    }
    aln /= n;
    if n_pos > 0 {
        reg /= n_pos as f64;
    }
    Ok((
        LossValue {
            total: aln + lambda_reg * reg,
            aln,
            reg,
        },
        grads,
    ))
}

pub fn loss(preds: &[Prediction], pairs: &[&TrainingPair], lambda_reg: f64) -> Result<LossValue> {
    loss_with_grads(preds, pairs, lambda_reg).map(|(l, _)| l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "val_R@1")]
    pub val_r1: f64,
    #[serde(rename = "val_R@5")]
    pub val_r5: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

/// Deterministic train/validation split keyed by query id.
pub fn is_validation(query_id: &str, fraction: f64, seed: u64) -> bool {
    if fraction <= 0.0 {
        return false;
    }
    let h = seeds::derive(seed, &[seeds::hash_str(query_id)]);
    ((h >> 11) as f64 / (1u64 << 53) as f64) < fraction
}

/// One pass of SGD over `pairs` in the given order. Returns the mean batch loss.
pub fn run_epoch(
    params: &mut NetworkParams,
    model: &ModelConfig,
    data: &Dataset,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for (b, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
        let inputs: Vec<_> = chunk
            .iter()
            .map(|p| {
                let (v, c) = p.clip_ref;
                (&data.videos[v].features[c], &data.query_features[p.query])
            })
            .collect();
        let seed = seeds::derive(cfg.seed, &[0xba7c4, epoch as u64, b as u64]);
        let (preds, record) = forward_batch(params, model, &inputs, Mode::Train, seed)?;
        let refs: Vec<&TrainingPair> = chunk.iter().collect();
        let (value, grads) = loss_with_grads(&preds, &refs, cfg.lambda_reg)?;
        if !value.total.is_finite() {
            return Err(Error::Divergence { epoch, batch: b });
        }
        let g = backward(params, &record, &grads)?;
        params.add_scaled(-cfg.learning_rate, &g);
        if !params.is_finite() {
            return Err(Error::Divergence { epoch, batch: b });
        }
        total += value.total;
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Ranked refined intervals for every query of `data`.
pub fn predict_all(
    params: &NetworkParams,
    model: &ModelConfig,
    data: &Dataset,
    nms_threshold: f64,
) -> Result<Vec<(String, Vec<crate::network::PredictionRecord>)>> {
    use rayon::prelude::*;
    data.queries
        .par_iter()
        .zip(&data.query_features)
        .map(|(q, qf)| {
            let video = data.video_of(q)?;
            let ranked = crate::network::score_candidates(params, model, video, qf)?;
            Ok((q.query_id.clone(), crate::evaluation::nms(&ranked, nms_threshold)))
        })
        .collect()
}

/// Recall of a parameter set on `data` at the given spec; `(R@1, R@5)`-style
/// values are looked up by the caller.
pub fn evaluate(
    params: &NetworkParams,
    model: &ModelConfig,
    data: &Dataset,
    spec: &EvalSpec,
) -> Result<crate::evaluation::EvalResult> {
    let preds = predict_all(params, model, data, spec.nms_threshold)?;
    let ranked = preds
        .into_iter()
        .map(|(q, recs)| (q, recs.into_iter().map(|r| r.refined).collect()))
        .collect();
    let gts = data
        .queries
        .iter()
        .map(|q| (q.query_id.clone(), q.gt))
        .collect();
    recall_at_n(&ranked, &gts, spec)
}

/// Trains from a fresh initialization, validating after every epoch and
/// keeping the parameters with the best validation R@1 (earliest on ties).
pub fn train(data: &Dataset, dims: &DimTable, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    let mut params = NetworkParams::init(model, dims);
    let split_seed = seeds::derive(cfg.seed, &[0x5b117]);
    let val = data.subset(|q| is_validation(&q.query_id, cfg.validation_fraction, split_seed));
    let train_set = data.subset(|q| !is_validation(&q.query_id, cfg.validation_fraction, split_seed));
    let spec = EvalSpec {
        n_values: vec![1, 5],
        iou_threshold: 0.5,
        nms_threshold: 1.0,
    };
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_r1 = f64::NEG_INFINITY;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut pairs = mine_pairs(&train_set, cfg, seeds::derive(cfg.seed, &[0x9a125, epoch as u64]))?;
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[0x5f1e, epoch as u64])));
        let train_loss = run_epoch(&mut params, model, &train_set, &pairs, cfg, epoch)?;
        let (r1, r5) = if val.queries.is_empty() {
            (0.0, 0.0)
        } else {
            let res = evaluate(&params, model, &val, &spec)?;
            (res.recall(1), res.recall(5))
        };
        debug!(epoch, train_loss, r1, r5, "epoch done");
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            val_r1: r1,
            val_r5: r5,
        });
        // Without a validation split the latest epoch wins.
        if r1 > best_r1 || val.queries.is_empty() {
            best_r1 = r1;
            best = params.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Interval;

    fn pair(label: Label, target: Option<(f64, f64)>) -> TrainingPair {
        TrainingPair {
            query: 0,
            query_id: "q".into(),
            clip_ref: (0, 0),
            clip: ClipCandidate {
                video_id: "v".into(),
                bounds: Interval::new(10.0, 20.0).unwrap(),
                scale_index: 0,
            },
            label,
            offset_target: target,
        }
    }

    fn pred(score: f64, s: f64, e: f64) -> Prediction {
        Prediction {
            score,
            start_offset: s,
            end_offset: e,
        }
    }

    #[test]
    fn logistic_at_zero_is_ln2() {
        let pos = pair(Label::Positive, Some((1.0, -1.0)));
        let l = loss(&[pred(0.0, 1.0, -1.0)], &[&pos], 0.01).unwrap();
        assert!((l.aln - 2f64.ln()).abs() < 1e-15);
        assert_eq!(l.reg, 0.0);
        let neg = pair(Label::Negative, None);
        let l = loss(&[pred(0.0, 0.3, 0.3)], &[&neg], 0.01).unwrap();
        assert!((l.aln - 2f64.ln()).abs() < 1e-15);
        assert_eq!(l.reg, 0.0);
    }

    #[test]
    fn confident_positive() {
        let pos = pair(Label::Positive, Some((0.0, 0.0)));
        let l = loss(&[pred(10.0, 0.0, 0.0)], &[&pos], 0.01).unwrap();
        // ln(1 + e^-10)
        assert!((l.aln - 4.539_889_921_686_465e-5).abs() < 1e-15);
    }

    #[test]
    fn regression_term_and_total() {
        let pos = pair(Label::Positive, Some((0.0, 0.0)));
        let neg = pair(Label::Negative, None);
        let l = loss(&[pred(0.0, 0.5, -3.0), pred(0.0, 9.0, 9.0)], &[&pos, &neg], 0.5).unwrap();
        assert!((l.reg - (0.125 + 2.5)).abs() < 1e-15);
        assert!((l.total - (l.aln + 0.5 * l.reg)).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_errors() {
        assert!(matches!(loss(&[], &[], 0.01), Err(Error::EmptyBatch)));
    }

    #[test]
    fn validation_split_is_stable() {
        let ids: Vec<String> = (0..2000).map(|i| format!("q{i}")).collect();
        let picked = ids.iter().filter(|q| is_validation(q, 0.1, 3)).count();
        assert!((150..250).contains(&picked), "{picked}");
        assert!(ids.iter().all(|q| is_validation(q, 0.1, 3) == is_validation(q, 0.1, 3)));
        assert!(!ids.iter().any(|q| is_validation(q, 0.0, 3)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            positive_iou_threshold: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
