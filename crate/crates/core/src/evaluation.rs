//! Temporal IoU, R@n at IoU = u, interval NMS and prediction-file grading.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::Interval;
use crate::error::{Error, Result};
use crate::network::PredictionRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub n_values: Vec<usize>,
    pub iou_threshold: f64,
    pub nms_threshold: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            n_values: vec![1, 5],
            iou_threshold: 0.5,
            nms_threshold: 1.0,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return Err(Error::Config("eval.n_values must be non-empty and >= 1".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "eval.iou_threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "eval.nms_threshold must lie in (0, 1], got {}",
                self.nms_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub recall: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub per_query_hits: BTreeMap<String, BTreeMap<usize, u8>>,
}

impl EvalResult {
    /// Recall at `n`; NaN when `n` was not evaluated.
    pub fn recall(&self, n: usize) -> f64 {
        self.recall.get(&n).copied().unwrap_or(f64::NAN)
    }
}

/// Intersection over union of two time spans; 0 when disjoint or when the
/// union has zero length.
pub fn temporal_iou(a: &Interval, b: &Interval) -> f64 {
    let inter = (a.end().min(b.end()) - a.start().max(b.start())).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `R@n = (1 / N_q) * sum_i r(n, u, q_i)` where `r = 1` iff one of the top `n`
/// predictions of query `i` reaches IoU `u` with its ground truth.
pub fn recall_at_n(
    ranked: &BTreeMap<String, Vec<Interval>>,
    gts: &BTreeMap<String, Interval>,
    spec: &EvalSpec,
) -> Result<EvalResult> {
    spec.validate()?;
    let mut per_query_hits = BTreeMap::new();
    let mut sums: BTreeMap<usize, usize> = spec.n_values.iter().map(|&n| (n, 0)).collect();
    for (qid, gt) in gts {
        let preds = ranked.get(qid).ok_or_else(|| Error::MissingQuery(qid.clone()))?;
        if preds.is_empty() {
            return Err(Error::invalid(format!("query `{qid}` has no predictions")));
        }
        // Rank of the first hit, if any.
        let first_hit = preds
            .iter()
            .position(|p| temporal_iou(p, gt) >= spec.iou_threshold);
        let hits: BTreeMap<usize, u8> = spec
            .n_values
            .iter()
            .map(|&n| (n, u8::from(first_hit.is_some_and(|r| r < n))))
            .collect();
        for (n, &h) in &hits {
            *sums.get_mut(n).expect("n present") += usize::from(h);
        }
        per_query_hits.insert(qid.clone(), hits);
    }
    let n_queries = gts.len();
    let recall = sums
        .into_iter()
        .map(|(n, s)| (n, if n_queries == 0 { 0.0 } else { s as f64 / n_queries as f64 }))
        .collect();
    Ok(EvalResult {
        recall,
        n_queries,
        per_query_hits,
    })
}

/// Greedy suppression on refined intervals; `threshold = 1.0` returns the
/// input unchanged.
pub fn nms(ranked: &[PredictionRecord], threshold: f64) -> Vec<PredictionRecord> {
    if threshold >= 1.0 {
        return ranked.to_vec();
    }
    let mut kept: Vec<PredictionRecord> = Vec::new();
    for p in ranked {
        if kept
            .iter()
            .all(|k| temporal_iou(&k.refined, &p.refined) < threshold)
        {
            kept.push(p.clone());
        }
    }
    kept
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub query_id: String,
    pub rank: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

pub fn prediction_lines(query_id: &str, ranked: &[PredictionRecord]) -> Vec<PredictionLine> {
    ranked
        .iter()
        .enumerate()
        .map(|(i, p)| PredictionLine {
            query_id: query_id.to_owned(),
            rank: i + 1,
            start_sec: p.refined.start(),
            end_sec: p.refined.end(),
            score: p.weighted_score,
        })
        .collect()
}

pub fn write_predictions(lines: &[PredictionLine], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).expect("prediction line serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a prediction file into per-query interval lists ordered by rank.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<Interval>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut grouped: BTreeMap<String, Vec<(usize, Interval)>> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: PredictionLine = serde_json::from_str(raw).map_err(|e| Error::Manifest {
            line: idx + 1,
            message: format!("prediction file: {e}"),
        })?;
        let iv = Interval::new(line.start_sec, line.end_sec).map_err(|e| Error::Manifest {
            line: idx + 1,
            message: format!("prediction file: {e}"),
        })?;
        grouped.entry(line.query_id).or_default().push((line.rank, iv));
    }
    Ok(grouped
        .into_iter()
        .map(|(q, mut v)| {
            v.sort_by_key(|(rank, _)| *rank);
            (q, v.into_iter().map(|(_, iv)| iv).collect())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::ClipCandidate;
    use proptest::prelude::*;

    fn iv(s: f64, e: f64) -> Interval {
        Interval::new(s, e).unwrap()
    }

    fn rec(s: f64, e: f64) -> PredictionRecord {
        PredictionRecord::new(
            ClipCandidate {
                video_id: "v".into(),
                bounds: iv(s, e),
                scale_index: 0,
            },
            0.5,
            1.0,
            iv(s, e),
        )
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(&iv(2.0, 5.0), &iv(2.0, 5.0)), 1.0);
        assert_eq!(temporal_iou(&iv(0.0, 1.0), &iv(2.0, 3.0)), 0.0);
        assert!((temporal_iou(&iv(0.0, 10.0), &iv(5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(temporal_iou(&iv(3.0, 3.0), &iv(3.0, 3.0)), 0.0);
        assert!((temporal_iou(&iv(12.0, 18.0), &iv(10.0, 20.0)) - 0.6).abs() < 1e-15);
    }

    fn single_top(ious_gt: &[(f64, f64)]) -> (BTreeMap<String, Vec<Interval>>, BTreeMap<String, Interval>) {
        let mut ranked = BTreeMap::new();
        let mut gts = BTreeMap::new();
        for (i, &(s, e)) in ious_gt.iter().enumerate() {
            ranked.insert(format!("q{i}"), vec![iv(s, e)]);
            gts.insert(format!("q{i}"), iv(0.0, 10.0));
        }
        (ranked, gts)
    }

    #[test]
    fn recall_examples() {
        // IoU 0.6 against [0, 10].
        let (ranked, gts) = single_top(&[(0.0, 6.0)]);
        let res = recall_at_n(&ranked, &gts, &EvalSpec::default()).unwrap();
        assert_eq!(res.recall(1), 1.0);

        // Top-1 IoUs 0.6, 0.4, 0.55, 0.2.
        let (ranked, gts) = single_top(&[(0.0, 6.0), (0.0, 4.0), (0.0, 5.5), (0.0, 2.0)]);
        let res = recall_at_n(&ranked, &gts, &EvalSpec::default()).unwrap();
        assert_eq!(res.recall(1), 0.5);
        assert_eq!(res.n_queries, 4);
        assert_eq!(res.per_query_hits["q1"][&1], 0);
        // Fewer than 5 predictions: all available ones count.
        assert_eq!(res.recall(5), 0.5);
    }

    #[test]
    fn missing_query_is_named() {
        let (ranked, mut gts) = single_top(&[(0.0, 6.0)]);
        gts.insert("lost".into(), iv(0.0, 1.0));
        let err = recall_at_n(&ranked, &gts, &EvalSpec::default()).unwrap_err();
        assert!(matches!(err, Error::MissingQuery(ref q) if q == "lost"));
    }

    #[test]
    fn nms_examples() {
        let input = vec![rec(0.0, 10.0), rec(5.0, 15.0), rec(20.0, 30.0)];
        assert_eq!(nms(&input, 1.0), input);
        let kept = nms(&input, 0.3);
        let spans: Vec<_> = kept.iter().map(|p| (p.refined.start(), p.refined.end())).collect();
        assert_eq!(spans, vec![(0.0, 10.0), (20.0, 30.0)]);
        assert_eq!(nms(&[rec(1.0, 2.0), rec(1.0, 2.0)], 0.9).len(), 1);
    }

    #[test]
    fn prediction_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        let mut lines = prediction_lines("q1", &[rec(1.0, 2.0), rec(3.0, 4.0)]);
        lines.reverse();
        write_predictions(&lines, &path).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back["q1"], vec![iv(1.0, 2.0), iv(3.0, 4.0)]);
    }

    proptest! {
        #[test]
        fn iou_properties(a in 0.0f64..50.0, la in 0.01f64..20.0, b in 0.0f64..50.0, lb in 0.01f64..20.0,
                          shift in 0.0f64..10.0, scale in 0.1f64..10.0) {
            let x = iv(a, a + la);
            let y = iv(b, b + lb);
            let v = temporal_iou(&x, &y);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, temporal_iou(&y, &x));
            let xt = iv((a + shift) * scale, (a + la + shift) * scale);
            let yt = iv((b + shift) * scale, (b + lb + shift) * scale);
            prop_assert!((temporal_iou(&xt, &yt) - v).abs() < 1e-9);
            prop_assert_eq!(temporal_iou(&x, &x), 1.0);
        }

        #[test]
        fn recall_monotone_in_n(tops in prop::collection::vec(prop::collection::vec((0.0f64..9.0, 0.1f64..5.0), 1..8), 1..6)) {
            let mut ranked = BTreeMap::new();
            let mut gts = BTreeMap::new();
            for (i, preds) in tops.iter().enumerate() {
                ranked.insert(format!("q{i}"), preds.iter().map(|&(s, l)| iv(s, s + l)).collect());
                gts.insert(format!("q{i}"), iv(2.0, 6.0));
            }
            let spec = EvalSpec { n_values: vec![1, 2, 3, 5, 10], ..EvalSpec::default() };
            let res = recall_at_n(&ranked, &gts, &spec).unwrap();
            let vals: Vec<f64> = res.recall.values().copied().collect();
            prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
