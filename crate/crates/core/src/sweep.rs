//! Three-axis grid over `(s_obj, d_obj, d_vac)`.
//!
//! Each grid point is trained from scratch with a seed derived from the base
//! seed and the point's grid index, so results do not depend on the worker
//! count. A failing point is recorded and excluded from winner selection.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::seeds;

/// Reference R@1 / R@5 of the MAC baseline, drawn as horizontal lines on
/// the sweep curves.
pub const BASELINE_R1: f64 = 0.304;
pub const BASELINE_R5: f64 = 0.648;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub s_obj_values: Vec<f64>,
    pub d_obj_values: Vec<f64>,
    pub d_vac_values: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            s_obj_values: vec![0.0, 0.005, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0],
            d_obj_values: vec![0.0, 0.1, 0.25, 0.5],
            d_vac_values: vec![0.0, 0.1, 0.25, 0.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub s_obj: f64,
    pub d_obj: f64,
    pub d_vac: f64,
}

/// Cartesian product, `s_obj` outermost and `d_vac` innermost.
pub fn enumerate_grid(grid: &SweepGrid) -> Result<Vec<SweepPoint>> {
    for (name, axis) in [
        ("s_obj_values", &grid.s_obj_values),
        ("d_obj_values", &grid.d_obj_values),
        ("d_vac_values", &grid.d_vac_values),
    ] {
        if axis.is_empty() {
            return Err(Error::Config(format!("sweep.{name} must be non-empty")));
        }
    }
    let mut out = Vec::with_capacity(grid.s_obj_values.len() * grid.d_obj_values.len() * grid.d_vac_values.len());
    for &s_obj in &grid.s_obj_values {
        for &d_obj in &grid.d_obj_values {
            for &d_vac in &grid.d_vac_values {
                out.push(SweepPoint { s_obj, d_obj, d_vac });
            }
        }
    }
    Ok(out)
}

pub fn point_seed(base_seed: u64, grid_index: usize) -> u64 {
    seeds::derive(base_seed, &[0x5eeb, grid_index as u64])
}

/// One row of the result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub s_obj: f64,
    pub d_obj: f64,
    pub d_vac: f64,
    pub best_epoch: usize,
    pub r1: f64,
    pub r5: f64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    pub checkpoint_path: Option<String>,
}

impl SweepEntry {
    pub fn point(&self) -> SweepPoint {
        SweepPoint {
            s_obj: self.s_obj,
            d_obj: self.d_obj,
            d_vac: self.d_vac,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    pub winner: SweepPoint,
}

/// What a trainer reports for one grid point.
#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub best_epoch: usize,
    pub r1: f64,
    pub r5: f64,
    pub params: Option<NetworkParams>,
}

/// Highest R@1, then R@5, then the smaller `s_obj`, `d_obj`, `d_vac`.
fn rank(a: &SweepEntry, b: &SweepEntry) -> Ordering {
    b.r1.total_cmp(&a.r1)
        .then(b.r5.total_cmp(&a.r5))
        .then(a.s_obj.total_cmp(&b.s_obj))
        .then(a.d_obj.total_cmp(&b.d_obj))
        .then(a.d_vac.total_cmp(&b.d_vac))
}

pub fn select_winner(entries: &[SweepEntry]) -> Option<SweepPoint> {
    entries
        .iter()
        .filter(|e| e.is_ok())
        .min_by(|a, b| rank(a, b))
        .map(SweepEntry::point)
}

/// Runs `trainer` on every grid point with at most `parallelism` workers.
/// `trainer` receives the point and its derived seed.
pub fn run_sweep_with<F>(
    grid: &SweepGrid,
    base_seed: u64,
    parallelism: usize,
    trainer: F,
) -> Result<(SweepResult, Vec<Option<NetworkParams>>)>
where
    F: Fn(SweepPoint, u64) -> Result<PointOutcome> + Sync,
{
    let points = enumerate_grid(grid)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<PointOutcome>> = pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(i, &p)| trainer(p, point_seed(base_seed, i)))
            .collect()
    });
    let mut entries = Vec::with_capacity(points.len());
    let mut params = Vec::with_capacity(points.len());
    for (p, outcome) in points.iter().zip(outcomes) {
        let entry = |best_epoch, r1, r5, status: String| SweepEntry {
            s_obj: p.s_obj,
            d_obj: p.d_obj,
            d_vac: p.d_vac,
            best_epoch,
            r1,
            r5,
            status,
            checkpoint_path: None,
        };
        match outcome {
            Ok(o) => {
                entries.push(entry(o.best_epoch, o.r1, o.r5, "ok".into()));
                params.push(o.params);
            }
            Err(e) => {
                warn!(?p, error = %e, "sweep point failed");
                entries.push(entry(0, 0.0, 0.0, format!("failed: {e}")));
                params.push(None);
            }
        }
    }
    let winner = select_winner(&entries).ok_or(Error::SweepFailed)?;
    Ok((SweepResult { entries, winner }, params))
}

pub fn result_table_to_string(entries: &[SweepEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("sweep entry serializes") + "\n")
        .collect()
}

pub fn write_result_table(entries: &[SweepEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, result_table_to_string(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_result_table(path: impl AsRef<Path>) -> Result<Vec<SweepEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                line: i + 1,
                message: format!("sweep table: {e}"),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    R1,
    R5,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::R1 => "R@1",
            Metric::R5 => "R@5",
        }
    }

    fn file_tag(self) -> &'static str {
        match self {
            Metric::R1 => "r1",
            Metric::R5 => "r5",
        }
    }

    pub fn reference(self) -> f64 {
        match self {
            Metric::R1 => BASELINE_R1,
            Metric::R5 => BASELINE_R5,
        }
    }

    fn of(self, e: &SweepEntry) -> f64 {
        match self {
            Metric::R1 => e.r1,
            Metric::R5 => e.r5,
        }
    }
}

/// Metric vs. `s_obj` at one `d_obj` value, `d_vac = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSeries {
    pub metric: Metric,
    pub d_obj: f64,
    pub points: Vec<(f64, f64)>,
    pub reference: f64,
}

impl CurveSeries {
    pub fn file_name(&self) -> String {
        format!("curve_{}_dobj_{}.tsv", self.metric.file_tag(), self.d_obj)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# metric={} d_obj={} d_vac=0 reference={}\ns_obj\t{}\n",
            self.metric.label(),
            self.d_obj,
            self.reference,
            self.metric.label()
        );
        for (s, v) in &self.points {
            out.push_str(&format!("{s}\t{v}\n"));
        }
        out
    }
}

/// Builds the curve series (one per metric and `d_obj`, points ordered by
/// `s_obj`) from successful `d_vac = 0` rows.
pub fn curves(entries: &[SweepEntry]) -> Vec<CurveSeries> {
    let rows: Vec<&SweepEntry> = entries.iter().filter(|e| e.is_ok() && e.d_vac == 0.0).collect();
    let mut d_objs: Vec<f64> = Vec::new();
    for e in &rows {
        if !d_objs.contains(&e.d_obj) {
            d_objs.push(e.d_obj);
        }
    }
    d_objs.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    for metric in [Metric::R1, Metric::R5] {
        for &d_obj in &d_objs {
            let mut points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|e| e.d_obj == d_obj)
                .map(|e| (e.s_obj, metric.of(e)))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            out.push(CurveSeries {
                metric,
                d_obj,
                points,
                reference: metric.reference(),
            });
        }
    }
    out
}

/// Writes one delimited-text file per series into `dir`.
pub fn emit_curves(result: &SweepResult, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    curves(&result.entries)
        .iter()
        .map(|series| {
            let path = dir.join(series.file_name());
            fs::write(&path, series.to_tsv()).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
