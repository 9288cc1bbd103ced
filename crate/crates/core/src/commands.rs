//! The `mml` command line: argument parsing, one function per subcommand,
//! and the mapping from error classes to exit codes.
//!
//! Reports go to stdout, diagnostics to stderr through `tracing`. Every
//! artifact lands in `<output_dir>/<config hash>/`; wall-clock times are only
//! ever written to `run.log` there.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;
use tracing::{info, warn};

use crate::config::{self, RunConfig};
use crate::data_model::archive::{read_archive, write_archive, TensorRecord};
use crate::data_model::manifest::{parse_manifest, write_manifest};
use crate::data_model::{EmbeddingKind, FeatureStore, Manifest};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{prediction_lines, read_predictions, recall_at_n, write_predictions, EvalResult, EvalSpec};
use crate::network::{ModelConfig, NetworkParams, NetworkShape};
use crate::sweep::{self, PointOutcome, SweepResult};
use crate::training::{self, EpochMetrics};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::InvalidInterval { .. }
        | Error::Manifest { .. }
        | Error::DanglingKey(_)
        | Error::Archive(_)
        | Error::Io { .. }
        | Error::DimMismatch(_)
        | Error::MissingFeature(_)
        | Error::MissingQuery(_) => EXIT_DATA,
        Error::StaleForward(_) | Error::EmptyBatch | Error::Divergence { .. } | Error::SweepFailed => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mml", about = "Temporal moment localization: train, evaluate, sweep")]
pub struct Cli {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `key=value` override of a config entry, e.g. `train.epochs=5`.
    #[arg(long = "set", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true, default_value_t = 1)]
    pub parallelism: usize,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset described by `[synth]`.
    Synth,
    /// Check manifests and archives.
    Validate,
    Train,
    /// Evaluate a checkpoint and print an R@n table.
    Eval,
    Sweep,
    /// Score an external prediction file.
    Grade,
    /// Emit plot data from a sweep result table.
    Plot,
}

/// A loaded config with its hash.
pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
    pub parallelism: usize,
}

impl Run {
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>, parallelism: usize) -> Result<Run> {
        let mut all = overrides.to_vec();
        if let Some(s) = seed {
            all.push(format!("seed={s}"));
        }
        let (cfg, hash) = config::load(path, &all)?;
        if parallelism == 0 {
            return Err(Error::Config("--parallelism must be at least 1".into()));
        }
        Ok(Run { cfg, hash, parallelism })
    }

    pub fn dir(&self) -> PathBuf {
        self.cfg.paths.output_dir.join(&self.hash)
    }

    fn ensure_dir(&self) -> Result<PathBuf> {
        let dir = self.dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    /// Appends a timestamped line to `run.log`.
    fn log(&self, line: &str) {
        let Ok(dir) = self.ensure_dir() else { return };
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let path = dir.join("run.log");
        let res = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| writeln!(f, "{now} {line}"));
        if let Err(e) = res {
            warn!(path = %path.display(), error = %e, "cannot write run log");
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.parallelism)
            .build()
            .map_err(|e| Error::invalid(format!("worker pool: {e}")))
    }

    fn manifest_path(&self) -> Result<&Path> {
        self.cfg
            .paths
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Config("paths.manifest is required".into()))
    }

    /// Test manifest if configured, else the main manifest.
    fn eval_manifest_path(&self) -> Result<&Path> {
        match &self.cfg.paths.test_manifest {
            Some(p) => Ok(p),
            None => self.manifest_path(),
        }
    }

    fn store(&self) -> Result<FeatureStore> {
        if self.cfg.paths.archives.is_empty() {
            return Err(Error::Config("paths.archives must list at least one archive".into()));
        }
        FeatureStore::open(&self.cfg.paths.archives)
    }

    fn dataset(&self, manifest: &Path, store: &FeatureStore) -> Result<Dataset> {
        let m = parse_manifest(manifest)?;
        m.check_refs(store)?;
        Dataset::assemble(&m, store, &self.cfg.dims, &self.cfg.model, &self.cfg.proposals)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// `synth`: writes the archive, the manifest and (with a test split) the test manifest.
pub fn cmd_synth(run: &Run) -> Result<String> {
    let paths = &run.cfg.paths;
    let [archive] = paths.archives.as_slice() else {
        return Err(Error::Config("synth needs exactly one entry in paths.archives".into()));
    };
    let synth = crate::synth::SynthConfig {
        dims: run.cfg.dims.clone(),
        ..run.cfg.synth.clone()
    };
    let data = crate::synth::generate(&synth)?;
    let manifest = run.manifest_path()?;
    for p in [Some(archive.as_path()), Some(manifest), paths.test_manifest.as_deref()]
        .into_iter()
        .flatten()
    {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_archive(&data.records, archive)?;
    match &paths.test_manifest {
        Some(test) => {
            write_manifest(&data.train, manifest)?;
            write_manifest(&data.test, test)?;
        }
        None => write_manifest(&data.full_manifest(), manifest)?,
    }
    Ok(format!(
        "synth: {} train queries, {} test queries, {} videos, {} archive records\n",
        data.train.queries.len(),
        data.test.queries.len(),
        data.train.videos.len() + data.test.videos.len(),
        data.records.len()
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub videos: usize,
    pub queries: usize,
    pub records: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for v in &self.violations {
            let _ = writeln!(out, "error: {}: {}", v.location, v.message);
        }
        let _ = writeln!(
            out,
            "{}: {} videos, {} queries, {} records, {} violations",
            if self.is_clean() { "clean" } else { "invalid" },
            self.videos,
            self.queries,
            self.records,
            self.violations.len()
        );
        out
    }
}

fn check_shape(
    report: &mut ValidationReport,
    location: &str,
    kind: EmbeddingKind,
    rec: &TensorRecord,
    dims: &crate::data_model::DimTable,
) {
    let dim = dims.dim(kind);
    let key = &rec.key;
    let got = match (kind, rec.shape.as_slice()) {
        (k, [d]) if k.is_sentence() => *d,
        (k, [2, d]) if k.is_vo() => *d,
        (EmbeddingKind::Actionness, [rows] | [rows, 1]) if *rows > 0 => 1,
        (k, [rows, d]) if k.is_visual() && *rows > 0 => *d,
        (_, shape) => {
            report.push(location, format!("{kind} record `{key}` has unexpected shape {shape:?}"));
            return;
        }
    };
    if got != dim {
        report.push(location, format!("dim mismatch: {kind} record `{key}` has dim {got}, expected {dim}"));
    }
}

/// `validate`: archive integrity, dim conformance and dangling keys. Every
/// violation is collected rather than stopping at the first.
pub fn cmd_validate(run: &Run) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    let mut records: HashMap<String, (PathBuf, TensorRecord)> = HashMap::new();
    for path in &run.cfg.paths.archives {
        match read_archive(path) {
            Ok(recs) => {
                for r in recs {
                    report.records += 1;
                    if let Some((first, _)) = records.get(&r.key) {
                        report.push(
                            path.display().to_string(),
                            format!("key `{}` already defined in {}", r.key, first.display()),
                        );
                        continue;
                    }
                    records.insert(r.key.clone(), (path.clone(), r));
                }
            }
            Err(e) => report.push(path.display().to_string(), e.to_string()),
        }
    }
    let mut manifests = vec![run.manifest_path()?.to_path_buf()];
    manifests.extend(run.cfg.paths.test_manifest.clone());
    for mpath in &manifests {
        let where_ = mpath.display().to_string();
        let manifest = match parse_manifest(mpath) {
            Ok(m) => m,
            Err(e) => {
                report.push(&where_, e.to_string());
                continue;
            }
        };
        report.videos += manifest.videos.len();
        report.queries += manifest.queries.len();
        let lookup = |report: &mut ValidationReport, location: String, kind: EmbeddingKind, key: &str| {
            match records.get(key) {
                None => report.push(location, format!("dangling key `{key}` ({kind})")),
                Some((_, rec)) => check_shape(report, &location, kind, rec, &run.cfg.dims),
            }
        };
        for v in &manifest.videos {
            for (kind, key) in &v.clip_feature_refs {
                lookup(&mut report, format!("{where_}: video {}", v.video_id), *kind, key);
            }
        }
        for q in &manifest.queries {
            for (kind, key) in &q.embedding_refs {
                lookup(&mut report, format!("{where_}: query {}", q.query_id), *kind, key);
            }
        }
    }
    Ok(report)
}

/// Metadata stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct CheckpointSidecar {
    pub config_hash: String,
    pub best_epoch: usize,
    pub model: ModelConfig,
    pub dims: crate::data_model::DimTable,
}

pub fn save_checkpoint(params: &NetworkParams, sidecar: &CheckpointSidecar, path: &Path) -> Result<()> {
    write_archive(&params.to_records(), path)?;
    write_file(&path.with_extension("json"), pretty_json(sidecar))
}

pub fn load_checkpoint(path: &Path, model: &ModelConfig, dims: &crate::data_model::DimTable) -> Result<NetworkParams> {
    NetworkParams::from_records(NetworkShape::new(model, dims), &read_archive(path)?)
}

pub struct TrainReport {
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

impl TrainReport {
    pub fn render(&self) -> String {
        let best = self.metrics.iter().find(|m| m.epoch == self.best_epoch);
        let (r1, r5) = best.map_or((0.0, 0.0), |m| (m.val_r1, m.val_r5));
        format!(
            "best epoch {} (val R@1 {r1:.4}, R@5 {r5:.4})\ncheckpoint: {}\n",
            self.best_epoch,
            self.checkpoint.display()
        )
    }
}

/// `train`: writes `checkpoint.mmlf`, `checkpoint.json` and `metrics.jsonl`.
pub fn cmd_train(run: &Run) -> Result<TrainReport> {
    let started = Instant::now();
    let store = run.store()?;
    let data = run.dataset(run.manifest_path()?, &store)?;
    let cfg = &run.cfg;
    let outcome = run
        .pool()?
        .install(|| training::train(&data, &cfg.dims, &cfg.model, &cfg.train))?;
    let dir = run.ensure_dir()?;
    let checkpoint = dir.join("checkpoint.mmlf");
    save_checkpoint(
        &outcome.params,
        &CheckpointSidecar {
            config_hash: run.hash.clone(),
            best_epoch: outcome.best_epoch,
            model: cfg.model.clone(),
            dims: cfg.dims.clone(),
        },
        &checkpoint,
    )?;
    let metrics: String = outcome
        .metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect();
    write_file(&dir.join("metrics.jsonl"), metrics)?;
    write_file(&dir.join("config.toml"), config::to_toml(cfg))?;
    run.log(&format!("train finished in {:.3}s", started.elapsed().as_secs_f64()));
    info!(best_epoch = outcome.best_epoch, "training done");
    Ok(TrainReport {
        best_epoch: outcome.best_epoch,
        metrics: outcome.metrics,
        checkpoint,
    })
}

fn kind_label(kind: EmbeddingKind) -> &'static str {
    match kind {
        EmbeddingKind::SentenceBert | EmbeddingKind::VoBert => "BERT",
        EmbeddingKind::SentenceSkipthought => "Skip-thought",
        EmbeddingKind::SentenceRoberta => "RoBERTa",
        EmbeddingKind::VoGlove => "GloVe",
        other => other.name(),
    }
}

/// One ablation-table row: model label, sentence and VO embeddings, object
/// and captioning toggles, then one column per R@n.
pub fn results_table(label: &str, model: Option<&ModelConfig>, result: &EvalResult) -> String {
    let mut header = vec!["Model".to_string()];
    let mut row = vec![label.to_string()];
    if let Some(m) = model {
        header.extend(["Sentence", "VO", "Objects", "Captioning"].map(String::from));
        let flag = |b: bool| if b { "yes" } else { "no" }.to_string();
        row.extend([
            kind_label(m.sentence_kind).to_string(),
            kind_label(m.vo_kind).to_string(),
            flag(m.use_object_features),
            flag(m.use_captioning_features),
        ]);
    }
    for (n, r) in &result.recall {
        header.push(format!("R@{n}"));
        row.push(format!("{r:.3}"));
    }
    let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
            + "\n"
    };
    line(&header) + &line(&row)
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    config_hash: &'a str,
    n_queries: usize,
    iou_threshold: f64,
    recall: BTreeMap<String, f64>,
}

fn write_eval_report(run: &Run, dir: &Path, file: &str, spec: &EvalSpec, result: &EvalResult) -> Result<()> {
    let report = EvalReport {
        config_hash: &run.hash,
        n_queries: result.n_queries,
        iou_threshold: spec.iou_threshold,
        recall: result.recall.iter().map(|(n, r)| (format!("R@{n}"), *r)).collect(),
    };
    write_file(&dir.join(file), pretty_json(&report))
}

/// `eval`: scores the test (or main) manifest with a checkpoint, writes
/// `predictions.jsonl` and `eval.json`, and returns the result with its table.
pub fn cmd_eval(run: &Run) -> Result<(EvalResult, String)> {
    let cfg = &run.cfg;
    let checkpoint = cfg.paths.checkpoint.clone().unwrap_or_else(|| run.dir().join("checkpoint.mmlf"));
    let params = load_checkpoint(&checkpoint, &cfg.model, &cfg.dims)?;
    let store = run.store()?;
    let data = run.dataset(run.eval_manifest_path()?, &store)?;
    let preds = run
        .pool()?
        .install(|| training::predict_all(&params, &cfg.model, &data, cfg.eval.nms_threshold))?;
    let lines: Vec<_> = preds.iter().flat_map(|(q, recs)| prediction_lines(q, recs)).collect();
    let ranked = preds
        .into_iter()
        .map(|(q, recs)| (q, recs.into_iter().map(|r| r.refined).collect()))
        .collect();
    let gts = data.queries.iter().map(|q| (q.query_id.clone(), q.gt)).collect();
    let result = recall_at_n(&ranked, &gts, &cfg.eval)?;
    let dir = run.ensure_dir()?;
    write_predictions(&lines, dir.join("predictions.jsonl"))?;
    write_eval_report(run, &dir, "eval.json", &cfg.eval, &result)?;
    let label = cfg.name.clone().unwrap_or_else(|| "model".into());
    let table = results_table(&label, Some(&cfg.model), &result);
    Ok((result, table))
}

/// `grade`: recall of an external prediction file against the test (or main) manifest.
pub fn cmd_grade(run: &Run) -> Result<(EvalResult, String)> {
    let cfg = &run.cfg;
    let path = cfg
        .paths
        .predictions
        .as_deref()
        .ok_or_else(|| Error::Config("paths.predictions is required for grade".into()))?;
    let predictions = read_predictions(path)?;
    let manifest: Manifest = parse_manifest(run.eval_manifest_path()?)?;
    let gts = manifest.queries.iter().map(|q| (q.query_id.clone(), q.gt)).collect();
    let result = recall_at_n(&predictions, &gts, &cfg.eval)?;
    let dir = run.ensure_dir()?;
    write_eval_report(run, &dir, "grade.json", &cfg.eval, &result)?;
    let label = cfg.name.clone().unwrap_or_else(|| "predictions".into());
    Ok((result.clone(), results_table(&label, None, &result)))
}

/// `sweep`: retrains from scratch at every grid point, writes `sweep.jsonl`,
/// per-point checkpoints under `sweep/` and the curve files under `curves/`.
pub fn cmd_sweep(run: &Run) -> Result<SweepResult> {
    let started = Instant::now();
    let cfg = &run.cfg;
    let store = run.store()?;
    let data = run.dataset(run.manifest_path()?, &store)?;
    let (mut result, params) = sweep::run_sweep_with(&cfg.sweep, cfg.train.seed, run.parallelism, |point, seed| {
        let model = ModelConfig {
            fusion: crate::features::HighLevelFusionConfig {
                s_obj: point.s_obj,
                d_obj: point.d_obj,
                d_vac: point.d_vac,
            },
            seed,
            ..cfg.model.clone()
        };
        let train_cfg = crate::training::TrainConfig { seed, ..cfg.train.clone() };
        let out = training::train(&data, &cfg.dims, &model, &train_cfg)?;
        let best = out.metrics.iter().find(|m| m.epoch == out.best_epoch);
        Ok(PointOutcome {
            best_epoch: out.best_epoch,
            r1: best.map_or(0.0, |m| m.val_r1),
            r5: best.map_or(0.0, |m| m.val_r5),
            params: Some(out.params),
        })
    })?;
    let dir = run.ensure_dir()?;
    let ckpt_dir = dir.join("sweep");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    for (i, (entry, p)) in result.entries.iter_mut().zip(&params).enumerate() {
        if let Some(p) = p {
            let rel = format!("sweep/point_{i:03}.mmlf");
            write_archive(&p.to_records(), dir.join(&rel))?;
            entry.checkpoint_path = Some(rel);
        }
    }
    sweep::write_result_table(&result.entries, dir.join("sweep.jsonl"))?;
    sweep::emit_curves(&result, dir.join("curves"))?;
    run.log(&format!(
        "sweep of {} points finished in {:.3}s",
        result.entries.len(),
        started.elapsed().as_secs_f64()
    ));
    Ok(result)
}

fn render_sweep(result: &SweepResult) -> String {
    let ok = result.entries.iter().filter(|e| e.is_ok()).count();
    let w = result.winner;
    format!(
        "sweep: {} configs ({ok} ok), winner s_obj={} d_obj={} d_vac={}\n",
        result.entries.len(),
        w.s_obj,
        w.d_obj,
        w.d_vac
    )
}

/// `plot`: curve files from `paths.sweep_table` (or this run's `sweep.jsonl`).
pub fn cmd_plot(run: &Run) -> Result<Vec<PathBuf>> {
    let table = run.cfg.paths.sweep_table.clone().unwrap_or_else(|| run.dir().join("sweep.jsonl"));
    let entries = sweep::read_result_table(&table)?;
    let winner = sweep::select_winner(&entries).ok_or(Error::SweepFailed)?;
    let dir = run.ensure_dir()?;
    sweep::emit_curves(&SweepResult { entries, winner }, dir.join("curves"))
}

fn dispatch(run: &Run, command: Command) -> Result<(i32, String)> {
    Ok(match command {
        Command::Synth => (EXIT_OK, cmd_synth(run)?),
        Command::Validate => {
            let report = cmd_validate(run)?;
            let code = if report.is_clean() { EXIT_OK } else { EXIT_DATA };
            (code, report.render())
        }
        Command::Train => (EXIT_OK, cmd_train(run)?.render()),
        Command::Eval => (EXIT_OK, cmd_eval(run)?.1),
        Command::Grade => (EXIT_OK, cmd_grade(run)?.1),
        Command::Sweep => (EXIT_OK, render_sweep(&cmd_sweep(run)?)),
        Command::Plot => {
            let files = cmd_plot(run)?;
            let list: String = files.iter().map(|f| format!("{}\n", f.display())).collect();
            (EXIT_OK, list)
        }
    })
}

/// Parses `args`, runs the command, writes the report to `stdout`, and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let Some(config) = cli.config.as_deref() else {
        eprintln!("error: --config <path> is required");
        return EXIT_CONFIG;
    };
    let result = Run::load(config, &cli.overrides, cli.seed, cli.parallelism).and_then(|run| dispatch(&run, cli.command));
    match result {
        Ok((code, report)) => {
            if let Err(e) = stdout.write_all(report.as_bytes()) {
                eprintln!("error: cannot write report: {e}");
                return EXIT_RUNTIME;
            }
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
