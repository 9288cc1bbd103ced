//! The declarative run config: one TOML file plus `--set key=value`
//! overrides, hashed to name the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::DimTable;
use crate::error::{Error, Result};
use crate::evaluation::EvalSpec;
use crate::network::ModelConfig;
use crate::proposals::ProposalConfig;
use crate::sweep::SweepGrid;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Manifest used for training (and for evaluation when no test manifest is set).
    pub manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub archives: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// Checkpoint to evaluate; defaults to the one in this config's output directory.
    pub checkpoint: Option<PathBuf>,
    /// Prediction file graded by `grade`.
    pub predictions: Option<PathBuf>,
    /// Sweep result table read by `plot`.
    pub sweep_table: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Row label in the evaluation table.
    pub name: Option<String>,
    /// When set, replaces the model, train and synth seeds.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub dims: DimTable,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub proposals: ProposalConfig,
    pub eval: EvalSpec,
    pub sweep: SweepGrid,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.proposals.validate()?;
        self.eval.validate()?;
        crate::sweep::enumerate_grid(&self.sweep)?;
        Ok(())
    }

    fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.model.seed = seed;
            self.train.seed = seed;
            self.synth.seed = seed;
        }
    }

    /// Hex digest of the canonical JSON form. Paths are hashed as written.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in paths
            .manifest
            .iter_mut()
            .chain(paths.test_manifest.iter_mut())
            .chain(paths.checkpoint.iter_mut())
            .chain(paths.predictions.iter_mut())
            .chain(paths.sweep_table.iter_mut())
            .chain(paths.archives.iter_mut())
        {
            fix(p);
        }
        fix(&mut paths.output_dir);
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_owned()),
    }
}

/// Applies one `a.b.c=value` override to a TOML document.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

/// Builds a config from TOML text and overrides. Relative paths are resolved
/// against `base` after hashing, so the hash does not depend on where the
/// config file lives.
pub fn load_from_str(text: &str, overrides: &[String], base: &Path) -> Result<(RunConfig, String)> {
    let mut doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.apply_seed();
    cfg.validate()?;
    let hash = cfg.hash();
    cfg.resolve_paths(base);
    Ok((cfg, hash))
}

pub fn load(path: &Path, overrides: &[String]) -> Result<(RunConfig, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_from_str(&text, overrides, base)
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config serializes to TOML")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_defaults() {
        let (cfg, _) = load_from_str("", &[], Path::new("/x")).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.sweep, SweepGrid::default());
        assert_eq!(cfg.paths.output_dir, PathBuf::from("/x"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(load_from_str("bogus = 1", &[], Path::new(".")).is_err());
        assert!(load_from_str("[train]\nepoch = 3", &[], Path::new(".")).is_err());
        let set = vec!["model.fusion.s_ob=0.1".to_string()];
        assert!(load_from_str("", &set, Path::new(".")).is_err());
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let text = "[train]\nepochs = 3\n";
        let (a, ha) = load_from_str(text, &[], Path::new(".")).unwrap();
        let set = vec![
            "train.epochs=5".to_string(),
            "model.fusion.s_obj=0.05".to_string(),
            "paths.manifest=data/m.jsonl".to_string(),
            "dims.sentence_bert=32".to_string(),
        ];
        let (b, hb) = load_from_str(text, &set, Path::new("/base")).unwrap();
        assert_eq!(a.train.epochs, 3);
        assert_eq!(b.train.epochs, 5);
        assert_eq!(b.model.fusion.s_obj, 0.05);
        assert_eq!(b.paths.manifest, Some(PathBuf::from("/base/data/m.jsonl")));
        assert_eq!(b.dims.dim(crate::data_model::EmbeddingKind::SentenceBert), 32);
        assert_ne!(ha, hb);
    }

    #[test]
    fn hash_ignores_config_location() {
        let (_, h1) = load_from_str("[paths]\nmanifest = \"m.jsonl\"", &[], Path::new("/a")).unwrap();
        let (_, h2) = load_from_str("[paths]\nmanifest = \"m.jsonl\"", &[], Path::new("/b")).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn global_seed_propagates() {
        let (cfg, _) = load_from_str("seed = 11", &[], Path::new(".")).unwrap();
        assert_eq!((cfg.model.seed, cfg.train.seed, cfg.synth.seed), (11, 11, 11));
    }

    #[test]
    fn invalid_nested_value_is_config_error() {
        let set = vec!["eval.iou_threshold=1.5".to_string()];
        assert!(matches!(load_from_str("", &set, Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let (cfg, _) = load_from_str("", &[], Path::new("")).unwrap();
        let (back, _) = load_from_str(&to_toml(&cfg), &[], Path::new("")).unwrap();
        assert_eq!(cfg, back);
    }
}
