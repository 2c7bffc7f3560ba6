//! Run configuration: a TOML file merged with command-line overrides, then
//! frozen into the output directory so a run can be reproduced from its
//! artifacts alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rsamseg_core::model::ModelConfig;
use rsamseg_core::train::TrainConfig;

use crate::error::{CliError, Result};

/// Environment variable consulted for the default dataset root.
pub const DATA_ROOT_ENV: &str = "RSAMSEG_DATA_ROOT";

/// Name of the frozen config snapshot written into every output directory.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Base directory that relative manifest paths resolve against.
    pub root: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Read a TOML config, or start from defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    CliError::data(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text).map_err(|e| {
                    CliError::usage(format!("config {} is malformed: {e}", p.display()))
                })
            }
        }
    }

    /// Apply the common command-line overrides. A seed override re-seeds
    /// both model construction and batch shuffling.
    pub fn apply_common(&mut self, seed: Option<u64>, deterministic: bool) {
        if let Some(seed) = seed {
            self.model.seed = seed;
            self.train.seed = seed;
        }
        if deterministic {
            self.train.deterministic = true;
        }
    }

    /// Directory that relative data paths resolve against: explicit flag,
    /// then config, then the environment, then the working directory.
    pub fn resolve_root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.data.root.clone())
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    /// Write the fully resolved config into `out` for reproducibility.
    pub fn freeze(&self, out: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::usage(format!("config cannot be serialized: {e}")))?;
        fs::write(out.join(RESOLVED_CONFIG_FILE), text)?;
        Ok(())
    }
}

/// Resolve `path` against `root` unless it is already absolute.
pub fn resolve_path(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

/// Create the output directory, refusing to reuse a non-empty one unless
/// `overwrite` is set.
pub fn claim_out_dir(out: &Path, overwrite: bool) -> Result<()> {
    if out.exists() {
        let occupied = fs::read_dir(out)
            .map_err(|e| CliError::data(format!("cannot inspect {}: {e}", out.display())))?
            .next()
            .is_some();
        if occupied && !overwrite {
            return Err(CliError::usage(format!(
                "output directory {} is not empty; pass --overwrite to reuse it",
                out.display()
            )));
        }
    } else {
        fs::create_dir_all(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_fills_remaining_fields_from_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "[model]\nseed = 9\n[train]\nepochs = 3\n[data]\ntrain_manifest = \"train.jsonl\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.model.seed, 9);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.data.train_manifest.as_deref(), Some(Path::new("train.jsonl")));
    }

    #[test]
    fn malformed_toml_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[model\n").unwrap();
        let err = RunConfig::load(Some(&path)).unwrap_err();
        assert_eq!(err.code(), 2);
    }

    #[test]
    fn seed_override_reaches_model_and_train() {
        let mut cfg = RunConfig::default();
        cfg.apply_common(Some(77), true);
        assert_eq!(cfg.model.seed, 77);
        assert_eq!(cfg.train.seed, 77);
        assert!(cfg.train.deterministic);
    }

    #[test]
    fn root_resolution_prefers_flag_then_config_then_env() {
        let mut cfg = RunConfig::default();
        assert_eq!(
            cfg.resolve_root(Some(Path::new("/flag"))),
            PathBuf::from("/flag")
        );
        cfg.data.root = Some(PathBuf::from("/config"));
        assert_eq!(cfg.resolve_root(None), PathBuf::from("/config"));
    }

    #[test]
    fn out_dir_guard_refuses_occupied_without_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        claim_out_dir(&out, false).unwrap();
        fs::write(out.join("file"), "x").unwrap();
        let err = claim_out_dir(&out, false).unwrap_err();
        assert_eq!(err.code(), 2);
        claim_out_dir(&out, true).unwrap();
    }

    #[test]
    fn frozen_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 5;
        cfg.freeze(dir.path()).unwrap();
        let reloaded =
            RunConfig::load(Some(&dir.path().join(RESOLVED_CONFIG_FILE))).unwrap();
        assert_eq!(reloaded, cfg);
    }
}
