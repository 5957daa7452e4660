//! TOML run configuration shared by the command-line tools.
//!
//! A document has up to four sections, `[model]`, `[train]`, `[corpus]` and
//! `[eval]`, plus an optional top-level `preset = "desk" | "paper"`. Keys
//! that are present override the preset; unknown keys are rejected.
//!
//! ```
//! use mvp3d::config::RunConfig;
//! use mvp3d::train::Mode;
//!
//! let cfg = RunConfig::from_toml("[train]\nseed = 7\n", Mode::Pretrain).unwrap();
//! assert_eq!(cfg.train.seed, 7);
//! assert_eq!(cfg.model.hidden, 64);
//! assert!(RunConfig::from_toml("[train]\nsede = 7\n", Mode::Pretrain).is_err());
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pointcloud::{CorpusSpec, PerturbationKind};
use crate::train::{Mode, TrainConfig};

/// File name of the configuration snapshot written into every run
/// directory.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Directory of `.ply` pretraining scenes. When unset, `n_scenes`
    /// scenes are generated in memory starting at `seed`.
    pub scenes: Option<PathBuf>,
    /// Episode manifest (or a directory holding one) for finetuning. When
    /// unset, `n_demos` demos are generated in memory starting at `seed`.
    pub episodes: Option<PathBuf>,
    pub n_scenes: usize,
    pub n_demos: usize,
    pub seed: u64,
    pub spec: CorpusSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            scenes: None,
            episodes: None,
            n_scenes: 64,
            n_demos: 32,
            seed: 0,
            spec: CorpusSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mask_ratio: f64,
    pub seed: u64,
    pub sweep_magnitude: f64,
    pub sweep_kinds: Vec<PerturbationKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            seed: 0,
            sweep_magnitude: 0.5,
            sweep_kinds: PerturbationKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn preset(preset: Preset, mode: Mode) -> Self {
        let paper = preset == Preset::Paper;
        Self {
            preset,
            model: if paper { ModelConfig::paper() } else { ModelConfig::desk() },
            train: TrainConfig::preset(paper, mode),
            corpus: CorpusConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Parses `text` over the preset it names (desk when absent) for
    /// `mode`, then validates the result.
    pub fn from_toml(text: &str, mode: Mode) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(config_err)?;
        let preset = match user.get("preset") {
            None => Preset::Desk,
            Some(v) => v.clone().try_into().map_err(config_err)?,
        };
        let mut table = toml::Table::try_from(Self::preset(preset, mode)).map_err(config_err)?;
        merge(&mut table, user);
        let cfg: Self = toml::Value::Table(table).try_into().map_err(config_err)?;
        if cfg.train.mode != mode {
            return Err(Error::Config(format!(
                "train.mode is {:?} but the command runs {:?}",
                cfg.train.mode, mode
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, mode: Mode) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, mode)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.spec.validate()?;
        if !(0.0..=1.0).contains(&self.eval.mask_ratio) {
            return Err(Error::Config("eval.mask_ratio outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.sweep_magnitude) {
            return Err(Error::Config("eval.sweep_magnitude outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Writes [`RESOLVED_CONFIG`] into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patches::MaskStrategy;
    use crate::train::OptimizerKind;

    #[test]
    fn empty_document_is_desk() {
        let cfg = RunConfig::from_toml("", Mode::Pretrain).unwrap();
        assert_eq!(cfg, RunConfig::preset(Preset::Desk, Mode::Pretrain));
        let cfg = RunConfig::from_toml("", Mode::Finetune).unwrap();
        assert_eq!(cfg.train, TrainConfig::desk_finetune());
    }

    #[test]
    fn paper_preset_switches_values() {
        let cfg = RunConfig::from_toml("preset = \"paper\"\n", Mode::Finetune).unwrap();
        assert_eq!(cfg.model.hidden, 1024);
        assert_eq!(cfg.model.enc_layers, 8);
        assert_eq!(cfg.model.patch, 10);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Lamb);
        assert_eq!(cfg.train.base_lr, 1e-4);
        assert_eq!(cfg.train.warmup_steps, 2000);
        assert_eq!(cfg.train.min_lr, 1e-6);
        assert_eq!(cfg.train.batch_size, 3);
        assert_eq!(cfg.train.epochs, 15);
    }

    #[test]
    fn keys_override_preset() {
        let text = "preset = \"paper\"\n[model]\nhidden = 64\nheads = 4\n[train]\nbase_lr = 0.5\n[corpus.spec]\nmax_objects = 2\n";
        let cfg = RunConfig::from_toml(text, Mode::Pretrain).unwrap();
        assert_eq!(cfg.model.hidden, 64);
        assert_eq!(cfg.model.enc_layers, 8);
        assert_eq!(cfg.train.base_lr, 0.5);
        assert_eq!(cfg.train.mask_ratio, 0.75);
        assert_eq!(cfg.corpus.spec.max_objects, 2);
        assert_eq!(cfg.corpus.spec.min_objects, 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "[model]\nhiden = 3\n",
            "[train]\nlr = 0.1\n",
            "[corpus.spec]\ndensty = 1.0\n",
            "[eval]\nx = 1\n",
            "[extra]\n",
            "foo = 1\n",
            "preset = \"laptop\"\n",
        ] {
            assert!(RunConfig::from_toml(text, Mode::Pretrain).is_err(), "{text}");
        }
    }

    #[test]
    fn mode_must_match_command() {
        let err = RunConfig::from_toml("[train]\nmode = \"finetune\"\n", Mode::Pretrain).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[model]\nheads = 5\n", Mode::Pretrain).is_err());
        assert!(RunConfig::from_toml("[eval]\nmask_ratio = 2.0\n", Mode::Pretrain).is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let text = "[model]\nstrategy = \"all_channels\"\n[corpus]\nscenes = \"data\"\n[eval]\nsweep_kinds = [\"point_noise\"]\n";
        let cfg = RunConfig::from_toml(text, Mode::Pretrain).unwrap();
        assert_eq!(cfg.model.strategy, MaskStrategy::AllChannels);
        let dir = tempfile::tempdir().unwrap();
        let path = cfg.write_resolved(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&path, Mode::Pretrain).unwrap(), cfg);
    }
}
