//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/default"
//!
//! [model]        # mini-ViT shape
//! [distill]      # alpha, beta, gamma, epochs, warmup_epochs, batch_size, base_lr, ...
//! [teacher]      # pretrain, epochs, base_lr, checkpoint
//! [grid]         # student_scale, m
//! [selection]    # lambda, chain_length, final_init
//! [data]         # source, train_samples, test_samples, val_fraction, synth
//! ```
//!
//! Every key has a default, so an empty file is a valid configuration.

use std::fs;
use std::path::{Path, PathBuf};

use amd_core::{DistillConfig, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::data::SynthParams;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    Synth,
    /// A CIFAR-10 batch file or a directory with the standard batch files.
    Cifar10(PathBuf),
}

impl DataSource {
    /// Parses `synth` or `cifar10:<path>`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "synth" {
            Ok(DataSource::Synth)
        } else if let Some(p) = s.strip_prefix("cifar10:") {
            if p.is_empty() {
                return Err(HarnessError::Config("cifar10 source needs a path".into()));
            }
            Ok(DataSource::Cifar10(PathBuf::from(p)))
        } else {
            Err(HarnessError::Config(format!(
                "unknown data source {s:?}; expected synth or cifar10:<path>"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `synth` or `cifar10:<path>`.
    pub source: String,
    /// Synthetic training-pool size (before the validation split).
    pub train_samples: usize,
    /// Synthetic test-set size; CIFAR-10 uses its own test batch when present.
    pub test_samples: usize,
    /// Fraction of the training pool held out for validation.
    pub val_fraction: f64,
    pub synth: SynthParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synth".into(),
            train_samples: 2000,
            test_samples: 1000,
            val_fraction: 0.1,
            synth: SynthParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Train the teacher with plain cross-entropy when no checkpoint is given.
    pub pretrain: bool,
    pub epochs: usize,
    pub base_lr: f64,
    pub checkpoint: Option<PathBuf>,
    /// Batches used for importance estimation.
    pub importance_batches: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            pretrain: true,
            epochs: 30,
            base_lr: 0.003,
            checkpoint: None,
            importance_batches: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub student_scale: f64,
    pub m: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            student_scale: 0.1,
            m: 9,
        }
    }
}

/// Weights the final student starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalInit {
    /// The selected assistant's store, restricted by the student mask.
    Assistant,
    /// The jointly optimized student candidate.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub lambda: Option<f64>,
    /// Number of assistants; 0 distills the student straight from the teacher.
    pub chain_length: usize,
    pub final_init: FinalInit,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            lambda: None,
            chain_length: 1,
            final_init: FinalInit::Assistant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub teacher: TeacherConfig,
    pub grid: GridConfig,
    pub selection: SelectionConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::desk(),
            distill: DistillConfig::default(),
            teacher: TeacherConfig::default(),
            grid: GridConfig::default(),
            selection: SelectionConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn source(&self) -> Result<DataSource> {
        DataSource::parse(&self.data.source)
    }

    /// Distillation settings with the run seed applied.
    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            seed: self.seed,
            ..self.distill
        }
    }

    /// Teacher pre-training settings: same optimizer and schedule as
    /// distillation, cross-entropy only.
    pub fn teacher_distill(&self) -> DistillConfig {
        DistillConfig {
            epochs: self.teacher.epochs,
            base_lr: self.teacher.base_lr,
            warmup_epochs: self.distill.warmup_epochs.min(self.teacher.epochs.saturating_sub(1)),
            ..self.distill()
        }
        .ce_only()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: amd_core::Error| HarnessError::Config(e.to_string());
        self.model.validate().map_err(cfg)?;
        self.distill.validate().map_err(cfg)?;
        self.teacher_distill().validate().map_err(cfg)?;
        self.source()?;
        if !(self.grid.student_scale > 0.0 && self.grid.student_scale < 1.0) || self.grid.m == 0 {
            return Err(HarnessError::Config(format!(
                "grid needs 0 < student_scale < 1 and m >= 1, got {} and {}",
                self.grid.student_scale, self.grid.m
            )));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(HarnessError::Config("val_fraction must be in (0, 1)".into()));
        }
        if self.teacher.importance_batches == 0 {
            return Err(HarnessError::Config("importance_batches must be at least 1".into()));
        }
        let (size, channels, classes, what) = match self.source()? {
            DataSource::Synth => {
                let s = &self.data.synth;
                (s.image_size, s.channels, s.num_classes, "synthetic")
            }
            DataSource::Cifar10(_) => (32, 3, 10, "CIFAR-10"),
        };
        let m = &self.model;
        if (size, channels, classes) != (m.image_size, m.channels, m.num_classes) {
            return Err(HarnessError::Config(format!(
                "{what} data is {size}x{size}x{channels} with {classes} classes but the model expects {}x{}x{} with {}",
                m.image_size, m.image_size, m.channels, m.num_classes
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.grid.m, 9);
        assert_eq!(c.distill.alpha, 0.2);
    }

    #[test]
    fn roundtrip_and_overrides() {
        let c = RunConfig::from_toml("seed = 7\n[grid]\nm = 5\n[distill]\nepochs = 10\n").unwrap();
        assert_eq!((c.seed, c.grid.m, c.distill.epochs), (7, 5, 10));
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.distill().seed, 7);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[distill]\ngamma = 0.0").is_err());
        assert!(RunConfig::from_toml("[data]\nsource = \"mnist\"").is_err());
        assert!(RunConfig::from_toml("[grid]\nstudent_scale = 1.5").is_err());
        assert!(RunConfig::from_toml("[data]\nsource = \"cifar10:/d\"").is_err());
    }

    #[test]
    fn data_source_parsing() {
        assert_eq!(DataSource::parse("synth").unwrap(), DataSource::Synth);
        assert_eq!(DataSource::parse("cifar10:/d").unwrap(), DataSource::Cifar10("/d".into()));
        assert!(DataSource::parse("cifar10:").is_err());
    }
}
