//! Run configuration, read from and written back to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{io_err, Error, Result};
use crate::nets::ArchSpec;
use crate::trainer::{Preset, Schedule, Variant};

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv(CsvPaths),
}

/// Files written by `generate-data` or supplied by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvPaths {
    pub source: PathBuf,
    pub target: PathBuf,
    /// Target rows with their labels, used only by the evaluation oracle.
    pub target_labels: PathBuf,
    pub meta: PathBuf,
}

/// A named preset or an explicit adversary plus switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariantSpec {
    Preset(Preset),
    Custom(Variant),
}

impl VariantSpec {
    pub fn resolve(&self) -> Variant {
        match self {
            VariantSpec::Preset(p) => p.variant(),
            VariantSpec::Custom(v) => *v,
        }
    }

    pub fn label(&self) -> String {
        match self {
            VariantSpec::Preset(p) => p.name().to_string(),
            VariantSpec::Custom(_) => "custom".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub variant: VariantSpec,
    pub data: DataSource,
    pub architecture: ArchSpec,
    pub schedule: Schedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SyntheticSpec::default();
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            variant: VariantSpec::Preset(Preset::SanPp),
            architecture: ArchSpec::toy(data.num_source_classes),
            data: DataSource::Synthetic(data),
            schedule: Schedule::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(io_err(path))
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.resolve().validate()?;
        self.schedule.validate()?;
        self.architecture.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.dim != self.architecture.input_dim {
                return Err(Error::Config(format!(
                    "data dim {} differs from architecture input_dim {}",
                    spec.dim, self.architecture.input_dim
                )));
            }
            if spec.num_source_classes != self.architecture.num_classes {
                return Err(Error::Config(format!(
                    "data has {} classes but architecture num_classes is {}",
                    spec.num_source_classes, self.architecture.num_classes
                )));
            }
        }
        Ok(())
    }
}
