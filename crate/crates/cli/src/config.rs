//! Experiment configuration: one TOML file describing the data source,
//! the training knobs, the seed list, and optional sweep grids. Every
//! field defaults, so an empty file is a valid experiment.

use std::fs;
use std::path::{Path, PathBuf};

use cade_core::continual_trainer::TrainConfig;
use cade_core::datagen::{
    load_feature_dataset, make_synthetic_stream, DomainDataset, SyntheticStreamConfig,
};
use serde::{Deserialize, Serialize};

use crate::errors::{io_at, AppError, AppResult};

/// Whole experiment file. `[train]` maps onto the core training config
/// verbatim; `seeds` and `out` live at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Run seeds; each gets an independent worker and output directory.
    pub seeds: Vec<u64>,
    /// Default output directory, overridable with --out.
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub train: TrainConfig,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![7, 8, 9],
            out: None,
            data: DataSection::default(),
            train: TrainConfig::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Exactly one data source after defaulting: an on-disk manifest or a
/// synthetic stream description. Naming both is an error; naming
/// neither means the default synthetic stream.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Manifest of a dataset directory written by gen-data.
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticStreamConfig>,
}

/// A sweep grid per axis. The replay grid mirrors the ratio ladder
/// {1/3 .. 6/3}; the domain grid walks stream lengths {2, 4, 6, 8, 10}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Default axis when --axis is not given: "replay_ratio" or "domains".
    pub axis: Option<String>,
    pub replay_ratios: Vec<f64>,
    pub domain_counts: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axis: None,
            replay_ratios: vec![1.0 / 3.0, 2.0 / 3.0, 1.0, 4.0 / 3.0, 5.0 / 3.0, 2.0],
            domain_counts: vec![2, 4, 6, 8, 10],
        }
    }
}

/// The resolved data source, with manifest paths anchored to the
/// directory the config file lives in.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticStreamConfig),
    Manifest(PathBuf),
}

impl ExperimentConfig {
    /// Parses a file, or yields the all-defaults experiment when no
    /// path is given.
    pub fn load(path: Option<&Path>) -> AppResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| io_at(path, e))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| AppError::Usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> AppResult<()> {
        if self.seeds.is_empty() {
            return Err(AppError::usage("seeds must not be empty"));
        }
        if self.data.manifest.is_some() && self.data.synthetic.is_some() {
            return Err(AppError::usage(
                "config names both data.manifest and data.synthetic; pick one data source",
            ));
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
        }
        self.train.validate()?;
        if let Some(axis) = &self.sweep.axis {
            parse_axis(axis)?;
        }
        Ok(())
    }

    /// Resolves the single data source. `base` is the config file's
    /// directory; relative manifest paths are taken from there.
    pub fn data_source(&self, base: &Path) -> DataSource {
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(m), _) => {
                let path = if m.is_absolute() {
                    m.clone()
                } else {
                    base.join(m)
                };
                DataSource::Manifest(path)
            }
            (None, Some(s)) => DataSource::Synthetic(s.clone()),
            (None, None) => DataSource::Synthetic(SyntheticStreamConfig::default()),
        }
    }

    /// Serialized echo written into run directories, so later commands
    /// (eval, plot-data, resume) can rebuild the exact experiment.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Sweep axis selector shared by the flag and the config key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    ReplayRatio,
    Domains,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::ReplayRatio => "replay_ratio",
            SweepAxis::Domains => "domains",
        }
    }
}

pub fn parse_axis(s: &str) -> AppResult<SweepAxis> {
    match s {
        "replay_ratio" => Ok(SweepAxis::ReplayRatio),
        "domains" => Ok(SweepAxis::Domains),
        other => Err(AppError::Usage(format!(
            "unknown sweep axis `{other}` (expected replay_ratio or domains)"
        ))),
    }
}

/// Materializes the stream behind a data source.
pub fn load_stream(source: &DataSource) -> AppResult<Vec<DomainDataset>> {
    match source {
        DataSource::Synthetic(cfg) => Ok(make_synthetic_stream(cfg)?),
        DataSource::Manifest(path) => Ok(load_feature_dataset(path)?),
    }
}
