use std::path::Path;

use anyhow::{bail, Context, Result};
use dagmix::datagen::{CircleConfig, CurveConfig};
use dagmix::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// One experiment file: a `[data]` table for `generate` and a `[train]`
/// table for `train`. Either may be omitted when that command is not used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: Option<DataConfig>,
    pub train: Option<TrainConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub circles: Option<CircleConfig>,
    pub curves: Option<CurveConfig>,
    /// Pair each curve with its texture image as a second modality.
    pub curve_images: bool,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.circles, &self.curves) {
            (Some(c), None) => c.validate()?,
            (None, Some(c)) => c.validate()?,
            _ => bail!("[data] needs exactly one of [data.circles] or [data.curves]"),
        }
        Ok(())
    }
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
