//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{CoreError, Result};
use crate::federation::TrainConfig;
use crate::model::BackboneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionMode {
    Pathological { classes_per_client: usize },
    Dirichlet { beta: f64 },
}

fn one_worker() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    pub partition: PartitionMode,
    #[serde(default)]
    pub model: BackboneConfig,
    pub train: TrainConfig,
    /// Fraction of clients that participate in training; the rest are
    /// heldout. Everyone participates when absent.
    #[serde(default)]
    pub heldout_fraction: Option<f64>,
    #[serde(default = "one_worker")]
    pub workers: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            CoreError::config(field_path(&path, &inner), inner)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.num_classes == 0 {
            return Err(CoreError::config("data.num_classes", "must be at least 1"));
        }
        if self.data.image_size != self.model.image_size {
            return Err(CoreError::config(
                "data.image_size",
                format!("{} differs from model.image_size {}", self.data.image_size, self.model.image_size),
            ));
        }
        match self.partition {
            PartitionMode::Pathological { classes_per_client: k } => {
                if k == 0 || k > self.data.num_classes {
                    return Err(CoreError::config(
                        "partition.classes_per_client",
                        format!("must be in 1..={}", self.data.num_classes),
                    ));
                }
            }
            PartitionMode::Dirichlet { beta } => {
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(CoreError::config("partition.beta", "must be positive"));
                }
            }
        }
        if let Some(f) = self.heldout_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(CoreError::config("heldout_fraction", "must be in (0, 1)"));
            }
        }
        if self.workers == 0 {
            return Err(CoreError::config("workers", "must be at least 1"));
        }
        self.train.validate(self.model.layers)
    }
}

/// Dotted path of the offending field. For a missing field the path points
/// at the enclosing object and the name only appears in the message.
fn field_path(path: &str, msg: &str) -> String {
    let missing = msg
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match (path, missing) {
        (".", Some(name)) => name.to_string(),
        (p, Some(name)) => format!("{p}.{name}"),
        (p, None) => p.to_string(),
    }
}
