use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CsvSchema, MethodId, TabGenParams, TsGenParams};
use crate::error::{Error, Result};
use crate::pfn::PfnConfig;
use crate::tabular::TabularConfig;
use crate::train::OptimConfig;
use crate::ts::ForecasterConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSection {
    Ts(ForecasterConfig),
    Tabular(TabularConfig),
    Pfn(PfnConfig),
}

impl ModelSection {
    pub fn family(&self) -> &'static str {
        match self {
            ModelSection::Ts(_) => "ts",
            ModelSection::Tabular(_) => "tabular",
            ModelSection::Pfn(_) => "pfn",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSection::Ts(c) => c.validate(),
            ModelSection::Tabular(c) => c.validate(),
            ModelSection::Pfn(c) => c.validate(),
        }
    }

    /// `(R_train, R_eval)` of this configuration.
    pub fn passes(&self) -> (usize, usize) {
        match self {
            ModelSection::Ts(c) => (c.recurrence.r_train, c.recurrence.r_eval),
            ModelSection::Tabular(c) => (c.recurrence.r_train, c.recurrence.r_eval),
            ModelSection::Pfn(c) => (c.r_train, c.eval_passes()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataSource {
    SyntheticTs {
        generator: TsGenParams,
    },
    SyntheticTabular {
        generator: TabGenParams,
        train_tasks: usize,
        val_tasks: usize,
        test_tasks: usize,
    },
    /// For `ts` models every numeric non-ignored column is a channel; for
    /// tabular models the schema target is predicted.
    Csv {
        path: String,
        schema: CsvSchema,
    },
}

/// Split and task-sampling knobs. Unset fractions take per-family defaults
/// (time series: 10% validation, tabular: 15%; test 20%).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub val_frac: Option<f64>,
    pub test_frac: Option<f64>,
    /// Step between consecutive training windows.
    pub stride: Option<usize>,
    /// Tabular CSV: context rows per task.
    pub context_rows: Option<usize>,
    /// Tabular CSV: query rows per task.
    pub query_rows: Option<usize>,
    /// Tabular CSV: size of the fixed pool of training tasks.
    pub train_tasks: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub name: String,
    pub source: DataSource,
    #[serde(default)]
    pub split: SplitSpec,
    /// Seed of generators and splits (model seeds come from the run).
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub r_train: Vec<usize>,
    pub r_eval: Vec<usize>,
    pub looped: Vec<(usize, usize)>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid { r_train: vec![0, 1, 2, 4], r_eval: vec![0, 1, 2, 4, 8], looped: vec![(1, 2), (1, 4), (4, 2), (4, 4)] }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.r_train.is_empty() || self.r_eval.is_empty() {
            return Err(Error::config("sweep.r_train", "grids must be non-empty"));
        }
        if self.looped.iter().any(|&(k, m)| k == 0 || m == 0) {
            return Err(Error::config("sweep.looped", "block and loop counts must be positive"));
        }
        Ok(())
    }

    /// Method ids of every trained cell, in sweep order.
    pub fn trained_methods(&self) -> Vec<MethodId> {
        let mut out = vec![MethodId::Baseline, MethodId::Deeper];
        out.extend(self.looped.iter().map(|&(blocks, loops)| MethodId::Looped { blocks, loops }));
        out.extend(self.r_train.iter().filter(|&&r| r > 0).map(|&r_train| MethodId::Cot { r_train, r_eval: r_train }));
        out
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub optim: OptimConfig,
    pub data: DataSpec,
    #[serde(default)]
    pub sweep: SweepGrid,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Not part of the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.sweep.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.data.name.is_empty() {
            return Err(Error::config("data.name", "must be non-empty"));
        }
        match (&self.model, &self.data.source) {
            (ModelSection::Ts(_), DataSource::SyntheticTabular { .. }) => {
                Err(Error::config("data.source", "time-series model needs a series source"))
            }
            (ModelSection::Tabular(_) | ModelSection::Pfn(_), DataSource::SyntheticTs { .. }) => {
                Err(Error::config("data.source", "tabular model needs a table source"))
            }
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical JSON form (sorted keys, no `out_dir`).
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
