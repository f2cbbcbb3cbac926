//! Run configuration: a TOML document with `[suite]`, `[method]`,
//! `[teleport]`, `[optimizer]`, `[training]` and `[baseline]` tables.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::combiners::Combiner;
use crate::error::{Error, Result};
use crate::problems::{
    load_csv_dataset, make_quadratic_pair, make_ravine_toy, make_synthetic_multitask_with, CsvSchema, SyntheticSpec,
    TaskSuite,
};
use crate::teleport::TeleportConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for every random stream of the run.
    pub seed: u64,
    /// Output directory; the CLI may override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub suite: SuiteConfig,
    #[serde(default = "default_method")]
    pub method: Combiner,
    #[serde(default)]
    pub teleport: TeleportConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

fn default_method() -> Combiner {
    Combiner::Ls
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SuiteConfig {
    /// Synthetic regression tasks; the last `test_fraction` of samples is held out.
    Synthetic {
        tasks: usize,
        d_in: usize,
        samples: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Two quadratic bowls; `init` defaults to a seeded draw from `[-2, 2]²`.
    Quadratic {
        a: [f64; 2],
        b: [f64; 2],
        #[serde(default = "unit_scales")]
        scales: [f64; 2],
        #[serde(default)]
        init: Option<[f64; 2]>,
    },
    Ravine { init: [f64; 2] },
    Csv {
        path: PathBuf,
        d_in: usize,
        d_out: usize,
        #[serde(default)]
        task_column: bool,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

fn unit_scales() -> [f64; 2] {
    [1.0, 1.0]
}

impl SuiteConfig {
    /// Builds the suite. Relative CSV paths resolve against `base`.
    pub fn build(&self, seed: u64, base: Option<&Path>) -> Result<TaskSuite> {
        match self {
            SuiteConfig::Synthetic { tasks, d_in, samples, .. } => {
                make_synthetic_multitask_with(&SyntheticSpec::new(*tasks, *d_in, *samples, seed))
            }
            SuiteConfig::Quadratic { a, b, scales, .. } => make_quadratic_pair(*a, *b, (scales[0], scales[1])),
            SuiteConfig::Ravine { .. } => make_ravine_toy(),
            SuiteConfig::Csv {
                path,
                d_in,
                d_out,
                task_column,
                ..
            } => {
                let path = match base {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                load_csv_dataset(
                    path,
                    CsvSchema {
                        d_in: *d_in,
                        d_out: *d_out,
                        task_column: *task_column,
                    },
                )
            }
        }
    }

    pub fn test_fraction(&self) -> Option<f64> {
        match self {
            SuiteConfig::Synthetic { test_fraction, .. } | SuiteConfig::Csv { test_fraction, .. } => Some(*test_fraction),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: OptimizerKind,
    /// Required unless SGD uses `smoothness`.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Halve the learning rate once at the start of this epoch.
    #[serde(default)]
    pub halve_at_epoch: Option<usize>,
    /// SGD only: use `η = 1 / (Λ √(T − 1))` with this smoothness estimate
    /// `Λ` and `T` the total step count.
    #[serde(default)]
    pub smoothness: Option<f64>,
    /// Modulate Adam moments after accepted teleports.
    #[serde(default = "yes")]
    pub htr: bool,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Rows per task per step for data-driven suites.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    32
}

impl TrainingConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Single-task reference runs used for the relative degradation metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Train one single-task model per task with the same optimizer and
    /// training settings.
    #[serde(default)]
    pub single_task: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: e.span().map(|s| format!("at byte {}", s.start)).unwrap_or_else(|| "document".into()),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML echo.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.teleport.validate()?;
        let o = &self.optimizer;
        match (o.name, o.lr, o.smoothness) {
            (_, Some(lr), _) if !(lr > 0.0 && lr.is_finite()) => {
                return Err(Error::config("optimizer.lr", format!("must be positive, got {lr}")))
            }
            (OptimizerKind::Adam, None, _) => return Err(Error::config("optimizer.lr", "required for adam")),
            (OptimizerKind::Adam, _, Some(_)) => {
                return Err(Error::config("optimizer.smoothness", "only applies to sgd"))
            }
            (OptimizerKind::Sgd, None, None) => {
                return Err(Error::config("optimizer.lr", "sgd needs `lr` or `smoothness`"))
            }
            (OptimizerKind::Sgd, Some(_), Some(_)) => {
                return Err(Error::config("optimizer.smoothness", "give either `lr` or `smoothness`, not both"))
            }
            (OptimizerKind::Sgd, None, Some(s)) if !(s > 0.0 && s.is_finite()) => {
                return Err(Error::config("optimizer.smoothness", format!("must be positive, got {s}")))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(Error::config("optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        let t = &self.training;
        if t.epochs == 0 {
            return Err(Error::config("training.epochs", "must be >= 1"));
        }
        if t.steps_per_epoch == 0 {
            return Err(Error::config("training.steps_per_epoch", "must be >= 1"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be >= 1"));
        }
        if o.smoothness.is_some() && t.total_steps() < 2 {
            return Err(Error::config("optimizer.smoothness", "needs at least two training steps"));
        }
        if let Some(f) = self.suite.test_fraction() {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::config("suite.test_fraction", "must lie in [0, 1)"));
            }
        }
        match &self.suite {
            SuiteConfig::Synthetic { tasks, samples, .. } => {
                if *tasks < 2 {
                    return Err(Error::config("suite.tasks", "K >= 2 required"));
                }
                if *samples < 10 {
                    return Err(Error::config("suite.samples", "must be >= 10"));
                }
            }
            SuiteConfig::Quadratic { a, b, scales, .. } => {
                if a == b {
                    return Err(Error::config("suite.b", "must differ from suite.a"));
                }
                if !(scales[0] > 0.0 && scales[1] > 0.0) {
                    return Err(Error::config("suite.scales", "must be positive"));
                }
            }
            SuiteConfig::Ravine { .. } | SuiteConfig::Csv { .. } => {}
        }
        Ok(())
    }

    /// `"ls"`, or `"ls+teleport"` when teleportation is enabled.
    pub fn method_label(&self) -> String {
        if self.teleport.enabled {
            format!("{}+teleport", self.method.name())
        } else {
            self.method.name().to_string()
        }
    }
}

/// Sets a dotted key (`teleport.gamma`) in a TOML document to a value given
/// as text. The text is read as a TOML value when possible and as a string
/// otherwise.
pub fn set_dotted(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = parse_value(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
