//! Experiment configuration: a TOML key tree plus `key.path=value` overrides.

use std::path::{Path, PathBuf};

use layergrad::memory::MemoryPolicy;
use layergrad::tasks::{self, LabelColumn};
use layergrad::trainer::{MethodVariant, ReplayScheme, TrainConfig};
use layergrad::{LayerGranularity, TaskStream, DEFAULT_RANK_TOL};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub stream: StreamConfig,
    pub train: TrainSection,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// CSV file, resolved relative to the config file.
    pub path: Option<PathBuf>,
    pub label_column: LabelColumn,
    /// Seed for data generation and task construction; the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            classes: 3,
            dim: 32,
            n_per_class: 250,
            path: None,
            label_column: LabelColumn::Name("label".into()),
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioName {
    Permuted,
    Split,
    DataIncremental,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub scenario: ScenarioName,
    pub tasks: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            scenario: ScenarioName::Permuted,
            tasks: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub bs_new: usize,
    pub bs_old: usize,
    pub memory_size: usize,
    pub memory_policy: MemoryPolicy,
    pub hidden: Vec<usize>,
    pub granularity: LayerGranularity,
    pub multi_head: bool,
    /// Number of sub-buffers the pooled memory is split into; per-task
    /// memories when absent.
    pub split_buffers: Option<usize>,
    pub rank_tol: f64,
    pub parallel: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr: d.lr,
            epochs: d.epochs,
            bs_new: d.bs_new,
            bs_old: d.bs_old,
            memory_size: d.memory_size,
            memory_policy: d.memory_policy,
            hidden: d.hidden,
            granularity: d.granularity,
            multi_head: d.multi_head,
            split_buffers: None,
            rank_tol: DEFAULT_RANK_TOL,
            parallel: d.parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub variants: Vec<MethodVariant>,
    /// Output root, resolved relative to the working directory.
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![1],
            variants: vec!["f".parse().expect("valid label")],
            out_dir: PathBuf::from("results"),
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides, and checks value ranges.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| invalid("<file>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(tree))
            .map_err(|e| {
                let key = e.path().to_string();
                invalid(&key, e.into_inner().to_string())
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let (Some(p), Some(dir)) = (&cfg.data.path, path.parent()) {
            if p.is_relative() {
                cfg.data.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        if d.source == DataSource::Synthetic {
            if d.classes < 2 {
                return Err(invalid("data.classes", "must be >= 2"));
            }
            if d.dim < 2 {
                return Err(invalid("data.dim", "must be >= 2"));
            }
            if d.n_per_class < 2 {
                return Err(invalid("data.n_per_class", "must be >= 2"));
            }
        } else if d.path.is_none() {
            return Err(invalid("data.path", "required when data.source = \"csv\""));
        }
        if self.stream.tasks == 0 {
            return Err(invalid("stream.tasks", "must be >= 1"));
        }
        let t = &self.train;
        let positive = [
            ("train.epochs", t.epochs),
            ("train.bs_new", t.bs_new),
            ("train.bs_old", t.bs_old),
            ("train.memory_size", t.memory_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(invalid(key, "must be >= 1"));
            }
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(invalid("train.lr", "must be a positive finite number"));
        }
        if !(t.rank_tol > 0.0 && t.rank_tol.is_finite()) {
            return Err(invalid(
                "train.rank_tol",
                "must be a positive finite number",
            ));
        }
        if t.hidden.contains(&0) {
            return Err(invalid("train.hidden", "layer widths must be >= 1"));
        }
        if t.split_buffers == Some(0) {
            return Err(invalid("train.split_buffers", "must be >= 1"));
        }
        if self.run.seeds.is_empty() {
            return Err(invalid("run.seeds", "needs at least one seed"));
        }
        if self.run.variants.is_empty() {
            return Err(invalid("run.variants", "needs at least one variant"));
        }
        Ok(())
    }

    pub fn train_config(&self, variant: MethodVariant, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            epochs: t.epochs,
            bs_new: t.bs_new,
            bs_old: t.bs_old,
            memory_size: t.memory_size,
            memory_policy: t.memory_policy,
            seed,
            variant,
            rank_tol: t.rank_tol,
            hidden: t.hidden.clone(),
            granularity: t.granularity,
            multi_head: t.multi_head,
            replay: t
                .split_buffers
                .map_or(ReplayScheme::PerTask, ReplayScheme::SplitBuffer),
            parallel: t.parallel,
        }
    }

    pub fn build_stream(&self, seed: u64) -> Result<TaskStream, CliError> {
        let data_seed = self.data.seed.unwrap_or(seed);
        let base = match self.data.source {
            DataSource::Synthetic => tasks::gen_synthetic_base(
                self.data.classes,
                self.data.dim,
                self.data.n_per_class,
                data_seed,
            ),
            DataSource::Csv => {
                let path = self.data.path.as_ref().expect("validated");
                tasks::load_csv_dataset(path, &self.data.label_column)
            }
        }
        .map_err(CliError::Runtime)?;
        let n = self.stream.tasks;
        let built = match self.stream.scenario {
            ScenarioName::Permuted => tasks::gen_permuted_tasks(&base, n, data_seed),
            ScenarioName::Split => tasks::gen_split_tasks(&base, n, data_seed),
            ScenarioName::DataIncremental => tasks::gen_data_incremental_tasks(&base, n, data_seed),
        };
        // a split that does not divide the classes is a configuration problem
        built.map_err(|e| match e {
            layergrad::Error::InvalidArgument(m) => invalid("stream.tasks", m),
            other => CliError::Runtime(other),
        })
    }
}

/// Sets `key.path` in `tree`. The value is read as a TOML value when it
/// parses as one and as a bare string otherwise.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(assignment, "override must look like key.path=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(invalid(key, "malformed key path"));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("nonempty");
    let mut node = tree;
    for (i, p) in parents.iter().enumerate() {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| invalid(&parts[..=i].join("."), "is not a table"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
