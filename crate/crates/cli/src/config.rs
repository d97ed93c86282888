//! Run configuration: a flat key/value text file with command-line
//! overrides. Reproducibility first: the seed is mandatory and every
//! effective setting is echoed into the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hct_core::dataio::LabelColumns;
use hct_core::model::{HctConfig, ModelTask};
use hct_core::trainer::TrainConfig;
use hct_core::{HctError, Result};

/// Values taken from command-line flags; they win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub task: Option<String>,
    pub folds: Option<usize>,
    pub jobs: Option<usize>,
    pub overwrite: bool,
}

/// Effective settings of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub task: Option<String>,
    pub folds: usize,
    /// 0 means "fold count capped at hardware parallelism".
    pub jobs: usize,
    pub overwrite: bool,

    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Overrides both per-task rates when set.
    pub learning_rate: Option<f32>,
    pub learning_rate_binary: f32,
    pub learning_rate_staging: f32,

    pub segment_length: usize,
    pub conv_kernel: usize,
    pub conv_channels: Vec<usize>,
    pub branch_output_len: usize,
    pub temporal_width: usize,
    pub reduced_length: usize,
    pub spatial_width: usize,
    pub heads: usize,
    pub dropout: f32,
    pub head_widths: Vec<usize>,
    pub shared_reduce: bool,
    pub raw_positional_index: bool,
    pub dropout_after_attention: bool,
    pub dropout_after_head_fc: bool,

    pub label_col_subject: String,
    pub label_col_group: String,
    pub label_col_stage: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = HctConfig::default();
        let train = TrainConfig::for_task(ModelTask::TwoClass, 0);
        RunConfig {
            data_dir: None,
            labels: None,
            out_dir: None,
            seed: None,
            task: None,
            folds: 10,
            jobs: 0,
            overwrite: false,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            validation_fraction: train.validation_fraction,
            beta1: train.beta1,
            beta2: train.beta2,
            learning_rate: None,
            learning_rate_binary: 0.0005,
            learning_rate_staging: 0.001,
            segment_length: model.segment_length,
            conv_kernel: model.conv_kernel,
            conv_channels: model.conv_channels,
            branch_output_len: model.branch_output_len,
            temporal_width: model.temporal_width,
            reduced_length: model.reduced_length,
            spatial_width: model.spatial_width,
            heads: model.heads,
            dropout: model.dropout,
            head_widths: model.head_widths,
            shared_reduce: model.shared_reduce,
            raw_positional_index: model.raw_positional_index,
            dropout_after_attention: model.dropout_after_attention,
            dropout_after_head_fc: model.dropout_after_head_fc,
            label_col_subject: "ID".into(),
            label_col_group: "Group".into(),
            label_col_stage: "HoehnYahr".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| HctError::Config(format!("bad value {value:?} for key {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse::<usize>(key, v.trim()))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(HctError::Config(format!(
            "bad boolean {value:?} for key {key}"
        ))),
    }
}

impl RunConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "seed" => self.seed = Some(parse(key, value)?),
            "task" => self.task = Some(value.to_string()),
            "folds" => self.folds = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            "overwrite" => self.overwrite = parse_bool(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "learning_rate" => self.learning_rate = Some(parse(key, value)?),
            "learning_rate_binary" => self.learning_rate_binary = parse(key, value)?,
            "learning_rate_staging" => self.learning_rate_staging = parse(key, value)?,
            "segment_length" => self.segment_length = parse(key, value)?,
            "conv_kernel" => self.conv_kernel = parse(key, value)?,
            "conv_channels" => self.conv_channels = parse_list(key, value)?,
            "branch_output_len" => self.branch_output_len = parse(key, value)?,
            "temporal_width" => self.temporal_width = parse(key, value)?,
            "reduced_length" => self.reduced_length = parse(key, value)?,
            "spatial_width" => self.spatial_width = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "head_widths" => self.head_widths = parse_list(key, value)?,
            "shared_reduce" => self.shared_reduce = parse_bool(key, value)?,
            "raw_positional_index" => self.raw_positional_index = parse_bool(key, value)?,
            "dropout_after_attention" => {
                self.dropout_after_attention = parse_bool(key, value)?
            }
            "dropout_after_head_fc" => self.dropout_after_head_fc = parse_bool(key, value)?,
            "label_col_subject" => self.label_col_subject = value.to_string(),
            "label_col_group" => self.label_col_group = value.to_string(),
            "label_col_stage" => self.label_col_stage = value.to_string(),
            _ => {
                return Err(HctError::Config(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_file(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HctError::Config(format!("config line {}: expected key = value", lineno + 1))
            })?;
            config.apply(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Loads the file (when given), then applies flag overrides and the
    /// `HCT_DATA_DIR` fallback.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    HctError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                RunConfig::parse_file(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = &overrides.data_dir {
            config.data_dir = Some(v.clone());
        }
        if let Some(v) = &overrides.labels {
            config.labels = Some(v.clone());
        }
        if let Some(v) = &overrides.out_dir {
            config.out_dir = Some(v.clone());
        }
        if let Some(v) = overrides.seed {
            config.seed = Some(v);
        }
        if let Some(v) = &overrides.task {
            config.task = Some(v.clone());
        }
        if let Some(v) = overrides.folds {
            config.folds = v;
        }
        if let Some(v) = overrides.jobs {
            config.jobs = v;
        }
        if overrides.overwrite {
            config.overwrite = true;
        }
        if config.data_dir.is_none() {
            if let Ok(dir) = std::env::var("HCT_DATA_DIR") {
                config.data_dir = Some(PathBuf::from(dir));
            }
        }
        Ok(config)
    }

    /// The mandatory-seed rule plus existence checks for referenced paths.
    pub fn validate_inputs(&self, needs_data: bool) -> Result<()> {
        if self.seed.is_none() {
            return Err(HctError::Config(
                "seed is required (no wall-clock default); set it in the config file or --seed"
                    .into(),
            ));
        }
        if needs_data {
            let dir = self.data_dir.as_ref().ok_or_else(|| {
                HctError::Config("data_dir is required (config, --data-dir, or HCT_DATA_DIR)".into())
            })?;
            if !dir.is_dir() {
                return Err(HctError::Config(format!(
                    "data_dir {} is not a directory",
                    dir.display()
                )));
            }
            let labels = self.labels.as_ref().ok_or_else(|| {
                HctError::Config("labels table path is required (config or --labels)".into())
            })?;
            if !labels.is_file() {
                return Err(HctError::Config(format!(
                    "label table {} does not exist",
                    labels.display()
                )));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn label_columns(&self) -> LabelColumns {
        LabelColumns {
            subject: self.label_col_subject.clone(),
            group: self.label_col_group.clone(),
            stage: self.label_col_stage.clone(),
        }
    }

    pub fn model_config(&self, task: ModelTask) -> HctConfig {
        HctConfig {
            segment_length: self.segment_length,
            conv_kernel: self.conv_kernel,
            conv_channels: self.conv_channels.clone(),
            branch_output_len: self.branch_output_len,
            temporal_width: self.temporal_width,
            reduced_length: self.reduced_length,
            sensor_count: hct_core::dataio::SENSOR_COUNT,
            spatial_width: self.spatial_width,
            heads: self.heads,
            dropout: self.dropout,
            head_widths: self.head_widths.clone(),
            shared_reduce: self.shared_reduce,
            raw_positional_index: self.raw_positional_index,
            dropout_after_attention: self.dropout_after_attention,
            dropout_after_head_fc: self.dropout_after_head_fc,
            task,
        }
    }

    pub fn train_config(&self, task: ModelTask) -> TrainConfig {
        let rate = self.learning_rate.unwrap_or(match task {
            ModelTask::TwoClass => self.learning_rate_binary,
            ModelTask::MultiClass => self.learning_rate_staging,
        });
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            learning_rate: rate,
            beta1: self.beta1,
            beta2: self.beta2,
            patience: self.patience,
            validation_fraction: self.validation_fraction,
            seed: self.seed(),
        }
    }

    /// Every effective setting as strings, for the run manifest.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|v| v.display().to_string())
                .unwrap_or_default()
        };
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        map.insert("data_dir".into(), path(&self.data_dir));
        map.insert("labels".into(), path(&self.labels));
        map.insert("out_dir".into(), path(&self.out_dir));
        map.insert(
            "seed".into(),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
        );
        map.insert("task".into(), self.task.clone().unwrap_or_default());
        map.insert("folds".into(), self.folds.to_string());
        map.insert("jobs".into(), self.jobs.to_string());
        map.insert("overwrite".into(), self.overwrite.to_string());
        map.insert("batch_size".into(), self.batch_size.to_string());
        map.insert("max_epochs".into(), self.max_epochs.to_string());
        map.insert("patience".into(), self.patience.to_string());
        map.insert(
            "validation_fraction".into(),
            self.validation_fraction.to_string(),
        );
        map.insert("beta1".into(), self.beta1.to_string());
        map.insert("beta2".into(), self.beta2.to_string());
        map.insert(
            "learning_rate".into(),
            self.learning_rate.map(|r| r.to_string()).unwrap_or_default(),
        );
        map.insert(
            "learning_rate_binary".into(),
            self.learning_rate_binary.to_string(),
        );
        map.insert(
            "learning_rate_staging".into(),
            self.learning_rate_staging.to_string(),
        );
        map.insert("segment_length".into(), self.segment_length.to_string());
        map.insert("conv_kernel".into(), self.conv_kernel.to_string());
        map.insert("conv_channels".into(), list(&self.conv_channels));
        map.insert(
            "branch_output_len".into(),
            self.branch_output_len.to_string(),
        );
        map.insert("temporal_width".into(), self.temporal_width.to_string());
        map.insert("reduced_length".into(), self.reduced_length.to_string());
        map.insert("spatial_width".into(), self.spatial_width.to_string());
        map.insert("heads".into(), self.heads.to_string());
        map.insert("dropout".into(), self.dropout.to_string());
        map.insert("head_widths".into(), list(&self.head_widths));
        map.insert("shared_reduce".into(), self.shared_reduce.to_string());
        map.insert(
            "raw_positional_index".into(),
            self.raw_positional_index.to_string(),
        );
        map.insert(
            "dropout_after_attention".into(),
            self.dropout_after_attention.to_string(),
        );
        map.insert(
            "dropout_after_head_fc".into(),
            self.dropout_after_head_fc.to_string(),
        );
        map.insert("label_col_subject".into(), self.label_col_subject.clone());
        map.insert("label_col_group".into(), self.label_col_group.clone());
        map.insert("label_col_stage".into(), self.label_col_stage.clone());
        map
    }
}
