//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::{HctError, Result};

/// Which output head the network carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTask {
    /// Healthy vs PD: a single sigmoid unit.
    TwoClass,
    /// H&Y stages 2 / 2.5 / 3: three softmax units.
    MultiClass,
}

impl ModelTask {
    pub fn output_units(self) -> usize {
        match self {
            ModelTask::TwoClass => 1,
            ModelTask::MultiClass => 3,
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            ModelTask::TwoClass => 2,
            ModelTask::MultiClass => 3,
        }
    }
}

impl std::fmt::Display for ModelTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelTask::TwoClass => write!(f, "two_class"),
            ModelTask::MultiClass => write!(f, "multi_class"),
        }
    }
}

/// Hyperparameters of the Hybrid ConvNet-Transformer.
///
/// The defaults realize the published pipeline: 100-sample segments run
/// through four kernel-3 convolutions (pooled after every second one)
/// down to 22 features, a temporal encoder keeps the 22, a fully
/// connected reduction brings them to 10, and the 18 sensor tokens go
/// through the spatial encoder before the head.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct HctConfig {
    pub segment_length: usize,
    pub conv_kernel: usize,
    /// Output channels of each conv layer; the last must be 1 so the
    /// branch flattens to a vector.
    pub conv_channels: Vec<usize>,
    /// Flattened length each conv branch must produce.
    pub branch_output_len: usize,
    /// Token width of the temporal encoder.
    pub temporal_width: usize,
    /// Length after the fully connected reduction.
    pub reduced_length: usize,
    pub sensor_count: usize,
    /// Token width of the spatial encoder.
    pub spatial_width: usize,
    pub heads: usize,
    pub dropout: f32,
    /// Hidden widths of the head stack between the flattened spatial
    /// tokens and the output layer.
    pub head_widths: Vec<usize>,
    /// Share the 22->10 reduction across the 18 sensors.
    pub shared_reduce: bool,
    /// Use raw element indices as positional encodings instead of
    /// indices scaled by 1/length.
    pub raw_positional_index: bool,
    /// Apply dropout to attention outputs inside encoder blocks.
    pub dropout_after_attention: bool,
    /// Apply dropout after each hidden head layer.
    pub dropout_after_head_fc: bool,
    pub task: ModelTask,
}

impl Default for HctConfig {
    fn default() -> Self {
        HctConfig {
            segment_length: 100,
            conv_kernel: 3,
            conv_channels: vec![8, 16, 16, 1],
            branch_output_len: 22,
            temporal_width: 16,
            reduced_length: 10,
            sensor_count: 18,
            spatial_width: 16,
            heads: 4,
            dropout: 0.3,
            head_widths: vec![64, 32],
            shared_reduce: true,
            raw_positional_index: false,
            dropout_after_attention: true,
            dropout_after_head_fc: true,
            task: ModelTask::TwoClass,
        }
    }
}

impl HctConfig {
    pub fn two_class() -> Self {
        HctConfig::default()
    }

    pub fn multi_class() -> Self {
        HctConfig {
            task: ModelTask::MultiClass,
            ..HctConfig::default()
        }
    }

    /// Sequence of lengths a segment passes through inside one conv
    /// branch: after every convolution and after every pool (pools follow
    /// every second convolution).
    pub fn branch_plan(&self) -> Result<Vec<usize>> {
        if self.conv_channels.is_empty() {
            return Err(HctError::Config("conv channel plan is empty".into()));
        }
        if *self.conv_channels.last().unwrap() != 1 {
            return Err(HctError::Config(format!(
                "last conv layer must have 1 channel, got {}",
                self.conv_channels.last().unwrap()
            )));
        }
        let mut plan = Vec::new();
        let mut len = self.segment_length;
        for i in 0..self.conv_channels.len() {
            if len < self.conv_kernel {
                return Err(HctError::Config(format!(
                    "conv layer {} sees length {len}, shorter than kernel {}",
                    i + 1,
                    self.conv_kernel
                )));
            }
            len -= self.conv_kernel - 1;
            plan.push(len);
            if (i + 1) % 2 == 0 {
                if len < 2 {
                    return Err(HctError::Config(format!(
                        "pool after conv layer {} sees length {len}",
                        i + 1
                    )));
                }
                len /= 2;
                plan.push(len);
            }
        }
        Ok(plan)
    }

    /// Width of the flattened spatial-encoder output feeding the head.
    pub fn head_input_width(&self) -> usize {
        self.sensor_count * self.spatial_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_length == 0 || self.sensor_count == 0 {
            return Err(HctError::Config(
                "segment length and sensor count must be positive".into(),
            ));
        }
        if self.conv_kernel < 1 {
            return Err(HctError::Config("conv kernel must be positive".into()));
        }
        let plan = self.branch_plan()?;
        let produced = *plan.last().unwrap();
        if produced != self.branch_output_len {
            return Err(HctError::Config(format!(
                "conv branch produces {produced} features, config expects {}",
                self.branch_output_len
            )));
        }
        for (name, width) in [
            ("temporal", self.temporal_width),
            ("spatial", self.spatial_width),
        ] {
            if width == 0 || width % self.heads != 0 {
                return Err(HctError::Config(format!(
                    "{name} width {width} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HctError::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        if self.reduced_length == 0 {
            return Err(HctError::Config("reduced length must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_branch_plan_reaches_twenty_two() {
        let cfg = HctConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.branch_plan().unwrap(), vec![98, 96, 48, 46, 44, 22]);
    }

    #[test]
    fn branch_mismatch_is_a_configuration_error() {
        let cfg = HctConfig {
            segment_length: 90,
            ..HctConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(HctError::Config(_))));
    }

    #[test]
    fn head_widths_differ_by_task() {
        assert_eq!(HctConfig::two_class().task.output_units(), 1);
        assert_eq!(HctConfig::multi_class().task.output_units(), 3);
    }

    #[test]
    fn width_must_divide_heads() {
        let cfg = HctConfig {
            temporal_width: 10,
            ..HctConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(HctError::Config(_))));
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = HctConfig::multi_class();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: HctConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
