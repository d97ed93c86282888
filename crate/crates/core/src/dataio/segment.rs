//! Per-walk normalization and fixed-length segmentation.

use super::walk::{WalkRecord, SENSOR_COUNT};
use crate::{HctError, Result};

/// Samples per segment window.
pub const SEGMENT_LENGTH: usize = 100;

/// Divisor guard for constant (dead-sensor) signals.
const NORM_EPS: f32 = 1e-8;

/// Standardizes one signal to zero mean and unit standard deviation,
/// computed per signal per walk with the population divisor.
pub fn normalize_signal(signal: &[f32]) -> Vec<f32> {
    if signal.is_empty() {
        return Vec::new();
    }
    let n = signal.len() as f64;
    let mean = signal.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = signal
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt() as f32;
    let mean = mean as f32;
    signal.iter().map(|&v| (v - mean) / (std + NORM_EPS)).collect()
}

/// Applies [`normalize_signal`] to all 18 channels of a walk.
pub fn normalize_walk(walk: &WalkRecord) -> WalkRecord {
    let signals = walk.signals().iter().map(|s| normalize_signal(s)).collect();
    walk.with_signals(signals)
}

/// One aligned 18-channel window of `SEGMENT_LENGTH` normalized samples —
/// the model's input unit.
#[derive(Debug, Clone)]
pub struct SegmentSet {
    pub subject_id: String,
    pub walk_id: String,
    pub segment_index: usize,
    channels: Vec<Vec<f32>>,
}

impl SegmentSet {
    pub fn new(
        subject_id: String,
        walk_id: String,
        segment_index: usize,
        channels: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if channels.len() != SENSOR_COUNT {
            return Err(HctError::Validation(format!(
                "segment needs {SENSOR_COUNT} channels, got {}",
                channels.len()
            )));
        }
        let n = channels[0].len();
        if n == 0 || channels.iter().any(|c| c.len() != n) {
            return Err(HctError::Validation(
                "segment channels must share a nonzero length".into(),
            ));
        }
        Ok(SegmentSet {
            subject_id,
            walk_id,
            segment_index,
            channels,
        })
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    /// Window length in samples.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Key identifying the parent walk.
    pub fn walk_key(&self) -> (String, String) {
        (self.subject_id.clone(), self.walk_id.clone())
    }
}

/// Cuts a (normalized) walk into consecutive non-overlapping windows of
/// `n` samples across all 18 channels; a trailing remainder shorter than
/// `n` is dropped. Walks shorter than `n` yield no segments.
pub fn segment_walk(walk: &WalkRecord, n: usize) -> Result<Vec<SegmentSet>> {
    if n == 0 {
        return Err(HctError::Config("segment length must be positive".into()));
    }
    let count = walk.len() / n;
    if count == 0 {
        log::warn!(
            "walk {}/{} has {} samples, shorter than a {n}-sample segment",
            walk.subject_id,
            walk.walk_id,
            walk.len()
        );
        return Ok(Vec::new());
    }
    let mut segments = Vec::with_capacity(count);
    for j in 0..count {
        let channels = walk
            .signals()
            .iter()
            .map(|s| s[j * n..(j + 1) * n].to_vec())
            .collect();
        segments.push(SegmentSet::new(
            walk.subject_id.clone(),
            walk.walk_id.clone(),
            j,
            channels,
        )?);
    }
    Ok(segments)
}
