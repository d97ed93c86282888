//! Seeded sinusoidal walk surrogates.
//!
//! Classes differ in gait cadence, so the class signal survives the
//! per-walk standardization (which erases amplitude differences). Used by
//! the test suites and for smoke-testing the CLI without the clinical
//! corpus.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{
    normalize_walk, segment_walk, write_walk_file, DiagnosisLabel, HyStage, LabeledSegment,
    Task, WalkRecord, SENSOR_COUNT,
};
use crate::{derive_seed, Result};

/// Four-class label space of the composed diagnosis: 0 = healthy,
/// 1..=3 = H&Y stages 2, 2.5, 3.
pub fn label_for_class(four_class: usize) -> DiagnosisLabel {
    match four_class {
        0 => DiagnosisLabel::control(),
        1 => DiagnosisLabel::pd(HyStage::Two).expect("stage"),
        2 => DiagnosisLabel::pd(HyStage::TwoPointFive).expect("stage"),
        _ => DiagnosisLabel::pd(HyStage::Three).expect("stage"),
    }
}

/// One labeled surrogate walk at 100 Hz. The class sets the stride
/// frequency; sensors differ by phase.
pub fn synthetic_walk(
    four_class: usize,
    subject_id: &str,
    walk_id: &str,
    len: usize,
    seed: u64,
) -> WalkRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq = 0.8 + 0.4 * four_class as f64; // strides per second
    let sample_rate = 100.0f64;
    let signals = (0..SENSOR_COUNT)
        .map(|sensor| {
            let phase = sensor as f64 * 0.35;
            let gain = 30.0 + rng.gen_range(-2.0..2.0);
            (0..len)
                .map(|t| {
                    let time = t as f64 / sample_rate;
                    let stance = (std::f64::consts::PI * freq * time + phase).sin().abs();
                    let ripple = (2.0 * std::f64::consts::TAU * freq * time + phase).sin();
                    let noise = rng.gen_range(-0.5..0.5);
                    (40.0 + gain * stance + 6.0 * ripple + noise) as f32
                })
                .collect()
        })
        .collect();
    let mut walk = WalkRecord::new(
        subject_id.to_string(),
        walk_id.to_string(),
        sample_rate as f32,
        signals,
    )
    .expect("synthetic walk shape");
    walk.label = Some(label_for_class(four_class));
    walk
}

/// A labeled corpus of surrogate walks: `n_control` healthy subjects and
/// `n_per_stage` subjects per H&Y stage, each with `walks_per_subject`
/// walks of `len` samples.
pub fn synthetic_walks(
    n_control: usize,
    n_per_stage: usize,
    walks_per_subject: usize,
    len: usize,
    seed: u64,
) -> Vec<WalkRecord> {
    let mut walks = Vec::new();
    let mut subject_counter = 0u64;
    let mut push_subject = |walks: &mut Vec<WalkRecord>, class: usize, subject_id: String| {
        subject_counter += 1;
        for w in 1..=walks_per_subject {
            let walk_seed = derive_seed(seed, subject_counter * 1000 + w as u64);
            walks.push(synthetic_walk(
                class,
                &subject_id,
                &format!("{w:02}"),
                len,
                walk_seed,
            ));
        }
    };
    for i in 1..=n_control {
        push_subject(&mut walks, 0, format!("SyCo{i:02}"));
    }
    for stage in 1..=3usize {
        for i in 1..=n_per_stage {
            push_subject(&mut walks, stage, format!("SyPt{}{i:02}", stage));
        }
    }
    walks
}

/// Normalizes, segments, and labels walks for one task, without fold
/// structure — the shape the trainer consumes directly.
pub fn labeled_segments(walks: &[WalkRecord], task: Task) -> Result<Vec<LabeledSegment>> {
    let mut out = Vec::new();
    for walk in walks {
        let label = walk.label.expect("synthetic walks are labeled");
        let class = match task {
            Task::Detection => Some(label.detection_class()),
            Task::Staging => label.hy_stage.staging_class(),
        };
        let Some(class) = class else { continue };
        for segment in segment_walk(&normalize_walk(walk), crate::dataio::SEGMENT_LENGTH)? {
            out.push(LabeledSegment {
                segment,
                label: class,
            });
        }
    }
    Ok(out)
}

/// Writes the corpus to disk in the walk-file format plus a
/// `demographics.txt` label table; returns the label table path.
pub fn write_corpus(dir: &Path, walks: &[WalkRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut subjects = std::collections::BTreeMap::new();
    for walk in walks {
        let mut buf = Vec::new();
        write_walk_file(walk, &mut buf)?;
        std::fs::write(
            dir.join(format!("{}_{}.txt", walk.subject_id, walk.walk_id)),
            buf,
        )?;
        if let Some(label) = walk.label {
            subjects.insert(walk.subject_id.clone(), label);
        }
    }
    let mut table = String::from("ID\tGroup\tHoehnYahr\n");
    for (subject, label) in subjects {
        let group = if label.is_pd { "1" } else { "2" };
        let stage = if label.is_pd {
            label.hy_stage.to_string()
        } else {
            String::new()
        };
        table.push_str(&format!("{subject}\t{group}\t{stage}\n"));
    }
    let labels_path = dir.join("demographics.txt");
    std::fs::write(&labels_path, table)?;
    Ok(labels_path)
}
