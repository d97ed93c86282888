//! The four operator commands: ingest, train, cv, diagnose.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;
use sha2::{Digest, Sha256};

use hct_core::dataio::{
    apply_labels, load_labels, normalize_walk, parse_walk_filename, read_walk_file,
    segment_walk, LabeledSegment, Task, WalkRecord,
};
use hct_core::eval::{cross_validate, two_step_diagnose, CvTask, FOUR_CLASS_NAMES};
use hct_core::model::{
    class_from_probs, forward, load_checkpoint_for_task, save_checkpoint, ModelTask,
};
use hct_core::trainer::train;
use hct_core::{HctError, Result};

use crate::config::RunConfig;

/// Dataset directory scan: parsed walks plus per-file warnings for files
/// that look like walk files but fail to parse.
pub struct ScannedCorpus {
    pub walks: Vec<WalkRecord>,
    pub warnings: Vec<String>,
}

pub fn scan_walks(dir: &Path) -> Result<ScannedCorpus> {
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        if let Some(name) = entry.file_name().to_str() {
            if name.ends_with(".txt") && parse_walk_filename(name).is_ok() {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    let mut walks = Vec::new();
    let mut warnings = Vec::new();
    for name in names {
        match read_walk_file(&dir.join(&name)) {
            Ok(walk) => walks.push(walk),
            Err(e) => warnings.push(format!("{name}: {e}")),
        }
    }
    Ok(ScannedCorpus { walks, warnings })
}

/// Loads and labels the corpus; parsing and labeling problems come back
/// as warnings, an empty corpus is an error.
pub fn load_corpus(config: &RunConfig) -> Result<(Vec<WalkRecord>, Vec<String>)> {
    let dir = config.data_dir.as_ref().expect("validated");
    let scanned = scan_walks(dir)?;
    if scanned.walks.is_empty() {
        return Err(HctError::Format(format!(
            "no walk files found in {}",
            dir.display()
        )));
    }
    let mut warnings = scanned.warnings;
    let labels_path = config.labels.as_ref().expect("validated");
    let table = std::fs::read_to_string(labels_path)?;
    let loaded = load_labels(&table, &config.label_columns())?;
    for (subject, reason) in &loaded.excluded {
        warnings.push(format!("{subject}: {reason}"));
    }
    let (labeled, unlabeled) = apply_labels(scanned.walks, &loaded.labels);
    for subject in unlabeled {
        warnings.push(format!("{subject}: no label row, walks dropped"));
    }
    if labeled.is_empty() {
        return Err(HctError::Format("no labeled walks".into()));
    }
    Ok((labeled, warnings))
}

fn segments_for_task(
    walks: &[WalkRecord],
    task: Task,
    segment_length: usize,
) -> Result<Vec<LabeledSegment>> {
    let mut items = Vec::new();
    for walk in walks {
        let label = walk.label.expect("labeled corpus");
        let class = match task {
            Task::Detection => Some(label.detection_class()),
            Task::Staging => label.hy_stage.staging_class(),
        };
        let Some(class) = class else { continue };
        for segment in segment_walk(&normalize_walk(walk), segment_length)? {
            items.push(LabeledSegment {
                segment,
                label: class,
            });
        }
    }
    Ok(items)
}

/// Hex SHA-256 of the dataset: per-file digests of the walk files and the
/// label table, combined in sorted filename order.
pub fn content_hash(config: &RunConfig) -> Result<String> {
    let dir = config.data_dir.as_ref().expect("validated");
    let mut entries: Vec<(String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if let Some(name) = entry.file_name().to_str() {
            if name.ends_with(".txt") && parse_walk_filename(name).is_ok() {
                entries.push((name.to_string(), entry.path()));
            }
        }
    }
    entries.sort();
    let mut outer = Sha256::new();
    for (name, path) in entries {
        let digest = Sha256::digest(std::fs::read(&path)?);
        outer.update(name.as_bytes());
        outer.update(b":");
        outer.update(digest);
        outer.update(b"\n");
    }
    if let Some(labels) = &config.labels {
        outer.update(b"labels:");
        outer.update(Sha256::digest(std::fs::read(labels)?));
    }
    Ok(format!("{:x}", outer.finalize()))
}

/// Prepares the output directory, refusing to reuse one that already
/// holds a run manifest unless overwrite is set.
fn prepare_out_dir(config: &RunConfig) -> Result<PathBuf> {
    let out = config.out_dir.clone().ok_or_else(|| {
        HctError::Config("out_dir is required (config key out_dir or --out)".into())
    })?;
    let manifest = out.join("manifest.json");
    if manifest.exists() && !config.overwrite {
        return Err(HctError::Config(format!(
            "{} already holds a run (manifest.json present); pass --overwrite to replace it",
            out.display()
        )));
    }
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: &RunConfig,
    outputs: &[String],
) -> Result<()> {
    let manifest = json!({
        "command": command,
        "config": config.echo(),
        "seed": config.seed(),
        "input_hash": content_hash(config)?,
        "outputs": outputs,
    });
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| HctError::Format(format!("manifest serialization: {e}")))?;
    text.push('\n');
    std::fs::write(out_dir.join("manifest.json"), text)?;
    Ok(())
}

fn parse_train_task(config: &RunConfig) -> Result<ModelTask> {
    match config.task.as_deref() {
        Some("detection") => Ok(ModelTask::TwoClass),
        Some("staging") => Ok(ModelTask::MultiClass),
        Some(other) => Err(HctError::Config(format!(
            "task {other:?} not one of detection, staging"
        ))),
        None => Err(HctError::Config(
            "task is required: detection or staging".into(),
        )),
    }
}

fn parse_cv_task(config: &RunConfig) -> Result<CvTask> {
    match config.task.as_deref() {
        Some("detection") | None => Ok(CvTask::Detection),
        Some("staging") => Ok(CvTask::Staging),
        Some("composed") => Ok(CvTask::Composed),
        Some(other) => Err(HctError::Config(format!(
            "task {other:?} not one of detection, staging, composed"
        ))),
    }
}

fn effective_jobs(config: &RunConfig) -> usize {
    if config.jobs > 0 {
        config.jobs
    } else {
        let hw = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        config.folds.min(hw)
    }
}

/// Per-class corpus summary printed by `ingest`.
pub fn cmd_ingest(config: &RunConfig, out: &mut impl std::io::Write) -> Result<()> {
    config.validate_inputs(true)?;
    let (walks, warnings) = load_corpus(config)?;

    #[derive(Default)]
    struct Bucket {
        subjects: std::collections::BTreeSet<String>,
        walks: usize,
        segments: usize,
    }
    let mut buckets: BTreeMap<String, Bucket> = BTreeMap::new();
    for walk in &walks {
        let label = walk.label.expect("labeled");
        let class = FOUR_CLASS_NAMES[label.four_class()].to_string();
        let group = if label.is_pd { "pd" } else { "control" }.to_string();
        let segments = walk.len() / config.segment_length;
        for key in [group, format!("stage_{class}")] {
            let bucket = buckets.entry(key).or_default();
            bucket.subjects.insert(walk.subject_id.clone());
            bucket.walks += 1;
            bucket.segments += segments;
        }
    }
    let total_subjects: std::collections::BTreeSet<_> =
        walks.iter().map(|w| w.subject_id.clone()).collect();
    let total_segments: usize = walks.iter().map(|w| w.len() / config.segment_length).sum();
    writeln!(
        out,
        "total subjects={} walks={} segments={}",
        total_subjects.len(),
        walks.len(),
        total_segments
    )?;
    let mut summary = BTreeMap::new();
    summary.insert(
        "total".to_string(),
        json!({
            "subjects": total_subjects.len(),
            "walks": walks.len(),
            "segments": total_segments,
        }),
    );
    for (name, bucket) in &buckets {
        writeln!(
            out,
            "{name} subjects={} walks={} segments={}",
            bucket.subjects.len(),
            bucket.walks,
            bucket.segments
        )?;
        summary.insert(
            name.clone(),
            json!({
                "subjects": bucket.subjects.len(),
                "walks": bucket.walks,
                "segments": bucket.segments,
            }),
        );
    }
    for w in &warnings {
        writeln!(out, "warning: {w}")?;
    }

    if config.out_dir.is_some() {
        let out_dir = prepare_out_dir(config)?;
        let doc = json!({ "classes": summary, "warnings": warnings });
        std::fs::write(
            out_dir.join("ingest_summary.json"),
            serde_json::to_string_pretty(&doc)
                .map_err(|e| HctError::Format(format!("summary serialization: {e}")))?,
        )?;
        write_manifest(&out_dir, "ingest", config, &["ingest_summary.json".into()])?;
    }
    Ok(())
}

/// Trains one model and writes checkpoint, history table, and manifest.
pub fn cmd_train(config: &RunConfig, out: &mut impl std::io::Write) -> Result<()> {
    config.validate_inputs(true)?;
    let task = parse_train_task(config)?;
    let out_dir = prepare_out_dir(config)?;
    let (walks, warnings) = load_corpus(config)?;
    for w in &warnings {
        writeln!(out, "warning: {w}")?;
    }
    let data_task = match task {
        ModelTask::TwoClass => Task::Detection,
        ModelTask::MultiClass => Task::Staging,
    };
    let items = segments_for_task(&walks, data_task, config.segment_length)?;
    if items.is_empty() {
        return Err(HctError::Contract(
            "no training segments for this task (staging needs PD walks)".into(),
        ));
    }
    let model_config = config.model_config(task);
    let train_config = config.train_config(task);
    let (params, history) = train(&items, &train_config, &model_config)?;

    save_checkpoint(&params, &model_config, &out_dir.join("model.hct"))?;
    std::fs::write(out_dir.join("history.tsv"), history.to_tsv())?;
    write_manifest(
        &out_dir,
        "train",
        config,
        &["model.hct".into(), "history.tsv".into()],
    )?;
    writeln!(
        out,
        "trained {} epochs (best {}), checkpoint at {}",
        history.stopped_epoch,
        history.best_epoch,
        out_dir.join("model.hct").display()
    )?;
    Ok(())
}

/// Runs subject-level k-fold cross-validation and writes the reports.
pub fn cmd_cv(config: &RunConfig, out: &mut impl std::io::Write) -> Result<()> {
    config.validate_inputs(true)?;
    let task = parse_cv_task(config)?;
    let out_dir = prepare_out_dir(config)?;
    let (walks, warnings) = load_corpus(config)?;
    for w in &warnings {
        writeln!(out, "warning: {w}")?;
    }
    let report = cross_validate(
        &walks,
        config.folds,
        &config.train_config(ModelTask::TwoClass),
        &config.train_config(ModelTask::MultiClass),
        &config.model_config(ModelTask::TwoClass),
        task,
        effective_jobs(config),
    )?;

    let mut outputs = vec![
        "per_fold.tsv".to_string(),
        "aggregate.json".to_string(),
        "confusion_total.tsv".to_string(),
    ];
    std::fs::write(out_dir.join("per_fold.tsv"), report.fold_table())?;
    let mut aggregate = serde_json::to_string_pretty(&report)
        .map_err(|e| HctError::Format(format!("report serialization: {e}")))?;
    aggregate.push('\n');
    std::fs::write(out_dir.join("aggregate.json"), aggregate)?;
    std::fs::write(
        out_dir.join("confusion_total.tsv"),
        report.total_confusion.to_tsv(),
    )?;
    for fold in &report.folds {
        let name = format!("confusion_fold_{}.tsv", fold.fold);
        std::fs::write(out_dir.join(&name), fold.confusion.to_tsv())?;
        outputs.push(name);
    }
    write_manifest(&out_dir, "cv", config, &outputs)?;

    for (metric, stat) in &report.aggregate {
        writeln!(
            out,
            "{metric}: {:.4} +- {:.4}",
            stat.mean, stat.sd
        )?;
    }
    Ok(())
}

/// Two-step diagnosis of one walk file against a detection checkpoint and
/// a staging checkpoint.
pub fn cmd_diagnose(
    config: &RunConfig,
    binary_ckpt: &Path,
    staging_ckpt: &Path,
    walk_file: &Path,
    out: &mut impl std::io::Write,
) -> Result<()> {
    config.validate_inputs(false)?;
    let (binary_params, binary_config) =
        load_checkpoint_for_task(binary_ckpt, ModelTask::TwoClass)?;
    let (staging_params, staging_config) =
        load_checkpoint_for_task(staging_ckpt, ModelTask::MultiClass)?;

    let walk = read_walk_file(walk_file)?;
    let segments = segment_walk(&normalize_walk(&walk), binary_config.segment_length)?;
    if segments.is_empty() {
        return Err(HctError::Contract(format!(
            "no segments: walk {} holds {} samples, shorter than {}",
            walk_file.display(),
            walk.len(),
            binary_config.segment_length
        )));
    }

    let diagnosis = two_step_diagnose(
        &segments,
        (&binary_params, &binary_config),
        (&staging_params, &staging_config),
    )?;

    // display tallies and scores from both models
    let mut binary_votes = [0usize; 2];
    let mut staging_votes = [0usize; 3];
    let mut binary_score = 0.0f64;
    let mut staging_scores = [0.0f64; 3];
    for segment in &segments {
        let p = forward(segment, &binary_params, &binary_config, false, None)?;
        binary_votes[class_from_probs(ModelTask::TwoClass, &p)] += 1;
        binary_score += p[0] as f64;
        let q = forward(segment, &staging_params, &staging_config, false, None)?;
        staging_votes[class_from_probs(ModelTask::MultiClass, &q)] += 1;
        for (acc, &v) in staging_scores.iter_mut().zip(q.iter()) {
            *acc += v as f64;
        }
    }
    let n = segments.len() as f64;
    binary_score /= n;
    for s in &mut staging_scores {
        *s /= n;
    }
    // ties go to PD, matching the walk-level vote
    let binary_class = usize::from(binary_votes[1] >= binary_votes[0]);

    writeln!(out, "diagnosis: {}", FOUR_CLASS_NAMES[diagnosis])?;
    writeln!(out, "segments: {}", segments.len())?;
    writeln!(
        out,
        "detection votes: healthy={} pd={} (mean pd score {:.4})",
        binary_votes[0], binary_votes[1], binary_score
    )?;
    writeln!(
        out,
        "staging votes: 2={} 2.5={} 3={} (mean scores {:.4} {:.4} {:.4}){}",
        staging_votes[0],
        staging_votes[1],
        staging_votes[2],
        staging_scores[0],
        staging_scores[1],
        staging_scores[2],
        if binary_class == 0 {
            " [not used: detection voted healthy]"
        } else {
            ""
        }
    )?;

    if let Some(out_dir) = &config.out_dir {
        std::fs::create_dir_all(out_dir)?;
        let doc = json!({
            "walk": walk_file.display().to_string(),
            "diagnosis": FOUR_CLASS_NAMES[diagnosis],
            "segments": segments.len(),
            "detection": {
                "votes": {"healthy": binary_votes[0], "pd": binary_votes[1]},
                "mean_pd_score": binary_score,
            },
            "staging": {
                "votes": {"2": staging_votes[0], "2.5": staging_votes[1], "3": staging_votes[2]},
                "mean_scores": staging_scores,
                "used": binary_class != 0,
            },
        });
        let mut text = serde_json::to_string_pretty(&doc)
            .map_err(|e| HctError::Format(format!("diagnosis serialization: {e}")))?;
        text.push('\n');
        std::fs::write(out_dir.join("diagnosis.json"), text)?;
    }
    Ok(())
}

/// Writes a small starter config, used by documentation examples.
pub fn example_config() -> String {
    let mut text = String::new();
    let _ = writeln!(text, "# HCT run configuration");
    let _ = writeln!(text, "data_dir = ./data");
    let _ = writeln!(text, "labels = ./data/demographics.txt");
    let _ = writeln!(text, "out_dir = ./runs/example");
    let _ = writeln!(text, "task = detection");
    let _ = writeln!(text, "seed = 7");
    let _ = writeln!(text, "folds = 10");
    text
}
