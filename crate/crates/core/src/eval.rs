//! Walk-level evaluation: segment majority voting, the two-step composed
//! diagnosis, confusion metrics, and the k-fold cross-validation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::{
    audit_fold_plan, build_dataset, make_folds, prepare_walks, DiagnosisLabel, SegmentSet,
    SegmentedWalk, Task, WalkRecord,
};
use crate::model::{class_from_probs, forward, HctConfig, HctParams, ModelTask};
use crate::trainer::{train, TrainConfig};
use crate::{derive_seed, HctError, Result};

/// Names of the composed four-class space.
pub const FOUR_CLASS_NAMES: [&str; 4] = ["healthy", "2", "2.5", "3"];

/// Square confusion matrix indexed by `(true class, predicted class)`.
#[derive(Debug, Clone, Serialize)]
pub struct ConfusionCounts {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionCounts {
    pub fn new(labels: &[&str]) -> Self {
        ConfusionCounts {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            counts: vec![vec![0; labels.len()]; labels.len()],
        }
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class][predicted] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (mine, theirs) in self.counts.iter_mut().zip(other.counts.iter()) {
            for (m, t) in mine.iter_mut().zip(theirs.iter()) {
                *m += t;
            }
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|c| self.counts[c][c]).sum()
    }

    /// Tab-separated matrix with a header row of predicted labels.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("true\\pred");
        for l in &self.labels {
            write!(out, "\t{l}").expect("string write");
        }
        out.push('\n');
        for (t, row) in self.counts.iter().enumerate() {
            write!(out, "{}", self.labels[t]).expect("string write");
            for v in row {
                write!(out, "\t{v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

/// Precision, recall, and F1 of one class, one-vs-rest.
#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Derived rates of one confusion matrix.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// True-positive rate with PD as positive; binary only.
    pub sensitivity: Option<f64>,
    /// True-negative rate; binary only.
    pub specificity: Option<f64>,
    /// Metrics whose denominator was zero and were reported as 0.
    pub degenerate: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, degenerate: &mut Vec<String>) -> f64 {
    if den == 0 {
        degenerate.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Sensitivity/specificity (binary, PD positive), accuracy, and
/// one-vs-rest precision/recall/F1 per class. Zero-denominator rates
/// report 0 and are listed in `degenerate`.
pub fn compute_metrics(counts: &ConfusionCounts) -> Result<MetricsReport> {
    let total = counts.total();
    if total == 0 {
        return Err(HctError::Contract("empty confusion matrix".into()));
    }
    let n = counts.classes();
    let mut degenerate = Vec::new();
    let mut per_class = Vec::with_capacity(n);
    for c in 0..n {
        let tp = counts.get(c, c);
        let fp: u64 = (0..n).filter(|&t| t != c).map(|t| counts.get(t, c)).sum();
        let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| counts.get(c, p)).sum();
        let label = counts.labels()[c].clone();
        let precision = ratio(tp, tp + fp, &format!("precision[{label}]"), &mut degenerate);
        let recall = ratio(tp, tp + fn_, &format!("recall[{label}]"), &mut degenerate);
        let f1 = if precision + recall == 0.0 {
            degenerate.push(format!("f1[{label}]"));
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            label,
            precision,
            recall,
            f1,
        });
    }
    let (sensitivity, specificity) = if n == 2 {
        // PD is class index 1
        let tp = counts.get(1, 1);
        let fn_ = counts.get(1, 0);
        let tn = counts.get(0, 0);
        let fp = counts.get(0, 1);
        (
            Some(ratio(tp, tp + fn_, "sensitivity", &mut degenerate)),
            Some(ratio(tn, tn + fp, "specificity", &mut degenerate)),
        )
    } else {
        (None, None)
    };
    let nf = n as f64;
    Ok(MetricsReport {
        accuracy: counts.trace() as f64 / total as f64,
        macro_precision: per_class.iter().map(|c| c.precision).sum::<f64>() / nf,
        macro_recall: per_class.iter().map(|c| c.recall).sum::<f64>() / nf,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / nf,
        per_class,
        sensitivity,
        specificity,
        degenerate,
    })
}

/// Modal class of segment votes; ties break toward the higher (more
/// severe) class index.
pub fn majority_vote(votes: &[usize]) -> Result<usize> {
    if votes.is_empty() {
        return Err(HctError::Contract("no votes".into()));
    }
    let max_class = *votes.iter().max().expect("non-empty");
    let mut tally = vec![0usize; max_class + 1];
    for &v in votes {
        tally[v] += 1;
    }
    let mut winner = 0;
    for (class, &count) in tally.iter().enumerate() {
        if count >= tally[winner] && count > 0 {
            winner = class;
        }
    }
    Ok(winner)
}

/// Classifies every segment of a walk and majority-votes the walk label.
pub fn predict_walk(
    segments: &[SegmentSet],
    params: &HctParams<f32>,
    config: &HctConfig,
) -> Result<usize> {
    if segments.is_empty() {
        return Err(HctError::Contract("walk has no segments".into()));
    }
    let votes = segments
        .iter()
        .map(|s| {
            forward(s, params, config, false, None).map(|p| class_from_probs(config.task, &p))
        })
        .collect::<Result<Vec<usize>>>()?;
    majority_vote(&votes)
}

/// Two-step diagnosis: the detection model screens the walk; only walks
/// it flags as PD reach the staging model. Returns a four-class index
/// (0 = healthy, 1..=3 = stages 2, 2.5, 3).
pub fn two_step_diagnose(
    segments: &[SegmentSet],
    binary: (&HctParams<f32>, &HctConfig),
    staging: (&HctParams<f32>, &HctConfig),
) -> Result<usize> {
    if binary.1.task != ModelTask::TwoClass {
        return Err(HctError::TaskMismatch(
            "detection slot holds a non-two-class model".into(),
        ));
    }
    if staging.1.task != ModelTask::MultiClass {
        return Err(HctError::TaskMismatch(
            "staging slot holds a non-multi-class model".into(),
        ));
    }
    if binary.1.segment_length != staging.1.segment_length
        || binary.1.sensor_count != staging.1.sensor_count
    {
        return Err(HctError::Contract(
            "detection and staging checkpoints disagree on preprocessing".into(),
        ));
    }
    if predict_walk(segments, binary.0, binary.1)? == 0 {
        return Ok(0); // staging model never invoked
    }
    Ok(predict_walk(segments, staging.0, staging.1)? + 1)
}

/// What a cross-validation run evaluates per fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvTask {
    Detection,
    Staging,
    /// Train both models per fold and score the two-step composition on
    /// all test walks in the four-class space.
    Composed,
}

impl std::fmt::Display for CvTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CvTask::Detection => write!(f, "detection"),
            CvTask::Staging => write!(f, "staging"),
            CvTask::Composed => write!(f, "composed"),
        }
    }
}

/// One fold's outcome.
#[derive(Debug, Clone, Serialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub test_walks: usize,
    pub confusion: ConfusionCounts,
    pub report: MetricsReport,
}

/// Mean and population standard deviation of one metric over folds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Mean plus population standard deviation (divide by the fold count).
pub fn mean_sd(values: &[f64]) -> MeanSd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanSd {
        mean,
        sd: var.sqrt(),
    }
}

/// Full cross-validation result.
#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub task: String,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldOutcome>,
    pub total_confusion: ConfusionCounts,
    /// Mean and SD over folds, keyed by metric name.
    pub aggregate: BTreeMap<String, MeanSd>,
}

impl CvReport {
    /// Tab-separated per-fold table.
    pub fn fold_table(&self) -> String {
        let mut out = String::from(
            "fold\ttest_walks\taccuracy\tsensitivity\tspecificity\tmacro_precision\tmacro_recall\tmacro_f1\n",
        );
        let opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "n/a".to_string(),
        };
        for f in &self.folds {
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                f.fold,
                f.test_walks,
                f.report.accuracy,
                opt(f.report.sensitivity),
                opt(f.report.specificity),
                f.report.macro_precision,
                f.report.macro_recall,
                f.report.macro_f1
            )
            .expect("string write");
        }
        out
    }
}

fn confusion_labels(task: CvTask) -> Vec<&'static str> {
    match task {
        CvTask::Detection => vec!["healthy", "pd"],
        CvTask::Staging => vec!["2", "2.5", "3"],
        CvTask::Composed => FOUR_CLASS_NAMES.to_vec(),
    }
}

/// Walks of one fold's test side, grouped deterministically by identity.
fn group_test_walks(
    walks: &[SegmentedWalk],
    plan: &crate::dataio::FoldPlan,
    fold: usize,
) -> BTreeMap<(String, String), (DiagnosisLabel, Vec<SegmentSet>)> {
    let mut out = BTreeMap::new();
    for walk in walks {
        if plan.fold_of(&walk.subject_id) == Some(fold) && !walk.segments.is_empty() {
            out.insert(
                (walk.subject_id.clone(), walk.walk_id.clone()),
                (walk.label, walk.segments.clone()),
            );
        }
    }
    out
}

fn train_for(
    walks: &[SegmentedWalk],
    plan: &crate::dataio::FoldPlan,
    fold: usize,
    data_task: Task,
    base_train: &TrainConfig,
    model_config: &HctConfig,
    seed_salt: u64,
) -> Result<HctParams<f32>> {
    let (train_items, _) = build_dataset(walks, plan, fold, data_task)?;
    if train_items.is_empty() {
        return Err(HctError::Contract(format!(
            "fold {fold}: no training segments for task {data_task:?}"
        )));
    }
    let fold_config = TrainConfig {
        seed: derive_seed(base_train.seed, seed_salt + fold as u64),
        ..base_train.clone()
    };
    let (params, _) = train(&train_items, &fold_config, model_config)?;
    Ok(params)
}

/// Subject-level k-fold cross-validation.
///
/// Folds train independently (optionally on `jobs` worker threads, with
/// per-fold derived seeds so parallelism cannot change results) and every
/// held-out walk is scored exactly once at the walk level.
pub fn cross_validate(
    walks: &[WalkRecord],
    k: usize,
    binary_train: &TrainConfig,
    staging_train: &TrainConfig,
    model_config: &HctConfig,
    task: CvTask,
    jobs: usize,
) -> Result<CvReport> {
    if binary_train.seed != staging_train.seed {
        return Err(HctError::Config(
            "detection and staging train configs must share the seed".into(),
        ));
    }
    let seed = binary_train.seed;
    let segmented = prepare_walks(walks, model_config.segment_length)?;
    let subjects: Vec<(String, DiagnosisLabel)> = segmented
        .iter()
        .map(|w| (w.subject_id.clone(), w.label))
        .collect::<BTreeMap<_, _>>()
        .into_iter()
        .collect();
    let plan = make_folds(&subjects, k, seed)?;
    audit_fold_plan(&plan, &subjects)?;

    let binary_config = HctConfig {
        task: ModelTask::TwoClass,
        ..model_config.clone()
    };
    let staging_config = HctConfig {
        task: ModelTask::MultiClass,
        ..model_config.clone()
    };

    let run_fold = |fold: usize| -> Result<FoldOutcome> {
        let mut confusion = ConfusionCounts::new(&confusion_labels(task));
        match task {
            CvTask::Detection => {
                let params = train_for(
                    &segmented, &plan, fold, Task::Detection, binary_train, &binary_config, 100,
                )?;
                for ((_, _), (label, segments)) in group_test_walks(&segmented, &plan, fold) {
                    let pred = predict_walk(&segments, &params, &binary_config)?;
                    confusion.record(label.detection_class(), pred);
                }
            }
            CvTask::Staging => {
                let params = train_for(
                    &segmented, &plan, fold, Task::Staging, staging_train, &staging_config, 200,
                )?;
                for ((_, _), (label, segments)) in group_test_walks(&segmented, &plan, fold) {
                    let Some(true_class) = label.hy_stage.staging_class() else {
                        continue; // controls are not staged
                    };
                    let pred = predict_walk(&segments, &params, &staging_config)?;
                    confusion.record(true_class, pred);
                }
            }
            CvTask::Composed => {
                let binary_params = train_for(
                    &segmented, &plan, fold, Task::Detection, binary_train, &binary_config, 100,
                )?;
                let staging_params = train_for(
                    &segmented, &plan, fold, Task::Staging, staging_train, &staging_config, 200,
                )?;
                for ((_, _), (label, segments)) in group_test_walks(&segmented, &plan, fold) {
                    let pred = two_step_diagnose(
                        &segments,
                        (&binary_params, &binary_config),
                        (&staging_params, &staging_config),
                    )?;
                    confusion.record(label.four_class(), pred);
                }
            }
        }
        let report = compute_metrics(&confusion)?;
        Ok(FoldOutcome {
            fold,
            test_walks: confusion.total() as usize,
            confusion,
            report,
        })
    };

    let folds: Vec<FoldOutcome> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.min(k))
            .build()
            .map_err(|e| HctError::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..k)
                .into_par_iter()
                .map(run_fold)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..k).map(run_fold).collect::<Result<Vec<_>>>()?
    };

    let mut total_confusion = ConfusionCounts::new(&confusion_labels(task));
    for f in &folds {
        total_confusion.merge(&f.confusion);
    }
    let mut aggregate = BTreeMap::new();
    let collect = |f: fn(&FoldOutcome) -> Option<f64>| -> Option<Vec<f64>> {
        folds.iter().map(f).collect()
    };
    aggregate.insert(
        "accuracy".to_string(),
        mean_sd(&collect(|f| Some(f.report.accuracy)).expect("accuracy")),
    );
    if let Some(se) = collect(|f| f.report.sensitivity) {
        aggregate.insert("sensitivity".to_string(), mean_sd(&se));
    }
    if let Some(sp) = collect(|f| f.report.specificity) {
        aggregate.insert("specificity".to_string(), mean_sd(&sp));
    }
    aggregate.insert(
        "macro_precision".to_string(),
        mean_sd(&collect(|f| Some(f.report.macro_precision)).expect("precision")),
    );
    aggregate.insert(
        "macro_recall".to_string(),
        mean_sd(&collect(|f| Some(f.report.macro_recall)).expect("recall")),
    );
    aggregate.insert(
        "macro_f1".to_string(),
        mean_sd(&collect(|f| Some(f.report.macro_f1)).expect("f1")),
    );

    Ok(CvReport {
        task: task.to_string(),
        k,
        seed,
        folds,
        total_confusion,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_binary_metrics_example() {
        let mut counts = ConfusionCounts::new(&["healthy", "pd"]);
        for _ in 0..90 {
            counts.record(1, 1); // TP
        }
        for _ in 0..20 {
            counts.record(1, 0); // FN
        }
        for _ in 0..80 {
            counts.record(0, 0); // TN
        }
        for _ in 0..10 {
            counts.record(0, 1); // FP
        }
        let report = compute_metrics(&counts).unwrap();
        assert!((report.sensitivity.unwrap() - 0.8182).abs() < 5e-5);
        assert!((report.specificity.unwrap() - 0.8889).abs() < 5e-5);
        assert!((report.accuracy - 0.85).abs() < 1e-12);
    }

    #[test]
    fn perfect_diagonal_scores_one_everywhere() {
        let mut counts = ConfusionCounts::new(&["2", "2.5", "3"]);
        for c in 0..3 {
            for _ in 0..7 {
                counts.record(c, c);
            }
        }
        let report = compute_metrics(&counts).unwrap();
        assert_eq!(report.accuracy, 1.0);
        for c in &report.per_class {
            assert_eq!(c.precision, 1.0);
            assert_eq!(c.recall, 1.0);
            assert_eq!(c.f1, 1.0);
        }
        assert!(report.degenerate.is_empty());
    }

    #[test]
    fn f1_equals_precision_when_precision_equals_recall() {
        let mut counts = ConfusionCounts::new(&["healthy", "pd"]);
        for _ in 0..5 {
            counts.record(0, 0);
            counts.record(1, 1);
        }
        counts.record(0, 1);
        counts.record(0, 1);
        counts.record(1, 0);
        counts.record(1, 0);
        let report = compute_metrics(&counts).unwrap();
        for c in &report.per_class {
            assert!((c.precision - c.recall).abs() < 1e-12);
            assert!((c.f1 - c.precision).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_denominator_flags() {
        // nothing predicted as pd: precision[pd] undefined, reported 0
        let mut counts = ConfusionCounts::new(&["healthy", "pd"]);
        counts.record(0, 0);
        counts.record(1, 0);
        let report = compute_metrics(&counts).unwrap();
        let pd = &report.per_class[1];
        assert_eq!(pd.precision, 0.0);
        assert!(report.degenerate.iter().any(|d| d == "precision[pd]"));
    }

    #[test]
    fn metrics_match_brute_force_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &classes in &[2usize, 4] {
            let labels: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
            let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
            for _ in 0..50 {
                let n = rng.gen_range(1..200);
                let pairs: Vec<(usize, usize)> = (0..n)
                    .map(|_| (rng.gen_range(0..classes), rng.gen_range(0..classes)))
                    .collect();
                let mut counts = ConfusionCounts::new(&label_refs);
                for &(t, p) in &pairs {
                    counts.record(t, p);
                }
                let report = compute_metrics(&counts).unwrap();

                // independent recount straight from the pairs
                let acc = pairs.iter().filter(|(t, p)| t == p).count() as f64 / n as f64;
                assert_eq!(report.accuracy, acc);
                for c in 0..classes {
                    let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as u64;
                    let fp = pairs.iter().filter(|&&(t, p)| t != c && p == c).count() as u64;
                    let fn_ = pairs.iter().filter(|&&(t, p)| t == c && p != c).count() as u64;
                    let pr = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
                    let re = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
                    assert_eq!(report.per_class[c].precision, pr);
                    assert_eq!(report.per_class[c].recall, re);
                }
            }
        }
    }

    #[test]
    fn majority_vote_examples() {
        assert_eq!(majority_vote(&[1, 1, 0]).unwrap(), 1);
        assert_eq!(majority_vote(&[1, 0]).unwrap(), 1); // tie -> severe
        assert_eq!(majority_vote(&[0, 1, 1, 2]).unwrap(), 1); // stages 2,2.5,2.5,3
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn majority_vote_equals_brute_force_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..500 {
            let n = rng.gen_range(1..40);
            let votes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let got = majority_vote(&votes).unwrap();
            // brute force: highest count, ties to the larger class index
            let mut best = (0usize, 0usize);
            for class in 0..4 {
                let count = votes.iter().filter(|&&v| v == class).count();
                if count >= best.1 && count > 0 {
                    best = (class, count);
                }
            }
            assert_eq!(got, best.0, "votes {votes:?}");
        }
    }

    #[test]
    fn composed_accuracy_never_exceeds_binary_accuracy() {
        // a walk misrouted by the detector can never be staged correctly
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..200 {
            let n = rng.gen_range(1..100);
            let mut binary_correct = 0usize;
            let mut composed_correct = 0usize;
            for _ in 0..n {
                let truth = rng.gen_range(0..4usize);
                let detected_pd = rng.gen_bool(0.5);
                let stage = rng.gen_range(0..3usize);
                let composed = if detected_pd { stage + 1 } else { 0 };
                if (truth > 0) == detected_pd {
                    binary_correct += 1;
                }
                if composed == truth {
                    composed_correct += 1;
                }
            }
            assert!(composed_correct <= binary_correct);
        }
    }

    #[test]
    fn fold_aggregate_mean_and_population_sd() {
        let agg = mean_sd(&[0.9, 1.0]);
        assert!((agg.mean - 0.95).abs() < 1e-12);
        assert!((agg.sd - 0.05).abs() < 1e-12);
    }
}
