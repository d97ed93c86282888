//! Subject-level stratified folds and per-fold dataset assembly.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::segment::{normalize_walk, segment_walk, SegmentSet};
use super::walk::{DiagnosisLabel, WalkRecord};
use crate::{HctError, Result};

/// Classification task the dataset is assembled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Healthy vs PD over all walks.
    Detection,
    /// H&Y stage over PD walks only.
    Staging,
}

/// Assignment of every subject to exactly one fold.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignments.get(subject_id).copied()
    }

    pub fn subjects(&self) -> impl Iterator<Item = (&String, usize)> {
        self.assignments.iter().map(|(s, &f)| (s, f))
    }

    pub fn subject_count(&self) -> usize {
        self.assignments.len()
    }
}

/// Shuffles the PD and control subject lists with the seed, then deals
/// each stratum round-robin into `k` folds. Deterministic per seed, and
/// every fold's class ratio stays within one subject of the global one.
pub fn make_folds(
    subjects: &[(String, DiagnosisLabel)],
    k: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if k == 0 {
        return Err(HctError::Config("fold count must be positive".into()));
    }
    let mut pd: Vec<&String> = subjects.iter().filter(|(_, l)| l.is_pd).map(|(s, _)| s).collect();
    let mut control: Vec<&String> =
        subjects.iter().filter(|(_, l)| !l.is_pd).map(|(s, _)| s).collect();
    for (name, stratum) in [("PD", &mut pd), ("control", &mut control)] {
        if stratum.len() < k {
            return Err(HctError::Config(format!(
                "{name} stratum has {} subjects, fewer than {k} folds",
                stratum.len()
            )));
        }
        // sort before shuffling so the plan depends only on the subject
        // set and the seed, not on input order
        stratum.sort();
        stratum.dedup();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pd.shuffle(&mut rng);
    control.shuffle(&mut rng);

    let mut assignments = BTreeMap::new();
    for stratum in [pd, control] {
        for (i, subject) in stratum.into_iter().enumerate() {
            assignments.insert(subject.clone(), i % k);
        }
    }
    Ok(FoldPlan { k, seed, assignments })
}

/// Proves the plan is a partition with the stratification promise: every
/// subject sits in exactly one fold and each fold's per-class subject
/// count differs from an even split by at most one.
pub fn audit_fold_plan(plan: &FoldPlan, subjects: &[(String, DiagnosisLabel)]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (subject, _) in subjects {
        let fold = plan.fold_of(subject).ok_or_else(|| {
            HctError::Contract(format!("subject {subject} missing from fold plan"))
        })?;
        if fold >= plan.k {
            return Err(HctError::Contract(format!(
                "subject {subject} assigned to fold {fold} of {}",
                plan.k
            )));
        }
        if !seen.insert(subject.clone()) {
            return Err(HctError::Contract(format!("subject {subject} listed twice")));
        }
    }
    for class_pd in [false, true] {
        let mut per_fold = vec![0usize; plan.k];
        let mut total = 0usize;
        for (subject, label) in subjects {
            if label.is_pd == class_pd {
                per_fold[plan.fold_of(subject).expect("checked above")] += 1;
                total += 1;
            }
        }
        let base = total / plan.k;
        for (fold, &count) in per_fold.iter().enumerate() {
            if count < base || count > base + 1 {
                return Err(HctError::Contract(format!(
                    "fold {fold} holds {count} subjects of one class, expected {base} or {}",
                    base + 1
                )));
            }
        }
    }
    Ok(())
}

/// A labeled walk with its normalized segments, ready for fold assembly.
#[derive(Debug, Clone)]
pub struct SegmentedWalk {
    pub subject_id: String,
    pub walk_id: String,
    pub label: DiagnosisLabel,
    pub segments: Vec<SegmentSet>,
}

/// One training/evaluation item: a segment and its class index for the
/// task at hand.
#[derive(Debug, Clone)]
pub struct LabeledSegment {
    pub segment: SegmentSet,
    pub label: usize,
}

/// Normalizes and segments labeled walks once, so repeated fold assembly
/// does not recompute the preprocessing.
pub fn prepare_walks(walks: &[WalkRecord], segment_length: usize) -> Result<Vec<SegmentedWalk>> {
    let mut out = Vec::with_capacity(walks.len());
    for walk in walks {
        let label = walk.label.ok_or_else(|| {
            HctError::Contract(format!(
                "walk {}/{} has no label",
                walk.subject_id, walk.walk_id
            ))
        })?;
        let segments = segment_walk(&normalize_walk(walk), segment_length)?;
        out.push(SegmentedWalk {
            subject_id: walk.subject_id.clone(),
            walk_id: walk.walk_id.clone(),
            label,
            segments,
        });
    }
    Ok(out)
}

fn task_label(task: Task, label: DiagnosisLabel) -> Option<usize> {
    match task {
        Task::Detection => Some(label.detection_class()),
        Task::Staging => label.hy_stage.staging_class(),
    }
}

/// Splits segments into train and test sets for one fold.
///
/// Detection uses every walk with a 0/1 label; staging keeps PD walks
/// only, with stage classes 0..3. Subjects of the test fold contribute
/// nothing to the training side.
pub fn build_dataset(
    walks: &[SegmentedWalk],
    plan: &FoldPlan,
    fold_index: usize,
    task: Task,
) -> Result<(Vec<LabeledSegment>, Vec<LabeledSegment>)> {
    if fold_index >= plan.k {
        return Err(HctError::Range(format!(
            "fold index {fold_index} out of {} folds",
            plan.k
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for walk in walks {
        let Some(label) = task_label(task, walk.label) else {
            continue; // walk not part of this task
        };
        let fold = plan.fold_of(&walk.subject_id).ok_or_else(|| {
            HctError::Contract(format!("subject {} not in fold plan", walk.subject_id))
        })?;
        let bucket = if fold == fold_index { &mut test } else { &mut train };
        bucket.extend(walk.segments.iter().map(|segment| LabeledSegment {
            segment: segment.clone(),
            label,
        }));
    }
    Ok((train, test))
}
