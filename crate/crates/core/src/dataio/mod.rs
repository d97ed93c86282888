//! Walk-file parsing, label metadata, signal normalization, segmentation,
//! and subject-level stratified folds.

mod folds;
mod segment;
mod walk;

pub use folds::{
    audit_fold_plan, build_dataset, make_folds, prepare_walks, FoldPlan, LabeledSegment,
    SegmentedWalk, Task,
};
pub use segment::{normalize_signal, normalize_walk, segment_walk, SegmentSet, SEGMENT_LENGTH};
pub use walk::{
    apply_labels, load_labels, parse_walk_file, parse_walk_filename, read_walk_file,
    write_walk_file, DiagnosisLabel, HyStage, LabelColumns, LoadedLabels, WalkRecord,
    SENSOR_COUNT,
};
