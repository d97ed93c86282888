//! Walk-level evaluation paths: forced-head two-step routing and the
//! cross-validation harness on a small surrogate corpus.

use hct_core::dataio::{normalize_walk, segment_walk, SegmentSet};
use hct_core::eval::{cross_validate, two_step_diagnose, CvTask};
use hct_core::model::{init_params, HctConfig, HctParams, ModelTask};
use hct_core::numerics::Tensor;
use hct_core::synthetic::{synthetic_walk, synthetic_walks};
use hct_core::trainer::TrainConfig;

fn segments_of(class: usize, seed: u64) -> Vec<SegmentSet> {
    let walk = synthetic_walk(class, "SyPt101", "01", 320, seed);
    segment_walk(&normalize_walk(&walk), 100).unwrap()
}

/// Parameters whose output layer ignores the input and always produces
/// the given class.
fn forced_binary(pd: bool) -> (HctParams<f32>, HctConfig) {
    let cfg = HctConfig::two_class();
    let mut params: HctParams<f32> = init_params(&cfg, 1).unwrap();
    let width = params.output.weight.shape()[0];
    params.output.weight = Tensor::zeros(vec![width, 1]);
    params.output.bias = Tensor::vector(vec![if pd { 20.0 } else { -20.0 }]);
    (params, cfg)
}

fn forced_staging(stage_class: usize) -> (HctParams<f32>, HctConfig) {
    let cfg = HctConfig::multi_class();
    let mut params: HctParams<f32> = init_params(&cfg, 2).unwrap();
    let width = params.output.weight.shape()[0];
    params.output.weight = Tensor::zeros(vec![width, 3]);
    let mut bias = vec![0.0f32; 3];
    bias[stage_class] = 20.0;
    params.output.bias = Tensor::vector(bias);
    (params, cfg)
}

#[test]
fn healthy_detection_short_circuits_staging() {
    let segments = segments_of(0, 5);
    let binary = forced_binary(false);
    let staging = forced_staging(2);
    let got = two_step_diagnose(
        &segments,
        (&binary.0, &binary.1),
        (&staging.0, &staging.1),
    )
    .unwrap();
    assert_eq!(got, 0);
}

#[test]
fn pd_detection_routes_to_staging() {
    let segments = segments_of(3, 6);
    let binary = forced_binary(true);
    let staging = forced_staging(2); // stage 3
    let got = two_step_diagnose(
        &segments,
        (&binary.0, &binary.1),
        (&staging.0, &staging.1),
    )
    .unwrap();
    assert_eq!(got, 3);
}

#[test]
fn false_positive_control_lands_in_a_stage() {
    // a control walk misrouted by the detector must come out staged
    let segments = segments_of(0, 7);
    let binary = forced_binary(true);
    let staging = forced_staging(0);
    let got = two_step_diagnose(
        &segments,
        (&binary.0, &binary.1),
        (&staging.0, &staging.1),
    )
    .unwrap();
    assert!((1..=3).contains(&got));
}

#[test]
fn swapped_checkpoint_slots_are_a_task_mismatch() {
    let segments = segments_of(1, 8);
    let binary = forced_binary(true);
    let staging = forced_staging(0);
    let err = two_step_diagnose(
        &segments,
        (&staging.0, &staging.1),
        (&binary.0, &binary.1),
    );
    assert!(matches!(err, Err(hct_core::HctError::TaskMismatch(_))));
}

#[test]
fn mismatched_preprocessing_is_a_contract_error() {
    let segments = segments_of(1, 9);
    let binary = forced_binary(true);
    let mut staging = forced_staging(0);
    staging.1.segment_length = 100; // same
    staging.1.sensor_count = 18;
    // alter the staging preprocessing contract
    let other_cfg = HctConfig {
        segment_length: 50,
        branch_output_len: 9, // ((50-4)/2 - 4)/2
        ..HctConfig::multi_class()
    };
    let other_params: HctParams<f32> = init_params(&other_cfg, 3).unwrap();
    let err = two_step_diagnose(
        &segments,
        (&binary.0, &binary.1),
        (&other_params, &other_cfg),
    );
    assert!(matches!(err, Err(hct_core::HctError::Contract(_))));
}

fn tiny_corpus() -> Vec<hct_core::dataio::WalkRecord> {
    // 2 control subjects, 2 subjects per stage, 1 walk each, 2 segments per walk
    synthetic_walks(2, 2, 1, 220, 11)
}

fn quick_train(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_task(ModelTask::TwoClass, seed);
    cfg.max_epochs = 1;
    cfg.batch_size = 64;
    cfg.validation_fraction = 0.34;
    cfg
}

#[test]
fn cross_validation_scores_every_walk_exactly_once() {
    let walks = tiny_corpus();
    let train = quick_train(21);
    let report = cross_validate(
        &walks,
        2,
        &train,
        &train,
        &HctConfig::two_class(),
        CvTask::Detection,
        1,
    )
    .unwrap();
    assert_eq!(report.folds.len(), 2);
    let tested: usize = report.folds.iter().map(|f| f.test_walks).sum();
    assert_eq!(tested, walks.len());
    assert_eq!(report.total_confusion.total() as usize, walks.len());
    assert!(report.aggregate.contains_key("accuracy"));
    assert!(report.aggregate.contains_key("sensitivity"));
}

#[test]
fn cross_validation_is_seed_deterministic_and_job_invariant() {
    let walks = tiny_corpus();
    let train = quick_train(23);
    let run = |jobs: usize| {
        let report = cross_validate(
            &walks,
            2,
            &train,
            &train,
            &HctConfig::two_class(),
            CvTask::Detection,
            jobs,
        )
        .unwrap();
        serde_json::to_string(&report).unwrap()
    };
    let a = run(1);
    let b = run(1);
    let c = run(2);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn composed_cross_validation_reports_four_classes() {
    let walks = tiny_corpus();
    let train = quick_train(25);
    let report = cross_validate(
        &walks,
        2,
        &train,
        &train,
        &HctConfig::two_class(),
        CvTask::Composed,
        2,
    )
    .unwrap();
    assert_eq!(report.total_confusion.classes(), 4);
    assert_eq!(report.total_confusion.total() as usize, walks.len());
    // composed accuracy cannot beat the binary routing on the same walks
    let detection = cross_validate(
        &walks,
        2,
        &train,
        &train,
        &HctConfig::two_class(),
        CvTask::Detection,
        2,
    )
    .unwrap();
    let acc4 = report.aggregate["accuracy"].mean;
    let acc2 = detection.aggregate["accuracy"].mean;
    assert!(acc4 <= acc2 + 1e-12, "{acc4} > {acc2}");
}

#[test]
fn staging_cross_validation_uses_pd_walks_only() {
    let walks = tiny_corpus();
    let train = quick_train(27);
    let report = cross_validate(
        &walks,
        2,
        &train,
        &train,
        &HctConfig::two_class(),
        CvTask::Staging,
        1,
    )
    .unwrap();
    let pd_walks = walks
        .iter()
        .filter(|w| w.label.unwrap().is_pd)
        .count();
    assert_eq!(report.total_confusion.total() as usize, pd_walks);
    assert_eq!(report.total_confusion.classes(), 3);
}
