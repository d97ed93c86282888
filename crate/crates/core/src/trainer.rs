//! Mini-batch training with Nadam, dropout, early stopping, and
//! best-epoch weight restoration.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::LabeledSegment;
use crate::model::{
    class_from_probs, forward, forward_on_tape, init_params, HctConfig, HctParams, ModelTask,
};
use crate::numerics::{
    binary_cross_entropy, categorical_cross_entropy, nadam_step, OptimizerState, Tape,
};
use crate::{derive_seed, HctError, Result};

/// Salts for the independent random streams one training run draws from.
pub const SALT_INIT: u64 = 0;
pub const SALT_SHUFFLE: u64 = 1;
pub const SALT_DROPOUT: u64 = 2;
pub const SALT_SPLIT: u64 = 3;

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    /// Fraction of training subjects held out for validation.
    pub validation_fraction: f32,
    pub seed: u64,
}

impl TrainConfig {
    /// Published hyperparameters for one task: batch 200, 25 epochs,
    /// beta1 0.9, beta2 0.999, learning rate 0.0005 (two-class) or 0.001
    /// (multi-class).
    pub fn for_task(task: ModelTask, seed: u64) -> Self {
        TrainConfig {
            batch_size: 200,
            max_epochs: 25,
            learning_rate: match task {
                ModelTask::TwoClass => 0.0005,
                ModelTask::MultiClass => 0.001,
            },
            beta1: 0.9,
            beta2: 0.999,
            patience: 5,
            validation_fraction: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HctError::Config("batch size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(HctError::Config("patience must be positive".into()));
        }
        if !(0.0 < self.validation_fraction && self.validation_fraction < 1.0) {
            return Err(HctError::Config(format!(
                "validation fraction {} outside (0,1)",
                self.validation_fraction
            )));
        }
        if self.max_epochs == 0 {
            return Err(HctError::Config("max epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_accuracy: f32,
}

/// What one training run did.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch the run ended on.
    pub stopped_epoch: usize,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Tab-separated table: epoch, train_loss, val_loss, val_acc.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\tval_acc\n");
        for (i, e) in self.epochs.iter().enumerate() {
            writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}",
                i + 1,
                e.train_loss,
                e.val_loss,
                e.val_accuracy
            )
            .expect("string write");
        }
        out
    }
}

/// True when the monitored loss has not improved on its running best by
/// more than 1e-6 for `patience` consecutive epochs.
pub fn early_stop(losses: &[f32], patience: usize) -> bool {
    let mut best = f32::INFINITY;
    let mut since_improvement = 0usize;
    for &loss in losses {
        if loss < best - 1e-6 {
            best = loss;
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
    }
    since_improvement >= patience
}

/// Deterministic subject-level split of training items into train and
/// validation sets. With fewer than two subjects the validation side is
/// empty and training loss doubles as the monitored quantity.
pub fn validation_split<'a>(
    items: &'a [LabeledSegment],
    fraction: f32,
    seed: u64,
) -> (Vec<&'a LabeledSegment>, Vec<&'a LabeledSegment>) {
    let mut subjects: Vec<&str> = items.iter().map(|i| i.segment.subject_id.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() < 2 {
        return (items.iter().collect(), Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_SPLIT));
    subjects.shuffle(&mut rng);
    let n_val = ((subjects.len() as f32 * fraction).round() as usize)
        .clamp(1, subjects.len() - 1);
    let val_subjects: std::collections::BTreeSet<&str> =
        subjects[..n_val].iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for item in items {
        if val_subjects.contains(item.segment.subject_id.as_str()) {
            val.push(item);
        } else {
            train.push(item);
        }
    }
    (train, val)
}

fn batch_loss_value(task: ModelTask, probs: &[Vec<f32>], labels: &[usize]) -> Result<f32> {
    match task {
        ModelTask::TwoClass => {
            let preds: Vec<f32> = probs.iter().map(|p| p[0]).collect();
            let labels: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
            Ok(binary_cross_entropy(&preds, &labels)?.total)
        }
        ModelTask::MultiClass => {
            let flat: Vec<f32> = probs.iter().flat_map(|p| p.iter().copied()).collect();
            Ok(categorical_cross_entropy(&flat, labels, 3)?.total)
        }
    }
}

/// Mean loss and accuracy of a parameter set on items, dropout off.
pub fn evaluate(
    params: &HctParams<f32>,
    model_config: &HctConfig,
    items: &[&LabeledSegment],
) -> Result<(f32, f32)> {
    if items.is_empty() {
        return Err(HctError::EmptyBatch);
    }
    let mut probs = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    let mut correct = 0usize;
    for item in items {
        let p = forward(&item.segment, params, model_config, false, None)?;
        if class_from_probs(model_config.task, &p) == item.label {
            correct += 1;
        }
        probs.push(p);
        labels.push(item.label);
    }
    let loss = batch_loss_value(model_config.task, &probs, &labels)?;
    Ok((loss, correct as f32 / items.len() as f32))
}

/// Trains one model: subject-level validation split, seeded shuffled
/// mini-batches, Nadam updates, early stopping on validation loss, and
/// best-epoch weight restoration.
pub fn train(
    items: &[LabeledSegment],
    config: &TrainConfig,
    model_config: &HctConfig,
) -> Result<(HctParams<f32>, TrainHistory)> {
    config.validate()?;
    model_config.validate()?;
    if items.is_empty() {
        return Err(HctError::Contract("no training items".into()));
    }
    let classes = model_config.task.class_count();
    if let Some(bad) = items.iter().find(|i| i.label >= classes) {
        return Err(HctError::Contract(format!(
            "label {} out of range for {classes}-class task",
            bad.label
        )));
    }
    {
        let first = items[0].label;
        if items.iter().all(|i| i.label == first) {
            log::warn!("training set contains a single class ({first})");
        }
    }

    let (train_items, val_items) =
        validation_split(items, config.validation_fraction, config.seed);
    if val_items.is_empty() {
        log::warn!("too few subjects for a validation split; monitoring training loss");
    }

    let mut params: HctParams<f32> =
        init_params(model_config, derive_seed(config.seed, SALT_INIT))?;
    let mut states: Vec<OptimizerState<f32>> = params
        .named()
        .iter()
        .map(|(_, t)| {
            OptimizerState::new(t.shape(), config.learning_rate, config.beta1, config.beta2)
        })
        .collect::<Result<_>>()?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SALT_SHUFFLE));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SALT_DROPOUT));

    let mut history = TrainHistory {
        epochs: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
    };
    let mut best_params = params.clone();
    let mut best_val = f32::INFINITY;
    let mut monitored = Vec::with_capacity(config.max_epochs);

    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let nodes = params.register(&mut tape);
            let mut outputs = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &idx in batch {
                let item = train_items[idx];
                let fwd = forward_on_tape(
                    &mut tape,
                    &nodes,
                    model_config,
                    &item.segment,
                    true,
                    Some(&mut dropout_rng),
                )?;
                outputs.push(fwd.output);
                labels.push(item.label);
            }
            let preds = tape.concat_rows(&outputs)?;
            let loss = match model_config.task {
                ModelTask::TwoClass => {
                    let l: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
                    tape.bce_loss(preds, &l)?
                }
                ModelTask::MultiClass => {
                    let mut one_hot = vec![0.0f64; labels.len() * 3];
                    for (i, &l) in labels.iter().enumerate() {
                        one_hot[i * 3 + l] = 1.0;
                    }
                    tape.cce_loss(preds, &one_hot, 3)?
                }
            };
            loss_sum += tape.value(loss)[0] as f64 * batch.len() as f64;
            let grads = tape.backward(loss)?;
            for ((slot, grad), state) in params
                .named_mut()
                .into_iter()
                .zip(grads.iter())
                .zip(states.iter_mut())
            {
                nadam_step(slot.1, grad, state)?;
            }
        }
        let train_loss = (loss_sum / train_items.len() as f64) as f32;

        let (val_loss, val_accuracy) = if val_items.is_empty() {
            let (loss, acc) = evaluate(&params, model_config, &train_items)?;
            (loss, acc)
        } else {
            evaluate(&params, model_config, &val_items)?
        };
        history.epochs.push(EpochStats {
            train_loss,
            val_loss,
            val_accuracy,
        });
        monitored.push(val_loss);
        history.stopped_epoch = epoch;

        if val_loss < best_val - 1e-6 {
            best_val = val_loss;
            best_params = params.clone();
            history.best_epoch = epoch;
        }
        if early_stop(&monitored, config.patience) {
            break;
        }
    }
    Ok((best_params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Task;
    use crate::synthetic::{labeled_segments, synthetic_walks};

    #[test]
    fn early_stop_contract() {
        assert!(!early_stop(&[1.0, 0.9, 0.8], 2));
        assert!(early_stop(&[0.8, 0.9, 0.95], 2));
        // sub-threshold improvement counts as no improvement
        assert!(early_stop(&[0.8, 0.8 + 1e-9], 1));
        assert!(!early_stop(&[0.8], 1));
    }

    #[test]
    fn split_is_subject_level_and_deterministic() {
        let walks = synthetic_walks(4, 2, 2, 300, 1);
        let items = labeled_segments(&walks, Task::Detection).unwrap();
        let (train, val) = validation_split(&items, 0.2, 9);
        assert!(!train.is_empty() && !val.is_empty());
        let train_subjects: std::collections::BTreeSet<_> =
            train.iter().map(|i| &i.segment.subject_id).collect();
        let val_subjects: std::collections::BTreeSet<_> =
            val.iter().map(|i| &i.segment.subject_id).collect();
        assert!(train_subjects.is_disjoint(&val_subjects));

        let (train2, val2) = validation_split(&items, 0.2, 9);
        assert_eq!(train.len(), train2.len());
        assert_eq!(val.len(), val2.len());
    }

    #[test]
    fn rejects_empty_and_out_of_range() {
        let cfg = TrainConfig::for_task(ModelTask::TwoClass, 1);
        let mcfg = HctConfig::two_class();
        assert!(matches!(
            train(&[], &cfg, &mcfg),
            Err(HctError::Contract(_))
        ));

        let walks = synthetic_walks(1, 1, 1, 150, 2);
        let mut items = labeled_segments(&walks, Task::Detection).unwrap();
        items[0].label = 5;
        assert!(matches!(
            train(&items, &cfg, &mcfg),
            Err(HctError::Contract(_))
        ));
    }

    fn quick_config(seed: u64) -> (TrainConfig, HctConfig) {
        let mut cfg = TrainConfig::for_task(ModelTask::TwoClass, seed);
        cfg.max_epochs = 2;
        cfg.batch_size = 64;
        let mcfg = HctConfig::two_class();
        (cfg, mcfg)
    }

    #[test]
    fn same_seed_same_history() {
        let walks = synthetic_walks(3, 1, 1, 300, 3);
        let items = labeled_segments(&walks, Task::Detection).unwrap();
        let (cfg, mcfg) = quick_config(7);
        let (_, h1) = train(&items, &cfg, &mcfg).unwrap();
        let (_, h2) = train(&items, &cfg, &mcfg).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn first_batch_loss_matches_standalone_losses() {
        // dropout off and a single batch per epoch make the first epoch's
        // training loss the loss of the initial parameters
        let walks = synthetic_walks(3, 1, 1, 300, 4);
        let items = labeled_segments(&walks, Task::Detection).unwrap();
        let mut cfg = TrainConfig::for_task(ModelTask::TwoClass, 11);
        cfg.max_epochs = 1;
        cfg.batch_size = items.len();
        let mcfg = HctConfig {
            dropout: 0.0,
            ..HctConfig::two_class()
        };
        let (_, history) = train(&items, &cfg, &mcfg).unwrap();

        let init: HctParams<f32> =
            init_params(&mcfg, derive_seed(cfg.seed, SALT_INIT)).unwrap();
        let (train_items, _) = validation_split(&items, cfg.validation_fraction, cfg.seed);
        let (loss, _) = evaluate(&init, &mcfg, &train_items).unwrap();
        assert!(
            (history.epochs[0].train_loss - loss).abs() < 1e-5,
            "{} vs {loss}",
            history.epochs[0].train_loss
        );
    }

    #[test]
    fn trainer_applies_plain_nadam_steps() {
        // one item, one batch: the trainer's update must equal a manual
        // forward/backward plus nadam_step per parameter array
        let walks = synthetic_walks(1, 0, 1, 100, 5);
        let items = labeled_segments(&walks, Task::Detection).unwrap();
        assert_eq!(items.len(), 1);
        let mut cfg = TrainConfig::for_task(ModelTask::TwoClass, 13);
        cfg.max_epochs = 1;
        let mcfg = HctConfig {
            dropout: 0.0,
            ..HctConfig::two_class()
        };
        let (trained, _) = train(&items, &cfg, &mcfg).unwrap();

        let mut manual: HctParams<f32> =
            init_params(&mcfg, derive_seed(cfg.seed, SALT_INIT)).unwrap();
        let mut tape = Tape::new();
        let nodes = manual.register(&mut tape);
        let fwd = forward_on_tape(&mut tape, &nodes, &mcfg, &items[0].segment, true, None)
            .unwrap();
        let preds = tape.concat_rows(&[fwd.output]).unwrap();
        let loss = tape.bce_loss(preds, &[items[0].label as f64]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut states: Vec<OptimizerState<f32>> = manual
            .named()
            .iter()
            .map(|(_, t)| {
                OptimizerState::new(t.shape(), cfg.learning_rate, cfg.beta1, cfg.beta2).unwrap()
            })
            .collect();
        for ((slot, grad), state) in manual
            .named_mut()
            .into_iter()
            .zip(grads.iter())
            .zip(states.iter_mut())
        {
            nadam_step(slot.1, grad, state).unwrap();
        }

        for ((name, a), (_, b)) in trained.named().iter().zip(manual.named().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn diverging_validation_loss_stops_after_patience() {
        let walks = synthetic_walks(3, 1, 1, 300, 6);
        let items = labeled_segments(&walks, Task::Detection).unwrap();
        let mut cfg = TrainConfig::for_task(ModelTask::TwoClass, 17);
        cfg.max_epochs = 25;
        cfg.patience = 1;
        cfg.learning_rate = 30.0; // blows the loss up immediately
        let mcfg = HctConfig::two_class();
        let (_, history) = train(&items, &cfg, &mcfg).unwrap();
        assert!(
            history.stopped_epoch < 25,
            "diverging run should stop early, ran {} epochs",
            history.stopped_epoch
        );
        assert_eq!(history.best_epoch < history.stopped_epoch, true);
    }

    #[test]
    fn best_epoch_has_minimum_validation_loss() {
        let walks = synthetic_walks(4, 2, 1, 300, 7);
        let items = labeled_segments(&walks, Task::Detection).unwrap();
        let mut cfg = TrainConfig::for_task(ModelTask::TwoClass, 19);
        cfg.max_epochs = 3;
        cfg.batch_size = 64;
        let mcfg = HctConfig::two_class();
        let (best, history) = train(&items, &cfg, &mcfg).unwrap();

        let min_val = history
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f32::INFINITY, f32::min);
        assert!(
            (history.epochs[history.best_epoch - 1].val_loss - min_val).abs() <= 1e-6 + 1e-9
        );

        // re-evaluating the returned parameters reproduces that loss
        let (_, val_items) = validation_split(&items, cfg.validation_fraction, cfg.seed);
        let (loss, _) = evaluate(&best, &mcfg, &val_items).unwrap();
        assert!((loss - min_val).abs() < 1e-5, "{loss} vs {min_val}");
    }

    #[test]
    fn history_table_shape() {
        let history = TrainHistory {
            epochs: vec![EpochStats {
                train_loss: 0.5,
                val_loss: 0.6,
                val_accuracy: 0.75,
            }],
            stopped_epoch: 1,
            best_epoch: 1,
        };
        let tsv = history.to_tsv();
        assert!(tsv.starts_with("epoch\ttrain_loss\tval_loss\tval_acc\n"));
        assert!(tsv.contains("1\t0.500000\t0.600000\t0.750000"));
    }
}
