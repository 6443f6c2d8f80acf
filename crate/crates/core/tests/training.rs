mod common;

use common::*;
use sonoseg::distiller::{distill, DistillConfig, Distiller};
use sonoseg::model::{load_checkpoint, PromptSegModel};
use sonoseg::trainer::{fit, lr_at_epoch, RunOutputs, TrainConfig, Trainer};
use sonoseg::{BinaryMask, Error};

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        learning_rate: 1e-3,
        decay_every_epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn frozen_fit_keeps_encoder_and_writes_run_files() {
    let model = PromptSegModel::init(tiny_config(), 3).unwrap();
    let encoder_before: Vec<_> = param_bits(&model)
        .into_iter()
        .filter(|(k, _)| model.encoder_vars().iter().any(|(n, _)| n == k))
        .collect();
    let all_before = param_bits(&model);
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutputs {
        dir: dir.path().to_path_buf(),
    };
    let cfg = quick(2);
    let report = fit(&model, &tiny_samples(1, 4), &tiny_samples(2, 2), &cfg, Some(&out)).unwrap();

    let encoder_after: Vec<_> = param_bits(&model)
        .into_iter()
        .filter(|(k, _)| model.encoder_vars().iter().any(|(n, _)| n == k))
        .collect();
    assert!(!encoder_before.is_empty());
    assert_eq!(encoder_before, encoder_after);
    assert_ne!(all_before, param_bits(&model), "decoder should move");
    assert_eq!(report.encoder_checksum_before, report.encoder_checksum_after);
    assert_eq!(report.epoch_losses.len(), 2);
    assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
    assert_eq!(report.lr_trace, vec![lr_at_epoch(0, &cfg), lr_at_epoch(1, &cfg)]);
    assert_eq!(report.lr_trace, vec![1e-3, 5e-4]);

    for path in [out.last_checkpoint(), out.best_checkpoint(), out.report()] {
        assert!(path.exists(), "{} missing", path.display());
    }
    let (reloaded, _) = load_checkpoint(&out.last_checkpoint()).unwrap();
    assert_eq!(param_bits(&reloaded), param_bits(&model));
}

#[test]
fn unfrozen_fit_moves_encoder() {
    let model = PromptSegModel::init(tiny_config(), 3).unwrap();
    let cfg = TrainConfig {
        freeze_encoder: false,
        ..quick(1)
    };
    let report = fit(&model, &tiny_samples(1, 3), &tiny_samples(2, 1), &cfg, None).unwrap();
    assert_ne!(report.encoder_checksum_before, report.encoder_checksum_after);
}

#[test]
fn alpha_zero_distill_step_equals_train_step() {
    let teacher = PromptSegModel::init(tiny_config(), 5).unwrap();
    let a = PromptSegModel::init(tiny_config(), 9).unwrap();
    let b = PromptSegModel::init(tiny_config(), 9).unwrap();
    let batch = tiny_samples(4, 3);
    let train = TrainConfig {
        freeze_encoder: false,
        ..quick(1)
    };
    let mut trainer = Trainer::new(&a, train.clone()).unwrap();
    let mut distiller = Distiller::new(
        &b,
        &teacher,
        DistillConfig {
            alpha: 0.0,
            student: tiny_config(),
            train,
            ..DistillConfig::default()
        },
    )
    .unwrap();
    for _ in 0..2 {
        let t = trainer.train_step(&batch).unwrap();
        let d = distiller.distill_step(&batch).unwrap();
        assert_eq!(t.loss, d.loss);
        assert_eq!(t.loss, d.mask);
        assert_eq!(t.rounds, d.rounds);
    }
    assert_eq!(param_bits(&a), param_bits(&b));
}

#[test]
fn distill_leaves_teacher_untouched_and_reports_ratio() {
    let teacher = PromptSegModel::init(tiny_config(), 5).unwrap();
    let before = param_bits(&teacher);
    let student = sonoseg::model::ModelConfig {
        embed_dim: 8,
        ..tiny_config()
    };
    let cfg = DistillConfig {
        student: student.clone(),
        train: quick(1),
        ..DistillConfig::default()
    };
    let (s, report) = distill(&teacher, &tiny_samples(1, 3), &tiny_samples(2, 1), &cfg, None).unwrap();
    assert_eq!(before, param_bits(&teacher));
    assert_eq!(report.teacher_checksum, report.teacher_checksum_after);
    let count = |m: &PromptSegModel| -> usize {
        m.params().values().map(|v| v.as_tensor().elem_count()).sum()
    };
    assert_eq!(report.student_parameters, count(&s));
    assert_eq!(report.teacher_parameters, count(&teacher));
    assert_eq!(
        report.size_ratio,
        count(&s) as f64 / count(&teacher) as f64
    );
    // The tiny student is not under a third of the tiny teacher; that is a warning, not an error.
    assert!(report.size_ratio > 1.0 / 3.0);
    assert!(!report.warnings.is_empty());
}

#[test]
fn empty_ground_truth_is_skipped_with_count() {
    let model = PromptSegModel::init(tiny_config(), 3).unwrap();
    let mut samples = tiny_samples(1, 2);
    samples[0].gt = BinaryMask::empty(samples[0].gt.height(), samples[0].gt.width());
    let report = fit(&model, &samples, &tiny_samples(2, 1), &quick(1), None).unwrap();
    assert_eq!(report.skipped_samples, 1);
}

#[test]
fn empty_training_set_is_rejected() {
    let model = PromptSegModel::init(tiny_config(), 3).unwrap();
    assert!(matches!(
        fit(&model, &[], &[], &quick(1), None),
        Err(Error::Empty(_))
    ));
}
