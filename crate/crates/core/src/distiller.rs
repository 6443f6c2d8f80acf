//! Teacher-to-student distillation with best-mask teacher targets.

use std::collections::HashMap;

use candle_nn::{AdamW, Optimizer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::MaskLogits;
use crate::io::Sample;
use crate::metrics::dsc;
use crate::model::{save_checkpoint, ImageEmbedding, ModelConfig, PromptSegModel, Provenance};
use crate::objectives::{student_loss_grad, LossConfig};
use crate::prompting::{initial_prompt, Mode};
use crate::trainer::{
    adam, interaction_rounds, lr_at_epoch, surrogate, validation_dsc, write_report, RunOutputs,
    TrainConfig,
};

/// Largest student/teacher parameter ratio accepted without a warning.
pub const MAX_SIZE_RATIO: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub student: ModelConfig,
    pub student_seed: u64,
    /// Schedule, rounds and sampler; `freeze_encoder` is ignored since the student trains
    /// end to end.
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            student: ModelConfig::student(),
            student_seed: 1,
            train: TrainConfig::default(),
        }
    }
}

impl DistillConfig {
    fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            ..self.train.loss
        }
    }
}

/// Logits of the round with the highest DSC; the first such round wins ties.
pub fn select_best_teacher_output(rounds: &[(MaskLogits, f64)]) -> Result<&MaskLogits> {
    let mut best: Option<&(MaskLogits, f64)> = None;
    for r in rounds {
        if best.is_none_or(|b| r.1 > b.1) {
            best = Some(r);
        }
    }
    best.map(|(l, _)| l).ok_or(Error::Empty("teacher trace"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillStepOutcome {
    pub loss: f64,
    pub mask: f64,
    pub distill: f64,
    pub rounds: usize,
    pub skipped: usize,
}

pub struct Distiller<'a> {
    student: &'a PromptSegModel,
    teacher: &'a PromptSegModel,
    config: DistillConfig,
    loss: LossConfig,
    optimizer: AdamW,
    teacher_cache: HashMap<String, ImageEmbedding>,
    rng: ChaCha8Rng,
    teacher_rng: ChaCha8Rng,
}

impl<'a> Distiller<'a> {
    pub fn new(
        student: &'a PromptSegModel,
        teacher: &'a PromptSegModel,
        config: DistillConfig,
    ) -> Result<Self> {
        config.train.validate()?;
        let loss = config.loss();
        loss.validate()?;
        if student.config().patch_size != teacher.config().patch_size {
            return Err(Error::ConfigMismatch(
                "student and teacher must share a patch size".into(),
            ));
        }
        let optimizer = adam(student.trainable_vars(true), lr_at_epoch(0, &config.train))?;
        let rng = ChaCha8Rng::seed_from_u64(config.train.rng_seed);
        let mut teacher_rng = ChaCha8Rng::seed_from_u64(config.train.rng_seed);
        teacher_rng.set_stream(1);
        Ok(Self {
            student,
            teacher,
            config,
            loss,
            optimizer,
            teacher_cache: HashMap::new(),
            rng,
            teacher_rng,
        })
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.optimizer
            .set_learning_rate(lr_at_epoch(epoch, &self.config.train));
    }

    fn teacher_embedding(&mut self, sample: &Sample) -> Result<ImageEmbedding> {
        if let Some(e) = self.teacher_cache.get(&sample.id) {
            return Ok(e.clone());
        }
        let e = self.teacher.encode_image(&sample.image)?.detach();
        self.teacher_cache.insert(sample.id.clone(), e.clone());
        Ok(e)
    }

    /// Best-mask target for one sample: teacher rounds from `first`, clicks from the
    /// teacher's own errors.
    fn teacher_target(&mut self, sample: &Sample, first: &crate::PromptSet) -> Result<MaskLogits> {
        let embedding = self.teacher_embedding(sample)?;
        let rounds = interaction_rounds(
            self.teacher,
            &embedding,
            &sample.gt,
            first.clone(),
            self.config.train.max_prompt_rounds_per_sample,
            &mut self.teacher_rng,
        )?;
        let threshold = self.teacher.config().mask_threshold;
        let scored = rounds
            .into_iter()
            .map(|r| {
                let d = dsc(&r.logits.binarize(threshold), &sample.gt)?;
                Ok((r.logits, d))
            })
            .collect::<Result<Vec<_>>>()?;
        select_best_teacher_output(&scored).cloned()
    }

    pub fn distill_step(&mut self, batch: &[Sample]) -> Result<DistillStepOutcome> {
        let mut graphs = Vec::new();
        let mut skipped = 0;
        for sample in batch {
            if sample.gt.is_empty() {
                tracing::warn!(sample = %sample.id, "empty ground truth; sample skipped");
                skipped += 1;
                continue;
            }
            let first = initial_prompt(
                &sample.gt,
                &self.config.train.sampler,
                Mode::Train,
                &mut self.rng,
            )?;
            let target = self.teacher_target(sample, &first)?;
            let embedding = self.student.encode_image(&sample.image)?;
            let rounds = interaction_rounds(
                self.student,
                &embedding,
                &sample.gt,
                first,
                self.config.train.max_prompt_rounds_per_sample,
                &mut self.rng,
            )?;
            graphs.push((rounds, &sample.gt, target));
        }
        let total_rounds: usize = graphs.iter().map(|(r, _, _)| r.len()).sum();
        let mut out = DistillStepOutcome {
            loss: 0.0,
            mask: 0.0,
            distill: 0.0,
            rounds: total_rounds,
            skipped,
        };
        if total_rounds == 0 {
            return Ok(out);
        }
        let scale = 1.0 / total_rounds as f64;
        let mut objective = None;
        for (rounds, gt, target) in &graphs {
            for round in rounds {
                let l = student_loss_grad(&round.logits, gt, target, &self.loss)?;
                out.loss += l.total * scale;
                out.mask += l.mask * scale;
                out.distill += l.distill * scale;
                let s = surrogate(&round.tensor, &l.grad, scale)?;
                objective = Some(match objective {
                    None => s,
                    Some(o) => (o + s)?,
                });
            }
        }
        let grads = objective.expect("at least one round").backward()?;
        self.optimizer.step(&grads)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub alpha: f64,
    pub teacher_checksum: String,
    pub teacher_checksum_after: String,
    pub teacher_parameters: usize,
    pub student_parameters: usize,
    pub size_ratio: f64,
    pub epoch_losses: Vec<f64>,
    pub epoch_mask_losses: Vec<f64>,
    pub epoch_distill_losses: Vec<f64>,
    pub val_dsc: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_dsc: Option<f64>,
    pub skipped_samples: usize,
    pub warnings: Vec<String>,
}

impl DistillReport {
    pub fn provenance(&self) -> Provenance {
        Provenance {
            teacher_checksum: self.teacher_checksum.clone(),
            teacher_parameters: self.teacher_parameters,
            size_ratio: self.size_ratio,
            alpha: self.alpha,
        }
    }
}

/// Builds and trains a student against `teacher`; the teacher is never modified.
pub fn distill(
    teacher: &PromptSegModel,
    train: &[Sample],
    val: &[Sample],
    config: &DistillConfig,
    outputs: Option<&RunOutputs>,
) -> Result<(PromptSegModel, DistillReport)> {
    if train.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation samples"));
    }
    let student = PromptSegModel::init_with_dtype(
        config.student.clone(),
        config.student_seed,
        teacher.dtype(),
    )?;
    let teacher_parameters = teacher.parameter_partition().total;
    let student_parameters = student.parameter_partition().total;
    let size_ratio = student_parameters as f64 / teacher_parameters as f64;
    let mut report = DistillReport {
        alpha: config.alpha,
        teacher_checksum: teacher.checksum()?,
        teacher_checksum_after: String::new(),
        teacher_parameters,
        student_parameters,
        size_ratio,
        epoch_losses: Vec::new(),
        epoch_mask_losses: Vec::new(),
        epoch_distill_losses: Vec::new(),
        val_dsc: Vec::new(),
        lr_trace: Vec::new(),
        best_epoch: None,
        best_val_dsc: None,
        skipped_samples: 0,
        warnings: Vec::new(),
    };
    if size_ratio > MAX_SIZE_RATIO {
        let msg = format!(
            "student has {student_parameters} parameters, {size_ratio:.3} of the teacher's \
             {teacher_parameters}; expected at most 1/3"
        );
        tracing::warn!("{msg}");
        report.warnings.push(msg);
    }
    let mut distiller = Distiller::new(&student, teacher, config.clone())?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.train.rng_seed ^ 0x5eed);
    for epoch in 0..config.train.epochs {
        distiller.set_epoch(epoch);
        report.lr_trace.push(lr_at_epoch(epoch, &config.train));
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut mask, mut kl, mut rounds) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.train.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let step = distiller.distill_step(&batch)?;
            let n = step.rounds as f64;
            total += step.loss * n;
            mask += step.mask * n;
            kl += step.distill * n;
            rounds += step.rounds;
            report.skipped_samples += step.skipped;
        }
        let denom = rounds.max(1) as f64;
        report.epoch_losses.push(total / denom);
        report.epoch_mask_losses.push(mask / denom);
        report.epoch_distill_losses.push(kl / denom);
        let val_dsc = validation_dsc(&student, val, config.train.val_budget, config.train.rng_seed)?;
        tracing::info!(epoch, loss = total / denom, val_dsc, "distillation epoch finished");
        report.val_dsc.push(val_dsc);
        let improved = report.best_val_dsc.is_none_or(|b| val_dsc > b);
        if improved {
            report.best_epoch = Some(epoch);
            report.best_val_dsc = Some(val_dsc);
        }
        if let Some(out) = outputs {
            save_checkpoint(&student, &out.last_checkpoint(), Some(report.provenance()))?;
            if improved {
                save_checkpoint(&student, &out.best_checkpoint(), Some(report.provenance()))?;
            }
        }
    }
    report.teacher_checksum_after = teacher.checksum()?;
    if report.teacher_checksum_after != report.teacher_checksum {
        return Err(Error::Checkpoint("teacher weights changed during distillation".into()));
    }
    if let Some(out) = outputs {
        if config.train.epochs == 0 {
            save_checkpoint(&student, &out.last_checkpoint(), Some(report.provenance()))?;
        }
        write_report(&report, &out.dir.join("distill_report.json"))?;
    }
    Ok((student, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(v: f64) -> MaskLogits {
        MaskLogits::filled(1, 1, v)
    }

    #[test]
    fn best_round_selection() {
        let r = [(logits(1.0), 0.7), (logits(2.0), 0.9), (logits(3.0), 0.85)];
        assert_eq!(select_best_teacher_output(&r).unwrap(), &logits(2.0));
        assert_eq!(select_best_teacher_output(&r[..1]).unwrap(), &logits(1.0));
        let tie = [(logits(1.0), 0.8), (logits(2.0), 0.8)];
        assert_eq!(select_best_teacher_output(&tie).unwrap(), &logits(1.0));
        assert!(select_best_teacher_output(&[]).is_err());
    }

    #[test]
    fn default_student_is_under_a_third() {
        let ratio = ModelConfig::student().parameter_count() as f64
            / ModelConfig::teacher().parameter_count() as f64;
        assert!(ratio <= MAX_SIZE_RATIO, "{ratio}");
    }
}
