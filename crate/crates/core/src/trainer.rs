//! Fine-tuning of the prompt encoder and mask decoder with simulated interaction rounds.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, MaskLogits, PromptSet};
use crate::io::{write_atomic, Sample};
use crate::metrics::{evaluate_dataset, EvalConfig};
use crate::model::{save_checkpoint, tensor_to_logits, ImageEmbedding, PromptSegModel};
use crate::objectives::{dicefocal_loss_grad, LossConfig};
use crate::prompting::{initial_prompt, next_click, Click, Mode, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_prompt_rounds_per_sample: usize,
    pub freeze_encoder: bool,
    pub rng_seed: u64,
    /// Click budget of the validation sessions.
    pub val_budget: usize,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay_factor: 0.5,
            decay_every_epochs: 25,
            epochs: 20,
            batch_size: 4,
            max_prompt_rounds_per_sample: 3,
            freeze_encoder: true,
            rng_seed: 0,
            val_budget: 3,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if self.decay_every_epochs == 0 {
            return Err(Error::Config("decay_every_epochs must be positive".into()));
        }
        if self.batch_size == 0 || self.max_prompt_rounds_per_sample == 0 || self.val_budget == 0 {
            return Err(Error::Config(
                "batch_size, max_prompt_rounds_per_sample and val_budget must be positive".into(),
            ));
        }
        self.loss.validate()?;
        self.sampler.validate()
    }
}

pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> f64 {
    let steps = (epoch / config.decay_every_epochs) as i32;
    config.learning_rate * config.decay_factor.powi(steps)
}

/// One differentiable prediction of an interaction round.
pub(crate) struct Round {
    pub tensor: Tensor,
    pub logits: MaskLogits,
    #[cfg_attr(not(test), allow(dead_code))]
    pub prompts: PromptSet,
}

/// Runs `rounds` predictions: the first with `first`, each later one adding a click sampled
/// from the previous prediction's errors. Click placement never carries gradient.
pub(crate) fn interaction_rounds(
    model: &PromptSegModel,
    embedding: &ImageEmbedding,
    gt: &BinaryMask,
    first: PromptSet,
    rounds: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Round>> {
    let mut out: Vec<Round> = Vec::with_capacity(rounds);
    let mut prompts = first;
    for r in 0..rounds {
        if r > 0 {
            let prev = &out[r - 1].logits;
            let pred = prev.binarize(model.config().mask_threshold);
            match next_click(&pred, gt, Mode::Train, rng)? {
                Click::Done => break,
                Click::Point(p) => prompts = prompts.with_point(p),
            }
        }
        let pe = model.encode_prompts(&prompts, embedding.image_shape())?;
        let tensor = model.decode_mask_tensor(embedding, &pe)?;
        let logits = tensor_to_logits(&tensor)?;
        out.push(Round {
            tensor,
            logits,
            prompts: prompts.clone(),
        });
    }
    Ok(out)
}

/// `sum(tensor * grad)`, whose gradient with respect to `tensor` is `grad`.
pub(crate) fn surrogate(tensor: &Tensor, grad: &[f64], scale: f64) -> Result<Tensor> {
    let (h, w) = tensor.dims2()?;
    let g: Vec<f64> = grad.iter().map(|v| v * scale).collect();
    let g = Tensor::from_vec(g, (h, w), tensor.device())?.to_dtype(tensor.dtype())?;
    Ok((tensor * g)?.sum_all()?)
}

pub(crate) fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Mean loss over every round of every trained sample.
    pub loss: f64,
    pub rounds: usize,
    pub skipped: usize,
}

/// Optimizer state plus the embedding cache used while the encoder is frozen.
pub struct Trainer<'m> {
    model: &'m PromptSegModel,
    config: TrainConfig,
    optimizer: AdamW,
    cache: HashMap<String, ImageEmbedding>,
    rng: ChaCha8Rng,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m PromptSegModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let vars = model.trainable_vars(!config.freeze_encoder);
        let optimizer = adam(vars, lr_at_epoch(0, &config))?;
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(Self {
            model,
            config,
            optimizer,
            cache: HashMap::new(),
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.optimizer
            .set_learning_rate(lr_at_epoch(epoch, &self.config));
    }

    fn embedding(&mut self, sample: &Sample) -> Result<ImageEmbedding> {
        if !self.config.freeze_encoder {
            return self.model.encode_image(&sample.image);
        }
        if let Some(e) = self.cache.get(&sample.id) {
            return Ok(e.clone());
        }
        let e = self.model.encode_image(&sample.image)?.detach();
        self.cache.insert(sample.id.clone(), e.clone());
        Ok(e)
    }

    /// One optimizer update over `batch`; samples with empty ground truth are skipped.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<StepOutcome> {
        let mut graphs = Vec::new();
        let mut skipped = 0;
        for sample in batch {
            if sample.gt.is_empty() {
                tracing::warn!(sample = %sample.id, "empty ground truth; sample skipped");
                skipped += 1;
                continue;
            }
            let embedding = self.embedding(sample)?;
            let first = initial_prompt(&sample.gt, &self.config.sampler, Mode::Train, &mut self.rng)?;
            let rounds = interaction_rounds(
                self.model,
                &embedding,
                &sample.gt,
                first,
                self.config.max_prompt_rounds_per_sample,
                &mut self.rng,
            )?;
            graphs.push((rounds, &sample.gt));
        }
        let total_rounds: usize = graphs.iter().map(|(r, _)| r.len()).sum();
        if total_rounds == 0 {
            return Ok(StepOutcome {
                loss: 0.0,
                rounds: 0,
                skipped,
            });
        }
        let scale = 1.0 / total_rounds as f64;
        let mut loss = 0.0;
        let mut objective: Option<Tensor> = None;
        for (rounds, gt) in &graphs {
            for round in rounds {
                let lg = dicefocal_loss_grad(&round.logits, gt, &self.config.loss)?;
                loss += lg.value * scale;
                let s = surrogate(&round.tensor, &lg.grad, scale)?;
                objective = Some(match objective {
                    None => s,
                    Some(o) => (o + s)?,
                });
            }
        }
        let grads = objective.expect("at least one round").backward()?;
        self.optimizer.step(&grads)?;
        Ok(StepOutcome {
            loss,
            rounds: total_rounds,
            skipped,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub val_dsc: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
    pub best_epoch: Option<usize>,
    pub best_val_dsc: Option<f64>,
    pub skipped_samples: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Where `fit` writes checkpoints and the report.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
}

impl RunOutputs {
    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.safetensors")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.safetensors")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("train_report.json")
    }
}

/// Mean final DSC of deterministic eval sessions at the given click budget.
pub fn validation_dsc(model: &PromptSegModel, val: &[Sample], budget: usize, seed: u64) -> Result<f64> {
    let config = EvalConfig {
        budget,
        cap: budget.max(20),
        seed,
        ..Default::default()
    };
    Ok(evaluate_dataset(model, val, "validation", &config)?
        .report
        .final_dsc())
}

/// Trains for `config.epochs` epochs. With `outputs`, the latest and the best-validation
/// weights are checkpointed after every epoch and the report is written at the end.
pub fn fit(
    model: &PromptSegModel,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    outputs: Option<&RunOutputs>,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation samples"));
    }
    let before = model.encoder_checksum()?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x5eed);
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        val_dsc: Vec::new(),
        lr_trace: Vec::new(),
        encoder_checksum_before: before.clone(),
        encoder_checksum_after: String::new(),
        best_epoch: None,
        best_val_dsc: None,
        skipped_samples: 0,
        warnings: Vec::new(),
    };
    if let Some(out) = outputs {
        save_checkpoint(model, &out.last_checkpoint(), None)?;
    }
    for epoch in 0..config.epochs {
        trainer.set_epoch(epoch);
        report.lr_trace.push(lr_at_epoch(epoch, config));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut round_sum = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let step = trainer.train_step(&batch)?;
            loss_sum += step.loss * step.rounds as f64;
            round_sum += step.rounds;
            report.skipped_samples += step.skipped;
        }
        let epoch_loss = if round_sum > 0 {
            loss_sum / round_sum as f64
        } else {
            0.0
        };
        let val_dsc = validation_dsc(model, val, config.val_budget, config.rng_seed)?;
        tracing::info!(epoch, loss = epoch_loss, val_dsc, "epoch finished");
        report.epoch_losses.push(epoch_loss);
        report.val_dsc.push(val_dsc);
        let improved = report.best_val_dsc.is_none_or(|b| val_dsc > b);
        if improved {
            report.best_epoch = Some(epoch);
            report.best_val_dsc = Some(val_dsc);
        }
        if let Some(out) = outputs {
            save_checkpoint(model, &out.last_checkpoint(), None)?;
            if improved {
                save_checkpoint(model, &out.best_checkpoint(), None)?;
            }
        }
    }
    report.encoder_checksum_after = model.encoder_checksum()?;
    if config.freeze_encoder && report.encoder_checksum_after != before {
        return Err(Error::Checkpoint(
            "encoder weights changed while frozen".into(),
        ));
    }
    if let Some(out) = outputs {
        write_report(&report, &out.report())?;
    }
    Ok(report)
}

pub(crate) fn write_report(report: &impl Serialize, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps() {
        let c = TrainConfig::default();
        assert_eq!(lr_at_epoch(0, &c), 1e-4);
        assert_eq!(lr_at_epoch(24, &c), 1e-4);
        assert_eq!(lr_at_epoch(25, &c), 5e-5);
        assert_eq!(lr_at_epoch(50, &c), 2.5e-5);
    }

    #[test]
    fn rounds_grow_prompts_by_one_point() {
        use crate::synth::{generate_samples, SynthConfig};
        let sample = &generate_samples(&SynthConfig::default(), 1).unwrap()[0];
        let model = PromptSegModel::init(crate::model::ModelConfig::teacher(), 0).unwrap();
        let emb = model.encode_image(&sample.image).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = initial_prompt(&sample.gt, &SamplerConfig::default(), Mode::Eval, &mut rng).unwrap();
        let rounds = interaction_rounds(&model, &emb, &sample.gt, first, 4, &mut rng).unwrap();
        assert_eq!(rounds.len(), 4);
        for pair in rounds.windows(2) {
            assert_eq!(pair[1].prompts.points.len(), pair[0].prompts.points.len() + 1);
            assert_eq!(pair[1].prompts.points[..pair[0].prompts.points.len()], pair[0].prompts.points[..]);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let c = TrainConfig {
            decay_factor: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
