//! Minibatch training, evaluation, checkpoints and ablation sweeps.

mod ablation;
mod checkpoint;
mod optim;

pub use ablation::{run_ablation, AblationAxes, AblationRow, AblationTable};
pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint, CheckpointHeader};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind, OptimizerSettings, ADAM_BETA2, ADAM_EPS};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resize_batch, SegmentationSample};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossMode, LossOptions};
use crate::metrics::{confusion_counts, decide, evaluate_masks, iou_and_dice, Counts, LabelMap, MetricsReport};
use crate::model::DaTransUnet;
use crate::nn::{ForwardCtx, Module};
use crate::seed::derive_seed;
use crate::tensor::{no_grad, Scalar, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossModeSetting {
    /// Binary for a one-channel head, multiclass otherwise.
    #[default]
    Auto,
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluate every this many epochs (0 disables periodic evaluation).
    pub eval_every: usize,
    pub seed: u64,
    pub loss: LossModeSetting,
    pub pos_weight: f64,
    pub dice_smooth: f64,
    /// Execution is single-threaded, so runs are always reproducible; the flag is recorded for reference.
    pub deterministic: bool,
    pub clip_grad_norm: Option<f64>,
    pub augment: bool,
    /// Stop once the evaluated (or, without an eval set, training) mean Dice reaches this value.
    pub target_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 50,
            eval_every: 1,
            seed: 0,
            loss: LossModeSetting::Auto,
            pos_weight: 1.0,
            dice_smooth: 1.0,
            deterministic: true,
            clip_grad_norm: None,
            augment: false,
            target_dice: None,
        }
    }
}

impl TrainConfig {
    /// SGD at 0.01, the multi-organ CT setting.
    pub fn synapse() -> Self {
        TrainConfig { optimizer: OptimizerKind::Sgd, learning_rate: 0.01, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 || self.pos_weight <= 0.0 || self.dice_smooth < 0.0 {
            return Err(Error::Config("weight_decay, pos_weight and dice_smooth must be non-negative".into()));
        }
        Ok(())
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions { pos_weight: self.pos_weight, smooth: self.dice_smooth }
    }

    pub fn loss_mode(&self, head_channels: usize) -> Result<LossMode> {
        let natural = LossMode::for_channels(head_channels);
        let chosen = match self.loss {
            LossModeSetting::Auto => natural,
            LossModeSetting::Binary => LossMode::Binary,
            LossModeSetting::Multiclass => LossMode::Multiclass,
        };
        if chosen != natural {
            return Err(Error::Config(format!("loss mode {chosen:?} does not fit a {head_channels}-channel head")));
        }
        Ok(chosen)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_hd: f64,
    pub mean_hd95: f64,
}

impl From<&MetricsReport> for EvalSummary {
    fn from(r: &MetricsReport) -> Self {
        EvalSummary { mean_dice: r.mean_dice, mean_iou: r.mean_iou, mean_hd: r.mean_hd, mean_hd95: r.mean_hd95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_cross_entropy: f64,
    pub train_dice_loss: f64,
    /// Mean foreground Dice of the training-mode predictions made during the epoch.
    pub train_dice: f64,
    pub seconds: f64,
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub final_eval: Option<MetricsReport>,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// Columns: epoch, train_loss, train_ce, train_dice_loss, train_dice, eval_dice, eval_iou, eval_hd, eval_hd95, seconds.
    pub fn write_curves_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Data(format!("writing curves csv: {e}"));
        w.write_record([
            "epoch",
            "train_loss",
            "train_ce",
            "train_dice_loss",
            "train_dice",
            "eval_dice",
            "eval_iou",
            "eval_hd",
            "eval_hd95",
            "seconds",
        ])
        .map_err(err)?;
        for e in &self.epochs {
            let opt = |f: fn(&EvalSummary) -> f64| e.eval.as_ref().map(f).map_or(String::new(), |v| v.to_string());
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.train_cross_entropy.to_string(),
                e.train_dice_loss.to_string(),
                e.train_dice.to_string(),
                opt(|s| s.mean_dice),
                opt(|s| s.mean_iou),
                opt(|s| s.mean_hd),
                opt(|s| s.mean_hd95),
                e.seconds.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io("curves csv", e))?;
        Ok(())
    }

    /// Plain-text TOML summary of the run.
    pub fn summary_toml(&self) -> String {
        #[derive(Serialize)]
        struct Summary {
            epochs: usize,
            final_train_loss: Option<f64>,
            final_train_dice: Option<f64>,
            checkpoint: Option<String>,
            final_eval: Option<EvalSummary>,
        }
        let last = self.epochs.last();
        let s = Summary {
            epochs: self.epochs.len(),
            final_train_loss: last.map(|e| e.train_loss),
            final_train_dice: last.map(|e| e.train_dice),
            checkpoint: self.checkpoint.as_ref().map(|p| p.display().to_string()),
            final_eval: self.final_eval.as_ref().map(EvalSummary::from),
        };
        toml::to_string(&s).unwrap_or_default()
    }
}

/// Owns a model and its optimizer; `epoch` counts completed epochs.
pub struct Trainer<F: Scalar> {
    pub model: DaTransUnet<F>,
    pub optimizer: Optimizer<F>,
    pub config: TrainConfig,
    pub epoch: usize,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: DaTransUnet<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        config.loss_mode(model.config().num_classes)?;
        let optimizer = Optimizer::new(config.optimizer_settings(), &model.param_list());
        Ok(Trainer { model, optimizer, config, epoch: 0 })
    }

    /// Continues from a checkpoint directory. The optimizer kind must match; other settings come from `config`.
    pub fn resume(dir: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ck = load_checkpoint::<F>(dir, None)?;
        if ck.optimizer.settings.kind != config.optimizer {
            return Err(Error::Incompatible {
                field: "optimizer.kind".into(),
                detail: format!(
                    "checkpoint uses {:?}, config asks for {:?}",
                    ck.optimizer.settings.kind, config.optimizer
                ),
            });
        }
        config.loss_mode(ck.model.config().num_classes)?;
        let mut optimizer = ck.optimizer;
        optimizer.settings = config.optimizer_settings();
        Ok(Trainer { model: ck.model, optimizer, config, epoch: ck.epoch })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.model, &self.optimizer, self.epoch)
    }

    fn check_labels(&self, samples: &[SegmentationSample]) -> Result<()> {
        let classes = self.model.config().label_classes();
        samples.iter().try_for_each(|s| s.check(classes))
    }

    /// One pass over `samples` in a seeded order; returns the epoch record without evaluation.
    pub fn train_epoch(&mut self, samples: &[SegmentationSample]) -> Result<EpochRecord> {
        self.check_labels(samples)?;
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let started = Instant::now();
        let epoch = self.epoch;
        let seed = self.config.seed;
        let size = self.model.config().input_size;
        let classes = self.model.config().label_classes();
        let mode = self.config.loss_mode(self.model.config().num_classes)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));

        let (mut loss_sum, mut ce_sum, mut dice_sum) = (0.0, 0.0, 0.0);
        let mut counts = vec![Counts::default(); classes];
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let batch_seed = |stream: u64| derive_seed(seed, &[epoch as u64, b as u64, stream]);
            let augmented: Vec<SegmentationSample>;
            let picked: Vec<&SegmentationSample> = if self.config.augment {
                let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(1));
                augmented = idx.iter().map(|&i| samples[i].augmented(&mut rng)).collect();
                augmented.iter().collect()
            } else {
                idx.iter().map(|&i| &samples[i]).collect()
            };
            let batch = resize_batch::<F>(&picked, size)?;
            let mut ctx = ForwardCtx::train(batch_seed(0));

            let params = self.model.param_list();
            params.iter().for_each(|p| p.zero_grad());
            let non_finite = |model: &DaTransUnet<F>| Error::NonFiniteLoss {
                epoch,
                batch: b,
                param_norm: model
                    .param_list()
                    .iter()
                    .flat_map(|p| p.data().iter())
                    .map(|v| v.as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt(),
            };
            let step = self.model.forward(&batch.images, &mut ctx).and_then(|logits| {
                Ok((combined_loss(&logits, &batch.labels, mode, self.config.loss_options())?, logits))
            });
            let (loss, logits) = match step {
                Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(non_finite(&self.model)),
                other => other?,
            };
            if !loss.total_value().is_finite() {
                return Err(non_finite(&self.model));
            }
            match loss.total.backward() {
                Err(TensorError::NonFinite { .. }) => return Err(non_finite(&self.model)),
                other => other?,
            }
            let n = batch.len() as f64;
            loss_sum += loss.total_value() * n;
            ce_sum += loss.cross_entropy_value() * n;
            dice_sum += loss.dice_value() * n;
            for (pred, truth) in decide(&logits)?.iter().zip(batch.label_maps()) {
                for (class, c) in counts.iter_mut().enumerate().skip(1) {
                    *c = *c + confusion_counts(pred, &truth, class as u8)?;
                }
            }
            drop(logits);
            drop(loss);

            let mut grads: Vec<Option<Vec<F>>> = params.iter().map(|p| p.grad()).collect();
            drop(params);
            if let Some(max) = self.config.clip_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            let mut params = self.model.param_list_mut();
            self.optimizer.apply_with(&mut params, &grads)?;
        }
        let n = samples.len() as f64;
        let train_dice = counts[1..].iter().map(|&c| iou_and_dice(c).1).sum::<f64>() / (classes - 1) as f64;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_cross_entropy: ce_sum / n,
            train_dice_loss: dice_sum / n,
            train_dice,
            seconds: started.elapsed().as_secs_f64(),
            eval: None,
        })
    }

    /// Eval-mode label predictions at the model's input size.
    pub fn predict(&self, samples: &[SegmentationSample]) -> Result<Vec<LabelMap>> {
        let size = self.model.config().input_size;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.batch_size.max(1)) {
            let batch = resize_batch::<F>(&chunk.iter().collect::<Vec<_>>(), size)?;
            let logits = no_grad(|| self.model.forward(&batch.images, &mut ForwardCtx::eval()))?;
            out.extend(decide(&logits)?);
        }
        Ok(out)
    }

    pub fn evaluate(&self, samples: &[SegmentationSample]) -> Result<MetricsReport> {
        self.check_labels(samples)?;
        let size = self.model.config().input_size;
        let preds = self.predict(samples)?;
        let truths: Vec<LabelMap> = samples
            .iter()
            .map(|s| resize_batch::<F>(&[s], size).map(|b| b.label_maps().remove(0)))
            .collect::<Result<_>>()?;
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        evaluate_masks(&preds, &truths, &ids, self.model.config().label_classes())
    }

    /// Trains until `config.epochs` epochs are complete or the Dice target is met.
    pub fn fit(&mut self, train: &[SegmentationSample], eval: &[SegmentationSample]) -> Result<RunRecord> {
        self.check_labels(eval)?;
        let mut record = RunRecord::default();
        while self.epoch < self.config.epochs {
            let mut rec = self.train_epoch(train)?;
            let last = self.epoch == self.config.epochs;
            let every = self.config.eval_every;
            if !eval.is_empty() && ((every > 0 && self.epoch.is_multiple_of(every)) || last) {
                let report = self.evaluate(eval)?;
                rec.eval = Some(EvalSummary::from(&report));
                record.final_eval = Some(report);
            }
            let reached = match (&rec.eval, self.config.target_dice) {
                (Some(e), Some(t)) => e.mean_dice >= t,
                (None, Some(t)) if eval.is_empty() => rec.train_dice >= t,
                _ => false,
            };
            record.epochs.push(rec);
            if reached {
                break;
            }
        }
        if !eval.is_empty() && record.final_eval.is_none() {
            record.final_eval = Some(self.evaluate(eval)?);
        }
        Ok(record)
    }
}
