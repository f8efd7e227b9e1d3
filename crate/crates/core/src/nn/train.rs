use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::layers::{argmax_rows, softmax_xent};
use super::model::Model;
use super::optim::{LrSchedule, Sgd};
use crate::data::{augment_crop_flip, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Random crop and horizontal flip on training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            warmup_epochs: 5,
            epochs: 300,
            batch_size: 128,
            weight_decay: 5e-4,
            momentum: 0.9,
            label_smoothing: 0.0,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    /// Large-dataset recipe: batch 256, weight decay 4e-5, smoothing 0.1.
    pub fn imagenet_style() -> Self {
        Self { batch_size: 256, weight_decay: 4e-5, label_smoothing: 0.1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("train config: {what}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        Ok(())
    }
}

/// What a hook sees after every optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    /// 1-based epoch.
    pub epoch: usize,
    /// Optimizer steps taken so far, including this one.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub in_warmup: bool,
}

pub trait TrainHook {
    fn after_step(&mut self, info: &StepInfo, model: &Model);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    /// Mean loss of every optimizer step.
    pub loss_trace: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub final_val_acc: f64,
}

impl TrainReport {
    pub fn val_trace(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.val_acc).collect()
    }
}

/// Resumable training state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub schedule: LrSchedule,
    pub optimizer: Sgd,
    pub rng: ChaCha8Rng,
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    pub loss_trace: Vec<f64>,
}

pub fn accuracy(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        correct += model.predict(&x)?.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        if train_len == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let steps_per_epoch = train_len.div_ceil(config.batch_size);
        Ok(Self {
            schedule: LrSchedule::new(config.lr, config.warmup_epochs, config.epochs, steps_per_epoch),
            optimizer: Sgd { momentum: config.momentum, weight_decay: config.weight_decay },
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            step: 0,
            epoch: 0,
            history: Vec::new(),
            loss_trace: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn run_epoch(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        hooks: &mut [&mut dyn TrainHook],
    ) -> Result<EpochStats> {
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0, 0.0);
        for chunk in order.chunks(self.config.batch_size) {
            let (mut x, y) = train.batch(chunk);
            if self.config.augment {
                augment_crop_flip(&mut x, &mut self.rng);
            }
            lr = self.schedule.at(self.step);
            self.model.zero_grad();
            let logits = self.model.forward(&x, true)?;
            let (loss, dlogits) = softmax_xent(&logits, &y, self.config.label_smoothing)?;
            if !loss.is_finite() {
                let layer = self.model.first_nonfinite.clone().unwrap_or_else(|| "loss".into());
                return Err(Error::NonFiniteLoss { epoch, layer });
            }
            correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
            loss_sum += loss * chunk.len() as f64;
            self.model.backward(&dlogits)?;
            let opt = self.optimizer;
            self.model.visit_params_mut(&mut |_, p| opt.step(p, lr));
            self.step += 1;
            self.loss_trace.push(loss);
            let info =
                StepInfo { epoch, step: self.step, lr, loss, in_warmup: self.step <= self.schedule.warmup_steps };
            for h in hooks.iter_mut() {
                h.after_step(&info, &self.model);
            }
        }
        let stats = EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: 100.0 * correct as f64 / train.len() as f64,
            val_acc: accuracy(&mut self.model, val, self.config.batch_size)?,
        };
        log::debug!(
            "{} epoch {epoch}: loss {:.4} train {:.2}% val {:.2}%",
            self.model.spec.id(),
            stats.train_loss,
            stats.train_acc,
            stats.val_acc
        );
        self.epoch = epoch;
        self.history.push(stats.clone());
        Ok(stats)
    }

    /// Trains to completion, writing a checkpoint to `best_path` whenever
    /// validation accuracy improves.
    pub fn run(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        hooks: &mut [&mut dyn TrainHook],
        best_path: Option<&Path>,
    ) -> Result<TrainReport> {
        let mut best = self.history.iter().map(|e| e.val_acc).fold(f64::NEG_INFINITY, f64::max);
        while !self.is_done() {
            let stats = self.run_epoch(train, val, hooks)?;
            if stats.val_acc > best {
                best = stats.val_acc;
                if let Some(path) = best_path {
                    self.checkpoint().save(path)?;
                }
            }
        }
        Ok(self.report())
    }

    pub fn report(&self) -> TrainReport {
        let (best_epoch, best_val_acc) = self.history.iter().fold((0, f64::NEG_INFINITY), |acc, e| {
            if e.val_acc > acc.1 {
                (e.epoch, e.val_acc)
            } else {
                acc
            }
        });
        TrainReport {
            history: self.history.clone(),
            loss_trace: self.loss_trace.clone(),
            best_epoch,
            best_val_acc,
            final_val_acc: self.history.last().map_or(0.0, |e| e.val_acc),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build, ArchSpec, BitwidthMap, Family};
    use crate::calib::CalibTable;
    use crate::data::separable;

    fn small(bits: Option<u8>) -> Model {
        let map = match bits {
            Some(b) => BitwidthMap::uniform(b),
            None => BitwidthMap::full_precision(),
        };
        let spec = ArchSpec::new(Family::TinyVgg { separable: false }, 0.25, map).with_input([3, 8, 8], 3);
        Model::from_network(&build(&spec).unwrap(), &CalibTable::builtin(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, warmup_epochs: 1, batch_size: 16, ..TrainConfig::default() }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { warmup_epochs: 5, epochs: 5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::imagenet_style().validate().is_ok());
    }

    #[test]
    fn master_weights_stay_off_grid() {
        let data = separable(48, 3, 8, 0);
        let mut t = Trainer::new(small(Some(2)), config(2), data.len()).unwrap();
        t.run(&data, &data, &mut [], None).unwrap();
        let views = t.model.weight_views();
        let interior = views.iter().find(|v| v.role == crate::arch::LayerRole::AllToAll).unwrap();
        let distinct: std::collections::BTreeSet<u64> =
            interior.weights[..interior.fan_in].iter().map(|w| w.abs().to_bits()).collect();
        assert!(distinct.len() > 3, "master weights collapsed onto the ternary grid");
    }

    #[test]
    fn nan_input_names_first_bad_layer() {
        let mut data = separable(16, 3, 8, 0);
        data.images[5] = f64::NAN;
        let mut t = Trainer::new(small(None), config(2), data.len()).unwrap();
        match t.run_epoch(&data, &data, &mut []) {
            Err(Error::NonFiniteLoss { epoch, layer }) => {
                assert_eq!(epoch, 1);
                assert_eq!(layer, "stem");
            }
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }
}
