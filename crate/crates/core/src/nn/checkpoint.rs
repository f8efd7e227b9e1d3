use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::train::{EpochStats, TrainConfig, Trainer};
use crate::arch::{build, ArchSpec};
use crate::calib::CalibTable;
use crate::error::{Error, Result};
use crate::quant::QuantSpec;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub spec: QuantSpec,
    pub clip_ratio: Option<f64>,
}

/// Position of the training ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, stored as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad RNG word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: usize,
    pub epoch: usize,
    pub momentum: BTreeMap<String, Vec<f64>>,
}

/// Complete training state as JSON arrays, enough to resume bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch_id: String,
    pub width_multiplier: f64,
    pub arch: ArchSpec,
    pub quant: BTreeMap<String, LayerQuant>,
    pub weights: BTreeMap<String, Vec<f64>>,
    pub buffers: BTreeMap<String, Vec<f64>>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub config: TrainConfig,
    pub history: Vec<EpochStats>,
    pub loss_trace: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Self {
        let mut model = t.model.clone();
        let mut weights = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        model.visit_params_mut(&mut |name, p| {
            weights.insert(name.to_string(), p.value.clone());
            momentum.insert(name.to_string(), p.momentum.clone());
        });
        Self {
            version: CHECKPOINT_VERSION,
            arch_id: t.model.spec.id(),
            width_multiplier: t.model.spec.width_multiplier,
            arch: t.model.spec.clone(),
            quant: t
                .model
                .quant_map()
                .into_iter()
                .map(|(k, (spec, clip_ratio))| (k, LayerQuant { spec, clip_ratio }))
                .collect(),
            weights,
            buffers: t.model.buffers(),
            optimizer: OptimizerState { step: t.step, epoch: t.epoch, momentum },
            rng: RngState::capture(&t.rng),
            config: t.config.clone(),
            history: t.history.clone(),
            loss_trace: t.loss_trace.clone(),
        }
    }

    /// Rebuilds the trainer. Clip ratios come from the checkpoint, not from a table.
    pub fn restore(&self, train_len: usize) -> Result<Trainer> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let net = build(&self.arch)?;
        let mut model = Model::from_network(&net, &CalibTable::builtin(), &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, q) in &self.quant {
            model.set_clip_ratio(name, q.clip_ratio);
        }
        let mut missing = None;
        model.visit_params_mut(&mut |name, p| match (self.weights.get(name), self.optimizer.momentum.get(name)) {
            (Some(w), Some(m)) if w.len() == p.len() && m.len() == p.len() => {
                p.value.copy_from_slice(w);
                p.momentum.copy_from_slice(m);
            }
            _ => {
                missing.get_or_insert_with(|| name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::shape(name, "missing or mis-sized tensor in checkpoint"));
        }
        model.load_buffers(&self.buffers)?;
        let mut t = Trainer::new(model, self.config.clone(), train_len)?;
        t.step = self.optimizer.step;
        t.epoch = self.optimizer.epoch;
        t.rng = self.rng.restore()?;
        t.history = self.history.clone();
        t.loss_trace = self.loss_trace.clone();
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
