use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::Sample;
use super::losses::LossBundle;
use super::metrics::MetricsLog;
use super::model::{TaskSettings, VelvetModel};
use super::optim::{AdamW, CosineSchedule};
use crate::error::{Result, VelvetError};
use crate::report_prep::Vocabulary;

pub const STREAM_DATA: u64 = 1;
pub const STREAM_AUG: u64 = 2;
pub const STREAM_MASK_UNI: u64 = 3;
pub const STREAM_MASK_MM: u64 = 4;
pub const STREAM_MINE: u64 = 5;
const STREAM_VAL: u64 = 64;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RngStreams {
    pub data: ChaCha8Rng,
    pub aug: ChaCha8Rng,
    pub mask_uni: ChaCha8Rng,
    pub mask_mm: ChaCha8Rng,
    pub mine: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            data: stream(seed, STREAM_DATA),
            aug: stream(seed, STREAM_AUG),
            mask_uni: stream(seed, STREAM_MASK_UNI),
            mask_mm: stream(seed, STREAM_MASK_MM),
            mine: stream(seed, STREAM_MINE),
        }
    }

    pub fn positions(&self) -> [u128; 5] {
        [
            self.data.get_word_pos(),
            self.aug.get_word_pos(),
            self.mask_uni.get_word_pos(),
            self.mask_mm.get_word_pos(),
            self.mine.get_word_pos(),
        ]
    }

    pub fn restore(seed: u64, pos: [u128; 5]) -> Self {
        let mut s = Self::new(seed);
        s.data.set_word_pos(pos[0]);
        s.aug.set_word_pos(pos[1]);
        s.mask_uni.set_word_pos(pos[2]);
        s.mask_mm.set_word_pos(pos[3]);
        s.mine.set_word_pos(pos[4]);
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub order: Vec<usize>,
    pub rngs: RngStreams,
    pub opt: AdamW,
    pub best_val: Option<f64>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: VelvetModel,
    pub tasks: TaskSettings,
    pub state: TrainState,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, vocab: Vocabulary, train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        if train.len() < 2 {
            return Err(VelvetError::BatchTooSmall(train.len()));
        }
        let model = VelvetModel::new(&cfg, vocab)?;
        let state = TrainState {
            step: 0,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
            rngs: RngStreams::new(cfg.seed),
            opt: AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay),
            best_val: None,
        };
        Ok(Self { tasks: TaskSettings::from_config(&cfg), cfg, model, state, train, val })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        let (n, b) = (self.train.len(), self.cfg.batch_size);
        (n / b + usize::from(n % b >= 2)) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.max_steps.unwrap_or(self.cfg.epochs * self.steps_per_epoch())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule { lr0: self.cfg.lr, lr_min: self.cfg.lr_min, total: self.total_steps() }
    }

    /// Indices of the next batch; reshuffles at epoch boundaries.
    fn next_batch(&mut self) -> Vec<usize> {
        let s = &mut self.state;
        let remaining = s.order.len().saturating_sub(s.cursor);
        if s.order.is_empty() || remaining < 2 {
            if !s.order.is_empty() {
                s.epoch += 1;
            }
            s.order = (0..self.train.len()).collect();
            s.order.shuffle(&mut s.rngs.data);
            s.cursor = 0;
        }
        let end = (s.cursor + self.cfg.batch_size).min(s.order.len());
        let idx = s.order[s.cursor..end].to_vec();
        s.cursor = end;
        idx
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.schedule().lr(step)
    }

    pub fn train_step(&mut self) -> Result<LossBundle> {
        let idx = self.next_batch();
        let step = self.state.step;
        let samples: Vec<&Sample> = idx.iter().map(|&i| &self.train[i]).collect();
        let r = &mut self.state.rngs;
        let inputs = self.model.prepare(&samples, &self.tasks, &mut r.aug, &mut r.mask_uni, &mut r.mask_mm)?;
        let out = self.model.forward(&inputs, &self.tasks, step, &mut r.mine)?;
        let b = &out.bundle;
        if !b.total.is_finite() || b.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(VelvetError::NonFiniteLoss { step, dump: b.to_json() });
        }
        let grads = out.total.backward()?;
        let lr = self.lr_at(step);
        self.state.opt.step(&self.model.ps, &grads, lr)?;
        self.state.step += 1;
        Ok(out.bundle)
    }

    /// Mean total loss over the held-out pairs, with fixed draws so values
    /// are comparable between calls. `None` without at least two pairs.
    pub fn validate(&self) -> Result<Option<f64>> {
        if self.val.len() < 2 {
            return Ok(None);
        }
        let mut aug = stream(self.cfg.seed, STREAM_VAL + 1);
        let mut uni = stream(self.cfg.seed, STREAM_VAL + 2);
        let mut mm = stream(self.cfg.seed, STREAM_VAL + 3);
        let mut mine = stream(self.cfg.seed, STREAM_VAL + 4);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in self.val.chunks(self.cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let samples: Vec<&Sample> = chunk.iter().collect();
            let inputs = self.model.prepare(&samples, &self.tasks, &mut aug, &mut uni, &mut mm)?;
            let out = self.model.forward(&inputs, &self.tasks, 0, &mut mine)?;
            total += out.bundle.total * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(Some(total / count as f64))
    }

    /// Train to the configured end. Logs every step, validates at each
    /// epoch end, keeps `last.ckpt` and `best.ckpt` under `ckpt_dir`.
    pub fn run(
        &mut self,
        ckpt_dir: Option<&Path>,
        mut metrics: Option<&mut MetricsLog>,
        mut on_step: impl FnMut(u64, &LossBundle),
    ) -> Result<Vec<LossBundle>> {
        let total = self.total_steps();
        let spe = self.steps_per_epoch().max(1);
        let mut trace = Vec::new();
        if let Some(d) = ckpt_dir {
            std::fs::create_dir_all(d)?;
        }
        while self.state.step < total {
            let step = self.state.step;
            let lr = self.lr_at(step);
            let bundle = self.train_step()?;
            if let Some(m) = metrics.as_deref_mut() {
                if step % self.cfg.log_every.max(1) == 0 || step + 1 == total {
                    m.append("train", step, self.state.epoch, lr, &bundle)?;
                }
            }
            on_step(step, &bundle);
            trace.push(bundle);
            let epoch_end = self.state.step % spe == 0 || self.state.step == total;
            if epoch_end {
                self.end_of_epoch(ckpt_dir, metrics.as_deref_mut())?;
            }
        }
        if let Some(d) = ckpt_dir {
            self.checkpoint()?.save(&d.join("last.ckpt"))?;
        }
        Ok(trace)
    }

    fn end_of_epoch(&mut self, ckpt_dir: Option<&Path>, metrics: Option<&mut MetricsLog>) -> Result<()> {
        let val = self.validate()?;
        if let (Some(v), Some(m)) = (val, metrics) {
            m.append_value("val", self.state.step, self.state.epoch, v)?;
        }
        let score = val.unwrap_or(f64::INFINITY);
        let improved = match (val, self.state.best_val) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.state.best_val = Some(score);
        }
        if let Some(d) = ckpt_dir {
            let ck = self.checkpoint()?;
            if improved || val.is_none() {
                ck.save(&d.join("best.ckpt"))?;
            }
            ck.save(&d.join("last.ckpt"))?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(self)
    }

    pub fn from_checkpoint(ck: &Checkpoint, train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        let mut t = Trainer::new(ck.header.config.clone(), ck.vocab()?, train, val)?;
        ck.restore_into(&mut t)?;
        Ok(t)
    }
}
