//! Pre-training, resumption, fine-tuning and few-shot runs.
//!
//! All randomness of an epoch derives from `(seed, epoch, position)`, so a run
//! resumed from a checkpoint replays exactly the epochs it would have run.

mod fewshot;
pub mod optim;
mod samples;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FrameSettings, Modality};
use crate::error::{Error, Result};
use crate::masking::{mask_sample, MaskSpec};
use crate::model::checkpoint::{Checkpoint, CheckpointMeta};
use crate::model::{LossWeights, Model, ModelConfig, SampleTokens, Target};
use crate::tensor::{Graph, Tensor};
use crate::tokenizer::{grid_stride, BiDirEncoderTable};
pub use fewshot::{clamp_grid, few_shot, few_shot_pool, write_few_shot_csv, FewShotRow, FEW_SHOT_GRID};
pub use optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use samples::{base_scene_id, prepare_samples, EgoPolicy, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    /// Fraction of the epochs after which the learning rate decays.
    pub decay_at_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mask: MaskSpec,
    pub settings: FrameSettings,
    /// Input modalities fed to the model during training.
    pub modalities: Vec<Modality>,
    pub clip_norm: Option<f64>,
    pub loss_weights: LossWeights,
    pub adam: AdamConfig,
    /// Offset in frames between consecutive windows of a long scene.
    pub window_stride: usize,
    pub ego: EgoPolicy,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            base_lr: 1e-4,
            decay_factor: 0.1,
            decay_at_fraction: 0.8,
            batch_size: 32,
            seed: 0,
            mask: MaskSpec::default(),
            settings: FrameSettings::default(),
            modalities: Modality::ALL.to_vec(),
            clip_norm: Some(1.0),
            loss_weights: LossWeights::default(),
            adam: AdamConfig::default(),
            window_stride: 10,
            ego: EgoPolicy::All,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if !(self.decay_at_fraction > 0.0 && self.decay_at_fraction < 1.0) {
            return Err(Error::Config("decay_at_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.window_stride == 0 {
            return Err(Error::Config("window_stride must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        if !self.modalities.contains(&Modality::Traj) {
            return Err(Error::Config("training modalities must include T".into()));
        }
        self.mask.validate()?;
        self.settings.window_frames()?;
        self.model.validate()
    }
}

/// Step decay: `base_lr` until `floor(decay_at_fraction · epochs)`, then
/// `base_lr · decay_factor`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decay_at = (cfg.decay_at_fraction * cfg.epochs as f64 + 1e-9).floor() as usize;
    if epoch < decay_at {
        cfg.base_lr
    } else {
        cfg.base_lr * cfg.decay_factor
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub traj_term: f64,
    pub pose_term: f64,
}

pub fn write_loss_csv<W: Write>(w: W, rows: &[LossRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Data(format!("writing loss log: {e}")))?;
    }
    out.flush().map_err(|e| Error::io("<loss log>", e))
}

pub fn save_loss_csv(path: impl AsRef<Path>, rows: &[LossRow]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_loss_csv(f, rows)
}

pub(crate) fn derived_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&a.to_le_bytes());
    s[16..24].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(s)
}

struct Prepared {
    tokens: SampleTokens,
    target: Target,
}

struct SampleGrad {
    total: f64,
    traj: f64,
    pose: f64,
    grads: Vec<(usize, Tensor)>,
}

/// A training run over a fixed set of samples.
pub struct Trainer {
    pub config: TrainConfig,
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRow>,
    prepared: Vec<Prepared>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRow>,
}

/// Checks that windows at `settings` fit the model's grid and positional table.
pub fn check_rate(model: &ModelConfig, settings: &FrameSettings) -> Result<()> {
    let stride = grid_stride(settings.fps, model.max_fps())?;
    let obs = settings.t_obs()? * stride - 1;
    let pred = settings.t_pred()? * stride - 1;
    let need = obs.max(pred);
    if need > model.grid_capacity {
        return Err(Error::contract(format!(
            "{} fps windows need positional index {need}, capacity is {}",
            settings.fps, model.grid_capacity
        )));
    }
    BiDirEncoderTable::new(model.hidden_dim, model.grid_capacity)?;
    Ok(())
}

impl Trainer {
    pub fn new(mut checkpoint: Checkpoint, samples: &[Sample], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::contract("training needs at least one sample"));
        }
        check_rate(&checkpoint.model.config, &config.settings)?;
        if checkpoint.optimizer.is_none() {
            checkpoint.optimizer = Some(AdamState::new(&checkpoint.model.store, config.adam));
        }
        let prepared = samples
            .iter()
            .map(|s| {
                Ok(Prepared {
                    tokens: checkpoint.model.tokenize(&s.sample, &config.modalities)?,
                    target: s.target.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            checkpoint,
            log: Vec::new(),
            prepared,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.checkpoint.meta.epochs_done
    }

    fn sample_grad(&self, p: &Prepared, epoch: usize, position: usize) -> Result<SampleGrad> {
        let model = &self.checkpoint.model;
        let mut rng = derived_rng(self.config.seed, epoch as u64, position as u64);
        let agents = mask_sample(&p.tokens.agents, &self.config.mask, &mut rng)?;
        let tokens = SampleTokens {
            agents,
            t_pred: p.tokens.t_pred,
        };
        let g = Graph::new();
        let out = model.forward(&g, &tokens)?;
        let terms = model.loss(&g, &out, &p.target, self.config.loss_weights)?;
        let total = g.item(terms.total);
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
        }
        let grads = g.backward(terms.total)?.into_params();
        Ok(SampleGrad {
            total,
            traj: terms.traj,
            pose: terms.pose,
            grads,
        })
    }

    /// Runs the next epoch and appends its row to the log.
    pub fn run_epoch(&mut self) -> Result<LossRow> {
        let epoch = self.epochs_done();
        if epoch >= self.config.epochs {
            return Err(Error::contract(format!("all {} epochs already ran", self.config.epochs)));
        }
        let lr = lr_schedule(epoch, &self.config);
        let mut order: Vec<usize> = (0..self.prepared.len()).collect();
        order.shuffle(&mut derived_rng(self.config.seed, epoch as u64, u64::MAX));

        let (mut sum_total, mut sum_traj, mut sum_pose) = (0.0, 0.0, 0.0);
        let shapes: Vec<Vec<usize>> = self.checkpoint.model.store.iter().map(|(_, t)| t.shape().to_vec()).collect();
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let start = b * self.config.batch_size;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| self.sample_grad(&self.prepared[idx], epoch, start + i))
                .collect::<Result<Vec<_>>>()?;
            let mut acc: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            for r in &results {
                sum_total += r.total;
                sum_traj += r.traj;
                sum_pose += r.pose;
                for (id, g) in &r.grads {
                    for (a, v) in acc[*id].data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for t in acc.iter_mut() {
                for v in t.data_mut() {
                    *v *= inv;
                }
            }
            if let Some(c) = self.config.clip_norm {
                clip_global_norm(&mut acc, c);
            }
            let opt = self.checkpoint.optimizer.as_mut().expect("set in new");
            adam_step(&mut self.checkpoint.model.store, &acc, opt, lr)?;
        }
        self.checkpoint.meta.epochs_done = epoch + 1;
        let n = self.prepared.len() as f64;
        let row = LossRow {
            epoch,
            step: self.checkpoint.optimizer.as_ref().map_or(0, |o| o.step),
            lr,
            total: sum_total / n,
            traj_term: sum_traj / n,
            pose_term: sum_pose / n,
        };
        self.log.push(row);
        Ok(row)
    }

    /// Runs epochs until `until` (clamped to the configured count) are done.
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let until = until.min(self.config.epochs);
        while self.epochs_done() < until {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.epochs)
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            checkpoint: self.checkpoint,
            log: self.log,
        }
    }
}

fn collect_samples(datasets: &[Dataset], cfg: &TrainConfig) -> Result<(Vec<Sample>, Vec<String>, Vec<String>)> {
    let mut samples = Vec::new();
    let mut tags = Vec::new();
    let mut ids = Vec::new();
    for d in datasets {
        samples.extend(prepare_samples(&d.scenes, &cfg.settings, cfg.window_stride, cfg.ego)?);
        tags.push(d.tag());
        ids.extend(d.scenes.iter().map(|s| s.scene_id.clone()));
    }
    if samples.is_empty() {
        return Err(Error::contract("the datasets yield no training samples"));
    }
    Ok((samples, tags, ids))
}

fn merge_meta(meta: &mut CheckpointMeta, tags: Vec<String>, ids: Vec<String>) {
    meta.tool_version = env!("CARGO_PKG_VERSION").to_string();
    for t in tags {
        if !meta.train_tags.contains(&t) {
            meta.train_tags.push(t);
        }
    }
    meta.train_scene_ids.extend(ids);
    meta.train_scene_ids.sort();
    meta.train_scene_ids.dedup();
}

/// A trainer for a fresh model over the union of `datasets`.
pub fn pretrainer(datasets: &[Dataset], cfg: &TrainConfig) -> Result<Trainer> {
    cfg.validate()?;
    let (samples, tags, ids) = collect_samples(datasets, cfg)?;
    let model = Model::new(cfg.model.clone())?;
    let mut meta = CheckpointMeta::default();
    merge_meta(&mut meta, tags, ids);
    let ckpt = Checkpoint {
        optimizer: Some(AdamState::new(&model.store, cfg.adam)),
        model,
        meta,
    };
    Trainer::new(ckpt, &samples, cfg.clone())
}

pub fn pretrain(datasets: &[Dataset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = pretrainer(datasets, cfg)?;
    t.run()?;
    Ok(t.finish())
}

/// Continues an interrupted run. The checkpoint must carry optimizer state
/// and the same model configuration as `cfg`.
pub fn resume(ckpt: Checkpoint, datasets: &[Dataset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if ckpt.optimizer.is_none() {
        return Err(Error::contract("resuming needs a checkpoint with optimizer state"));
    }
    if ckpt.model.config != cfg.model {
        return Err(Error::Config("checkpoint model configuration differs from the run configuration".into()));
    }
    cfg.validate()?;
    let (samples, _, _) = collect_samples(datasets, cfg)?;
    let mut t = Trainer::new(ckpt, &samples, cfg.clone())?;
    t.run()?;
    Ok(t.finish())
}

/// Fine-tunes every parameter of a pre-trained model at `cfg.settings`.
/// The model configuration in `cfg` is ignored; the checkpoint's is used.
pub fn finetuner(ckpt: Checkpoint, datasets: &[Dataset], cfg: &TrainConfig) -> Result<Trainer> {
    let mut cfg = cfg.clone();
    cfg.model = ckpt.model.config.clone();
    cfg.validate()?;
    check_rate(&cfg.model, &cfg.settings)?;
    let (samples, tags, ids) = collect_samples(datasets, &cfg)?;
    let mut meta = ckpt.meta.clone();
    meta.epochs_done = 0;
    merge_meta(&mut meta, tags, ids);
    let ckpt = Checkpoint {
        optimizer: Some(AdamState::new(&ckpt.model.store, cfg.adam)),
        model: ckpt.model,
        meta,
    };
    Trainer::new(ckpt, &samples, cfg)
}

pub fn finetune(ckpt: Checkpoint, datasets: &[Dataset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = finetuner(ckpt, datasets, cfg)?;
    t.run()?;
    Ok(t.finish())
}
