//! Pretraining and finetuning loops, optimizers, the learning-rate schedule
//! and gradient checking.

mod gradcheck;
mod optim;
mod schedule;

pub use gradcheck::{
    check_gradients, grad_check, gradcheck_preset, rel_err, GradCheckReport, PresetReport, TensorCheck, GRADCHECK_ABS_TOL, GRADCHECK_EPS,
    GRADCHECK_SAMPLES,
};
pub use optim::{adamw_step, lamb_step, layer_adapted, optimizer_step, OptimHyper, OptimState, OptimizerKind};
pub use schedule::{lr_schedule, Schedule};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta, RngState};
use crate::episodes::Demo;
use crate::error::{Error, Result};
use crate::model::{
    loss_and_grads_parallel, Batch, FinetuneSample, LossOptions, ModelConfig, ModelParams, Part, PretrainSample,
};
use crate::patches::sample_mask;
use crate::pointcloud::{load_ply, PointCloud};
use crate::renderer::render_all;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,epoch,split,loss,lr,masked_mse";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const FLUSH_EVERY: usize = 50;
const KEEP_CHECKPOINTS: usize = 2;
/// Largest tolerated fraction of unreadable corpus scenes.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pretrain,
    Finetune,
}

impl Mode {
    /// Tensors updated by the optimizer in this mode.
    pub fn trainable(self) -> &'static [Part] {
        match self {
            Mode::Pretrain => &[Part::Encoder, Part::MaeDecoder],
            Mode::Finetune => &[Part::Encoder, Part::ActionDecoder],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    /// Caps the number of optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mask_ratio: f64,
    pub loss_masked_only: bool,
    pub seed: u64,
    /// Samples processed concurrently; 0 uses every available core.
    /// Results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_pretrain()
    }
}

impl TrainConfig {
    pub fn desk_pretrain() -> Self {
        Self {
            mode: Mode::Pretrain,
            optimizer: OptimizerKind::AdamW,
            epochs: 13,
            max_steps: 200,
            batch_size: 4,
            base_lr: 2e-3,
            min_lr: 1e-4,
            warmup_steps: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mask_ratio: 0.75,
            loss_masked_only: false,
            seed: 0,
            workers: 0,
        }
    }

    pub fn desk_finetune() -> Self {
        Self {
            mode: Mode::Finetune,
            optimizer: OptimizerKind::Lamb,
            epochs: 40,
            max_steps: 300,
            batch_size: 4,
            base_lr: 1e-2,
            min_lr: 1e-5,
            warmup_steps: 20,
            ..Self::desk_pretrain()
        }
    }

    pub fn paper_pretrain() -> Self {
        Self {
            mode: Mode::Pretrain,
            optimizer: OptimizerKind::AdamW,
            epochs: 15,
            max_steps: 0,
            batch_size: 3,
            base_lr: 1e-4,
            // Equal to base_lr: a constant rate.
            min_lr: 1e-4,
            warmup_steps: 0,
            weight_decay: 0.01,
            mask_ratio: 0.75,
            ..Self::desk_pretrain()
        }
    }

    pub fn paper_finetune() -> Self {
        Self {
            mode: Mode::Finetune,
            optimizer: OptimizerKind::Lamb,
            base_lr: 1e-4,
            min_lr: 1e-6,
            warmup_steps: 2000,
            ..Self::paper_pretrain()
        }
    }

    pub fn preset(paper: bool, mode: Mode) -> Self {
        match (paper, mode) {
            (false, Mode::Pretrain) => Self::desk_pretrain(),
            (false, Mode::Finetune) => Self::desk_finetune(),
            (true, Mode::Pretrain) => Self::paper_pretrain(),
            (true, Mode::Finetune) => Self::paper_finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        let finite = [self.base_lr, self.min_lr, self.weight_decay, self.beta1, self.beta2, self.eps];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("learning rates and optimizer constants must be finite and >= 0".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("betas must be below 1".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let all = self.epochs * self.steps_per_epoch(n);
        if self.max_steps > 0 {
            all.min(self.max_steps)
        } else {
            all
        }
    }

    pub fn schedule(&self, total_steps: usize) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_steps,
            total_steps,
        }
    }

    fn hyper(&self, lr: f64) -> OptimHyper {
        OptimHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    fn worker_count(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }
}

/// A pretraining scene, either on disk or already in memory.
#[derive(Debug, Clone, PartialEq)]
pub enum SceneSource {
    Path(PathBuf),
    Cloud(PointCloud),
}

/// Loads every source, skipping unreadable files with a warning. Fails
/// when nothing is left or more than [`MAX_SKIPPED_FRACTION`] was skipped.
pub fn load_corpus(sources: &[SceneSource]) -> Result<(Vec<PointCloud>, usize)> {
    if sources.is_empty() {
        return Err(Error::EmptyDataset("corpus has no scenes".into()));
    }
    let mut clouds = Vec::with_capacity(sources.len());
    let mut skipped = 0;
    for s in sources {
        match s {
            SceneSource::Cloud(c) => clouds.push(c.clone()),
            SceneSource::Path(p) => match load_ply(p) {
                Ok(c) if !c.is_empty() => clouds.push(c),
                Ok(_) => {
                    log::warn!("skipping empty scene {}", p.display());
                    skipped += 1;
                }
                Err(e) => {
                    log::warn!("skipping unreadable scene {}: {e}", p.display());
                    skipped += 1;
                }
            },
        }
    }
    if skipped as f64 > MAX_SKIPPED_FRACTION * sources.len() as f64 || clouds.is_empty() {
        return Err(Error::TooManySkipped {
            skipped,
            total: sources.len(),
        });
    }
    Ok((clouds, skipped))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Batch loss of every step, before that step's update.
    pub losses: Vec<f64>,
    pub steps: usize,
    pub skipped: usize,
}

enum OwnedBatch {
    Pretrain(Vec<PretrainSample>),
    Finetune(Vec<FinetuneSample>),
}

impl OwnedBatch {
    fn view(&self) -> Batch<'_> {
        match self {
            OwnedBatch::Pretrain(s) => Batch::Pretrain(s),
            OwnedBatch::Finetune(s) => Batch::Finetune(s),
        }
    }
}

struct Metrics {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl Metrics {
    fn create(dir: &Path) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut m = Self {
            out: BufWriter::new(f),
            path,
        };
        writeln!(m.out, "{METRICS_HEADER}").map_err(|e| Error::io(&m.path, e))?;
        Ok(m)
    }

    fn row(&mut self, step: usize, epoch: usize, loss: f64, lr: f64, masked: Option<f64>) -> Result<()> {
        let masked = masked.map(|v| v.to_string()).unwrap_or_default();
        writeln!(self.out, "{step},{epoch},train,{loss},{lr},{masked}").map_err(|e| Error::io(&self.path, e))?;
        if step.is_multiple_of(FLUSH_EVERY) {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

fn run_loop<F>(
    n_items: usize,
    mut params: ModelParams,
    cfg: &TrainConfig,
    mode: Mode,
    out: Option<&Path>,
    mut make_batch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&[usize], &mut ChaCha8Rng) -> Result<OwnedBatch>,
{
    let total = cfg.total_steps(n_items);
    let schedule = cfg.schedule(total);
    let opts = LossOptions {
        masked_only: cfg.loss_masked_only,
    };
    let workers = cfg.worker_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimState::new(&params);
    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
            Some(Metrics::create(dir)?)
        }
        None => None,
    };
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut step = 0;
    let mut epoch = 0;
    let meta = |step: usize, epoch: usize, rng: &ChaCha8Rng| CheckpointMeta {
        train_cfg: cfg.clone(),
        step: step as u64,
        epoch: epoch as u64,
        rng_state: RngState {
            seed: cfg.seed,
            word_pos: rng.get_word_pos(),
        },
    };
    while step < total && epoch < cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            let batch = make_batch(chunk, &mut rng)?;
            let result = loss_and_grads_parallel(batch.view(), &params, opts, workers)?;
            step += 1;
            let lr = schedule.lr(step);
            optimizer_step(cfg.optimizer, &mut params, &result.grads, &mut state, &cfg.hyper(lr), mode.trainable())?;
            params.round_to_f32();
            losses.push(result.loss);
            if let Some(m) = metrics.as_mut() {
                m.row(step, epoch, result.loss, lr, result.masked_mse)?;
            }
            if step % FLUSH_EVERY == 0 {
                log::info!("step {step}/{total} epoch {epoch} loss {:.6} lr {lr:.3e}", result.loss);
            }
        }
        epoch += 1;
        if let Some(dir) = out {
            save_checkpoint(&epoch_checkpoint(dir, epoch), &params, &meta(step, epoch, &rng))?;
            if epoch > KEEP_CHECKPOINTS {
                let old = epoch_checkpoint(dir, epoch - KEEP_CHECKPOINTS);
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
    }
    if let Some(dir) = out {
        if let Some(m) = metrics.as_mut() {
            m.flush()?;
        }
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &params, &meta(step, epoch, &rng))?;
    }
    Ok(TrainOutcome {
        params,
        losses,
        steps: step,
        skipped: 0,
    })
}

/// Masked-reconstruction pretraining of the encoder and reconstruction
/// decoder. With `out`, writes the metrics CSV, a checkpoint per epoch
/// (keeping the last two) and the final checkpoint.
pub fn pretrain(
    corpus: &[SceneSource],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let (clouds, skipped) = load_corpus(corpus)?;
    let params = ModelParams::init(model_cfg)?;
    let n = model_cfg.tokens_per_view();
    let make = |idx: &[usize], rng: &mut ChaCha8Rng| {
        let samples = idx
            .iter()
            .map(|&i| {
                let obs = render_all(&clouds[i], model_cfg.width, model_cfg.height);
                let plan = sample_mask(n, train_cfg.mask_ratio, model_cfg.strategy, rng.next_u64())?;
                PretrainSample::new(&obs, &plan, model_cfg.patch)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OwnedBatch::Pretrain(samples))
    };
    let mut outcome = run_loop(clouds.len(), params, train_cfg, Mode::Pretrain, out, make)?;
    outcome.skipped = skipped;
    Ok(outcome)
}

/// Renders each demo once into an unmasked finetuning sample.
pub fn finetune_samples(demos: &[Demo], cfg: &ModelConfig) -> Result<Vec<FinetuneSample>> {
    demos
        .iter()
        .map(|d| {
            let obs = render_all(&d.cloud, cfg.width, cfg.height);
            FinetuneSample::new(&obs, cfg.patch, d.goal, d.action)
        })
        .collect()
}

/// Trains the encoder and action decoder on demonstrations. The encoder
/// starts from `init` when given (its reconstruction decoder is dropped),
/// otherwise everything starts from the model seed.
pub fn finetune(
    demos: &[Demo],
    init: Option<&ModelParams>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if demos.is_empty() {
        return Err(Error::EmptyDataset("no finetuning demos".into()));
    }
    let mut params = ModelParams::init(model_cfg)?;
    if let Some(init) = init {
        let diff = init.config().encoder_mismatches(model_cfg);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff));
        }
        params.copy_part_from(init, Part::Encoder)?;
    }
    let samples = finetune_samples(demos, model_cfg)?;
    let make = |idx: &[usize], _: &mut ChaCha8Rng| Ok(OwnedBatch::Finetune(idx.iter().map(|&i| samples[i].clone()).collect()));
    run_loop(samples.len(), params, train_cfg, Mode::Finetune, out, make)
}
