//! Training and evaluation drivers shared by the command line and the tests.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::detector::{LossReport, Mode, Trainer};
use crate::error::{Error, Result};
use crate::eval::{compute_ap, ApReport, ImageEval};
use crate::nn::params::name_seed;
use crate::synthdata::{generate_scenes, ImageTensor, Scene};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub variant: String,
    pub lr: f64,
    pub cls_loss: f64,
    pub box_loss: f64,
    pub recon_loss: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

/// Appends [`StepRecord`]s as JSON lines.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Training and validation scenes described by the config.
pub fn synth_splits(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let train = generate_scenes(&cfg.scene, cfg.data.train_count, cfg.data.seed)?;
    let val = generate_scenes(&cfg.scene, cfg.data.val_count, cfg.data.val_seed())?;
    Ok((train, val))
}

pub fn new_trainer(cfg: &RunConfig) -> Result<Trainer<f32>> {
    cfg.validate()?;
    Trainer::new(&cfg.model(), &cfg.optimizer, cfg.mode, cfg.seed)
}

/// Rebuild a trainer from a checkpoint, resuming its step counter and
/// optimizer state.
pub fn resume_trainer(ckpt: &Checkpoint) -> Result<(Trainer<f32>, usize)> {
    let mut t = new_trainer(&ckpt.config)?;
    ckpt.restore_into(&mut t.store)?;
    t.state = ckpt.state.clone();
    t.step = ckpt.step;
    Ok((t, ckpt.epoch))
}

pub fn checkpoint_of(t: &Trainer<f32>, cfg: &RunConfig, epoch: usize) -> Checkpoint {
    Checkpoint {
        step: t.step,
        epoch,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        store: t.store.clone(),
        state: t.state.clone(),
    }
}

/// Batch order of one epoch: a permutation keyed by the run seed and epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &format!("epoch{epoch}")));
    idx.shuffle(&mut rng);
    idx
}

/// Train from `start_epoch` to `cfg.train.epochs`, calling `on_step` after
/// every update and `on_epoch` after every epoch.
pub fn train_epochs(
    trainer: &mut Trainer<f32>,
    cfg: &RunConfig,
    scenes: &[Scene],
    start_epoch: usize,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    mut on_epoch: impl FnMut(&Trainer<f32>, usize) -> Result<()>,
) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let bs = cfg.train.batch_size;
    let per_epoch = scenes.len().div_ceil(bs);
    let total = per_epoch * cfg.train.epochs;
    let variant = cfg.variant();
    for epoch in start_epoch..cfg.train.epochs {
        let order = epoch_order(cfg.seed, epoch, scenes.len());
        for chunk in order.chunks(bs) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let lr = cfg.optimizer.lr_at(trainer.step, total);
            let report = trainer.training_step(&batch, lr)?;
            on_step(&StepRecord {
                step: trainer.step - 1,
                epoch,
                variant: variant.clone(),
                lr,
                cls_loss: report.cls_loss,
                box_loss: report.box_loss,
                recon_loss: report.recon_loss,
                total: report.total,
                threshold: trainer.model.dgfe().threshold_value(&trainer.store),
            })?;
        }
        on_epoch(trainer, epoch + 1)?;
    }
    Ok(())
}

/// Detections for every scene, batched.
pub fn predict(trainer: &Trainer<f32>, scenes: &[Scene], batch: usize, mode: Mode) -> Result<Vec<ImageEval>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch.max(1)) {
        let images: Vec<&ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let dets = trainer.model.detect(&trainer.store, &images, mode)?;
        out.extend(chunk.iter().zip(dets).map(|(s, d)| ImageEval {
            detections: d,
            ground_truth: s.boxes.clone(),
        }));
    }
    Ok(out)
}

pub fn evaluate(trainer: &Trainer<f32>, scenes: &[Scene], batch: usize) -> Result<ApReport> {
    if scenes.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    compute_ap(&predict(trainer, scenes, batch, trainer.mode)?)
}

/// Mean losses over `scenes` without updating anything.
pub fn mean_loss(trainer: &Trainer<f32>, scenes: &[Scene], batch: usize) -> Result<LossReport> {
    let lambda = trainer.model.config().loss.lambda;
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for chunk in scenes.chunks(batch.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let r = trainer.model.evaluate_loss(&trainer.store, &refs, trainer.mode)?;
        let w = chunk.len() as f64;
        acc[0] += r.cls_loss * w;
        acc[1] += r.box_loss * w;
        acc[2] += r.recon_loss * w;
        n += chunk.len();
    }
    let n = n.max(1) as f64;
    Ok(LossReport::new(acc[0] / n, acc[1] / n, acc[2] / n, lambda))
}
