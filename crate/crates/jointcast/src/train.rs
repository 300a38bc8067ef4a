//! Training loop: gradient accumulation over ragged scenes, AdamW with a
//! cosine learning-rate schedule, per-step CSV logging, and a checkpoint
//! written at the end of every epoch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{cosine_lr, optimizer_step};
use crate::scene::Scene;
use crate::tape::Tape;

/// One optimizer step's log row: loss terms are means over the accumulated
/// scenes of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_propose: f64,
    pub l_refine: f64,
    pub l_cls: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn total(&self) -> f64 {
        (self.l_propose + self.l_refine) + self.l_cls
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// Mean total training loss per epoch.
    pub epoch_train_mean: Vec<f64>,
    /// Mean total validation loss per epoch (empty when no val scenes).
    pub epoch_val_mean: Vec<f64>,
}

pub const LOG_HEADER: &str = "epoch,step,l_propose,l_refine,l_cls,lr";

fn write_row(w: &mut Option<BufWriter<File>>, rec: &StepRecord) -> Result<()> {
    if let Some(w) = w {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            rec.epoch, rec.step, rec.l_propose, rec.l_refine, rec.l_cls, rec.lr
        )?;
    }
    Ok(())
}

/// Mean total loss over scenes with dropout off; used for validation.
pub fn eval_loss(model: &Model, scenes: &[Scene]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Config("eval_loss: no scenes".into()));
    }
    let mut sum = 0.0;
    for scene in scenes {
        let (_, lb) = model.scene_loss(Tape::new(), scene)?;
        sum += lb.total;
    }
    Ok(sum / scenes.len() as f64)
}

/// Runs the full schedule. Scene order reshuffles every epoch from the model
/// seed, so runs are reproducible. A checkpoint lands at `ckpt` before the
/// first epoch and again after each completed one; on a non-finite loss or
/// parameter the function aborts with a numeric error and the most recent
/// good checkpoint stays on disk.
pub fn train(
    model: &mut Model,
    scenes: &[Scene],
    val_scenes: &[Scene],
    ckpt: Option<&Path>,
    log: Option<&Path>,
) -> Result<TrainReport> {
    if scenes.is_empty() {
        return Err(Error::Config("train: no training scenes".into()));
    }
    let cfg = model.cfg.clone();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut report = TrainReport::default();

    let mut log_file = match log {
        Some(path) => {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "{LOG_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let save = |model: &Model, path: Option<&Path>| -> Result<()> {
        if let Some(path) = path {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            checkpoint::save(&model.store, path)?;
        }
        Ok(())
    };
    save(model, ckpt)?;

    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grads();
            let inv = 1.0 / batch.len() as f64;
            let (mut sp, mut sr, mut sc) = (0.0, 0.0, 0.0);
            for &idx in batch {
                let tape = if cfg.dropout > 0.0 {
                    Tape::training(ChaCha8Rng::seed_from_u64(dropout_rng.gen()))
                } else {
                    Tape::new()
                };
                let (mut out, lb) = model.scene_loss(tape, &scenes[idx])?;
                if !lb.total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "train: non-finite loss on scenario {:?} at epoch {epoch}",
                        scenes[idx].scenario_id
                    )));
                }
                let mean_contrib = out.tape.scale(lb.node, inv);
                out.tape.backward(mean_contrib);
                model.store.harvest_grads(&out.tape, &out.bound)?;
                sp += lb.l_propose * inv;
                sr += lb.l_refine * inv;
                sc += lb.l_cls * inv;
                epoch_sum += lb.total;
            }
            model.store.fill_missing_grads();
            optimizer_step(&mut model.store, lr, cfg.weight_decay)?;
            let rec = StepRecord {
                epoch,
                step,
                l_propose: sp,
                l_refine: sr,
                l_cls: sc,
                lr,
            };
            write_row(&mut log_file, &rec)?;
            report.steps.push(rec);
            step += 1;
        }
        report.epoch_train_mean.push(epoch_sum / scenes.len() as f64);
        if !val_scenes.is_empty() {
            report.epoch_val_mean.push(eval_loss(model, val_scenes)?);
        }
        save(model, ckpt)?;
    }
    if let Some(w) = &mut log_file {
        w.flush()?;
    }
    Ok(report)
}
