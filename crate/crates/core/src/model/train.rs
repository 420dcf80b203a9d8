//! Training: sample preparation, deterministic batched Adam steps, the
//! two-stage reconstruction schedule, and line-oriented metrics records.
//!
//! Batch items may run on parallel workers; per-sample gradients are
//! reduced in sample order afterwards, so results are bitwise independent
//! of the worker count.

use super::eval::{evaluate, EvalReport};
use super::network::{Network, Session};
use super::params::Adam;
use crate::datagen::SampleSequence;
use crate::error::{Error, Result};
use crate::signal::{DB_FLOOR, MEL_BINS, SPEC_FRAMES};
use crate::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Network-ready tensors for one sample.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub visual: Vec<Tensor>,
    pub audio: Vec<Tensor>,
    /// Binary occupancy target, `[E, E, E]`.
    pub occupancy: Tensor,
    pub material: usize,
}

/// Converts a sample sequence into network inputs: frames as `[1, S, S]`
/// tensors, spectrograms normalized from `[-80, 0]` dB into `[0, 1]` and
/// zero-padded to the frame size.
pub fn prepare_sample(seq: &SampleSequence) -> Result<PreparedSample> {
    seq.check_aligned()?;
    if !seq.voxels.is_binary() {
        return Err(Error::validation(
            "ground-truth occupancy must be binary for training",
        ));
    }
    let size = crate::datagen::FRAME_SIZE;
    let mut visual = Vec::with_capacity(seq.frames.len());
    for f in &seq.frames {
        if f.width != size || f.height != size {
            return Err(Error::dimension(format!(
                "frame is {}x{}, expected {size}x{size}",
                f.width, f.height
            )));
        }
        visual.push(Tensor::new(vec![1, size, size], f.pixels.clone())?);
    }
    let mut audio = Vec::with_capacity(seq.spectrograms.len());
    let (off_h, off_w) = ((size - MEL_BINS) / 2, (size - SPEC_FRAMES) / 2);
    for spec in &seq.spectrograms {
        let mut img = vec![0.0; size * size];
        for mel in 0..MEL_BINS {
            for t in 0..SPEC_FRAMES {
                let v = (spec.get(mel, t) - DB_FLOOR) / -DB_FLOOR;
                img[(mel + off_h) * size + t + off_w] = v.clamp(0.0, 1.0);
            }
        }
        audio.push(Tensor::new(vec![1, size, size], img)?);
    }
    let e = crate::voxel::GRID;
    let occupancy = Tensor::new(vec![e, e, e], seq.voxels.occupancy().to_vec())?;
    Ok(PreparedSample {
        visual,
        audio,
        occupancy,
        material: seq.material.index(),
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub material_acc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<MetricsRecord>,
    /// Mean training loss per epoch, in order.
    pub loss_curve: Vec<f64>,
    /// Epoch at which an early-stop rule fired, if any.
    pub stopped_early: Option<usize>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::format(format!("metrics serialization: {e}")))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 30,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

fn check_finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!(
            "{what} loss diverged to {loss}; aborting"
        )))
    }
}

/// Mean loss and order-independent gradient sum over one batch.
fn run_batch<F>(batch: &[usize], n_params: usize, per_sample: F) -> Result<(f64, Vec<Option<Vec<f64>>>)>
where
    F: Fn(usize) -> Result<(f64, Vec<Option<Vec<f64>>>)> + Sync,
{
    let results: Vec<(f64, Vec<Option<Vec<f64>>>)> = batch
        .par_iter()
        .map(|&i| per_sample(i))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_params];
    for (sample_loss, sample_grads) in results {
        loss += sample_loss * scale;
        for (slot, g) in grads.iter_mut().zip(sample_grads) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v * scale;
                        }
                    }
                    None => {
                        let mut scaled = g;
                        for v in &mut scaled {
                            *v *= scale;
                        }
                        *slot = Some(scaled);
                    }
                }
            }
        }
    }
    Ok((loss, grads))
}

fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Trains the per-modality autoencoders (encoder + mirrored 2-D decoder)
/// with MSE against their own inputs. `epochs = 0` leaves the weights
/// untouched.
pub fn pretrain_autoencoders(
    net: &mut Network,
    samples: &[PreparedSample],
    opts: &PretrainOptions,
) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(Error::validation("pretraining needs a nonempty dataset"));
    }
    if !net.has_mirrors {
        return Err(Error::usage(
            "pretraining needs a network built with mirror decoders",
        ));
    }
    net.params.set_trainable(|_| true);
    let mut adam = Adam::new(opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log = TrainLog::default();
    for epoch in 0..opts.epochs {
        let order = epoch_order(samples.len(), &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(opts.batch_size.max(1)) {
            let (loss, grads) = run_batch(batch, net.params.len(), |i| {
                let mut tape = Tape::new();
                let mut sess = Session::new(&net.params);
                let loss = net.autoencode_loss_on_tape(&mut tape, &mut sess, &samples[i])?;
                tape.backward(loss)?;
                Ok((tape.value(loss).data()[0], sess.collect_grads(&tape)))
            })?;
            check_finite(loss, "pretraining")?;
            adam.step(&mut net.params, &grads)?;
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        log.loss_curve.push(mean);
        log.records.push(MetricsRecord {
            epoch,
            split: "pretrain".into(),
            loss: mean,
            iou: None,
            material_acc: None,
        });
    }
    Ok(log)
}

/// Early-stop rule checked on the training set.
#[derive(Debug, Clone, Copy)]
pub struct EarlyStop {
    pub min_iou: f64,
    pub max_bce: f64,
    pub threshold: f64,
    pub check_every: usize,
}

#[derive(Debug, Clone)]
pub struct ReconTrainOptions {
    pub epochs_frozen: usize,
    pub epochs_joint: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub material_loss_weight: f64,
    pub thresholds: Vec<f64>,
    /// Evaluate and log IoU every N epochs (0 = only at the end).
    pub eval_every: usize,
    pub early_stop: Option<EarlyStop>,
}

impl Default for ReconTrainOptions {
    fn default() -> Self {
        ReconTrainOptions {
            epochs_frozen: 30,
            epochs_joint: 10,
            lr: 1e-4,
            batch_size: 8,
            seed: 0,
            material_loss_weight: 0.1,
            thresholds: vec![0.3, 0.4, 0.5],
            eval_every: 0,
            early_stop: None,
        }
    }
}

/// Two-stage reconstruction training: encoders frozen first (features are
/// cached once and reused), then joint fine-tuning of everything. Binary
/// cross entropy drives the grid; audio variants add weighted material
/// cross entropy.
pub fn train_reconstruction(
    net: &mut Network,
    train: &[PreparedSample],
    val: Option<&[PreparedSample]>,
    opts: &ReconTrainOptions,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::validation("training needs a nonempty dataset"));
    }
    if net.has_mirrors {
        return Err(Error::usage(
            "reconstruction training needs a reconstruction build (no mirror decoders)",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log = TrainLog::default();
    let mut epoch_global = 0usize;

    // Stage 1: frozen encoders, cached features.
    net.params.set_trainable(|n| !n.starts_with("enc."));
    let features: Vec<(Option<Tensor>, Option<Tensor>)> = train
        .par_iter()
        .map(|s| net.compute_features(s))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(opts.lr);
    let mut stopped = false;
    for _ in 0..opts.epochs_frozen {
        let order = epoch_order(train.len(), &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(opts.batch_size.max(1)) {
            let (loss, grads) = run_batch(batch, net.params.len(), |i| {
                let mut tape = Tape::new();
                let mut sess = Session::new(&net.params);
                let fw = net.forward_from_features(
                    &mut tape,
                    &mut sess,
                    features[i].0.as_ref(),
                    features[i].1.as_ref(),
                )?;
                let loss = net.recon_loss_on_tape(&mut tape, &fw, &train[i], opts.material_loss_weight)?;
                tape.backward(loss)?;
                Ok((tape.value(loss).data()[0], sess.collect_grads(&tape)))
            })?;
            check_finite(loss, "stage-1")?;
            adam.step(&mut net.params, &grads)?;
            epoch_loss += loss;
            batches += 1;
        }
        finish_epoch(net, train, val, opts, &mut log, epoch_global, epoch_loss / batches as f64, "train-frozen")?;
        let stop = early_stop_met(net, train, opts, &mut log, epoch_global)?;
        epoch_global += 1;
        if stop {
            stopped = true;
            break;
        }
    }

    // Stage 2: everything trainable, fresh optimizer state.
    if !stopped {
        net.params.set_trainable(|_| true);
        let mut adam = Adam::new(opts.lr);
        for _ in 0..opts.epochs_joint {
            let order = epoch_order(train.len(), &mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for batch in order.chunks(opts.batch_size.max(1)) {
                let (loss, grads) = run_batch(batch, net.params.len(), |i| {
                    let mut tape = Tape::new();
                    let mut sess = Session::new(&net.params);
                    let fw = net.forward_on_tape(&mut tape, &mut sess, &train[i])?;
                    let loss = net
                        .recon_loss_on_tape(&mut tape, &fw, &train[i], opts.material_loss_weight)?;
                    tape.backward(loss)?;
                    Ok((tape.value(loss).data()[0], sess.collect_grads(&tape)))
                })?;
                check_finite(loss, "stage-2")?;
                adam.step(&mut net.params, &grads)?;
                epoch_loss += loss;
                batches += 1;
            }
            finish_epoch(net, train, val, opts, &mut log, epoch_global, epoch_loss / batches as f64, "train-joint")?;
            let stop = early_stop_met(net, train, opts, &mut log, epoch_global)?;
            epoch_global += 1;
            if stop {
                break;
            }
        }
    }
    net.params.set_trainable(|_| true);
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    net: &Network,
    train: &[PreparedSample],
    val: Option<&[PreparedSample]>,
    opts: &ReconTrainOptions,
    log: &mut TrainLog,
    epoch: usize,
    mean_loss: f64,
    split: &str,
) -> Result<()> {
    log.loss_curve.push(mean_loss);
    log.records.push(MetricsRecord {
        epoch,
        split: split.into(),
        loss: mean_loss,
        iou: None,
        material_acc: None,
    });
    if opts.eval_every != 0 && (epoch + 1) % opts.eval_every == 0 {
        if let Some(val) = val {
            let report = evaluate(net, val, &opts.thresholds)?;
            log.records.push(report.to_record(epoch, "val"));
        }
        let report = evaluate(net, train, &opts.thresholds)?;
        log.records.push(report.to_record(epoch, "train"));
    }
    Ok(())
}

fn early_stop_met(
    net: &Network,
    train: &[PreparedSample],
    opts: &ReconTrainOptions,
    log: &mut TrainLog,
    epoch: usize,
) -> Result<bool> {
    let Some(rule) = opts.early_stop else {
        return Ok(false);
    };
    if rule.check_every == 0 || (epoch + 1) % rule.check_every != 0 {
        return Ok(false);
    }
    let report: EvalReport = evaluate(net, train, &[rule.threshold])?;
    let iou = report.mean_iou_at(rule.threshold);
    if iou > rule.min_iou && report.bce < rule.max_bce {
        log.stopped_early = Some(epoch);
        return Ok(true);
    }
    Ok(false)
}
