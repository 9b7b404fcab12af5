//! Two-phase training: the autoencoder first, then the Param-Net against the
//! frozen autoencoder's features.
//!
//! Both phases run the same outer loop (epoch shuffle, Adam, periodic
//! checkpoints); they differ in what a step's forward pass looks like. All
//! randomness flows from `TrainConfig::seed` when the determinism flag is
//! set, so two such runs produce bit-identical checkpoints.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ae::{Autoencoder, AutoencoderConfig};
use crate::error::{Error, Result};
use crate::io::manifest::load_manifest;
use crate::io::slice::read_slice;
use crate::io::write_atomic;
use crate::pnet::{conditioning_vector, ParamNet, ParamNetConfig, RangePolicy};
use crate::sim::{
    derive_stream, load_samples, DatasetMode, SliceSample, DEFAULT_PARAMS, SALT_SHUFFLE,
};
use crate::tensor::{adam_step, AdamParams, Mode, Tape, Tensor};

pub const AE_CHECKPOINT: &str = "ae.ckpt";
pub const PN_CHECKPOINT: &str = "pn.ckpt";
pub const AE_LOG: &str = "ae_train_log.json";
pub const PN_LOG: &str = "pn_train_log.json";

/// Which half of the pipeline a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ae,
    Pnet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub deterministic: bool,
    /// Steps between mid-run checkpoint writes; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Hard stop after this many optimizer steps, for micro-runs and
    /// interruption tests. Epochs past the stop never run.
    pub max_steps: Option<u64>,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Warm-up image folder for the autoencoder phase. Images are read as
    /// grayscale and resized to the working resolution.
    pub pretrain_dir: Option<PathBuf>,
    pub pretrain_epochs: u32,
    /// Which pairing the Param-Net conditions on. Ignored by the autoencoder
    /// phase.
    pub mode: Option<DatasetMode>,
    /// Continue from the checkpoint already in `out_dir` instead of starting
    /// fresh.
    pub resume: bool,
}

impl TrainConfig {
    pub fn new(phase: Phase, dataset_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            phase,
            epochs: 6,
            batch_size: 8,
            lr: AdamParams::default().lr,
            seed: 0,
            deterministic: false,
            checkpoint_every: 0,
            max_steps: None,
            dataset_dir: dataset_dir.into(),
            out_dir: out_dir.into(),
            pretrain_dir: None,
            pretrain_epochs: 1,
            mode: None,
            resume: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be a positive finite number, got {}", self.lr));
        }
        if self.max_steps == Some(0) {
            return fail("max_steps of 0 would train nothing; omit it instead".into());
        }
        if self.phase == Phase::Pnet && self.mode.is_none() {
            return fail("param-net training needs a mode (d2p or p2p)".into());
        }
        if self.phase == Phase::Pnet && self.pretrain_dir.is_some() {
            return fail("pretraining applies to the autoencoder phase only".into());
        }
        if self.pretrain_dir.is_some() && self.pretrain_epochs < 1 {
            return fail("pretrain_epochs must be at least 1 when a pretrain folder is given".into());
        }
        if self.resume && self.pretrain_dir.is_some() {
            return fail(
                "resuming across a pretrain stage is not supported; restart fresh or drop the pretrain folder"
                    .into(),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub mean_loss: f64,
    pub seconds: f64,
}

/// Step and epoch curves of one run. A resumed run logs only its own part of
/// the trajectory; step numbers continue from the checkpoint, so logs splice.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLoss>,
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::input("train_log", e.to_string()))?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<TrainLog> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Mean held-out loss after each completed fine-tuning epoch, in model
    /// units. Empty when the holdout is empty.
    pub val_losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Maps `[0,1]` image intensities into the tanh codomain `[-1,1]`.
/// Out-of-range values are clamped, not rejected.
pub fn to_model_units(image: &Tensor) -> Tensor {
    image.map(|v| v.clamp(0.0, 1.0) * 2.0 - 1.0)
}

/// Inverse of [`to_model_units`], clamping into `[-1,1]` first.
pub fn from_model_units(image: &Tensor) -> Tensor {
    image.map(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0)
}

fn stack_images(images: &[&Tensor], r: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * r * r);
    for image in images {
        if image.shape() != [r, r] {
            return Err(Error::shape(
                "train_batch",
                format!("slice is {:?} where [{r}, {r}] was expected", image.shape()),
            ));
        }
        data.extend_from_slice(image.data());
    }
    Tensor::from_vec(&[images.len(), 1, r, r], data)
}

/// Last tenth of the items becomes the holdout, so the split is stable under
/// reruns of the same dataset.
fn split_holdout<T>(items: Vec<T>) -> (Vec<T>, Vec<T>) {
    let mut train = items;
    let val = train.split_off(train.len() - train.len() / 10);
    (train, val)
}

fn epoch_order(config: &TrainConfig, stage_salt: u64, epoch: u32, n: usize) -> Vec<usize> {
    let mut rng = if config.deterministic {
        ChaCha8Rng::seed_from_u64(derive_stream(
            config.seed,
            &[SALT_SHUFFLE, stage_salt, epoch as u64],
        ))
    } else {
        ChaCha8Rng::from_entropy()
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn ensure_finite(loss: f64, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss became {loss} at step {step}")))
    }
}

/// Mutable bookkeeping threaded through the stages of one training run.
struct LoopCtl {
    step: u64,
    completed_epochs: u64,
    /// Optimizer steps to fast-forward through after a resume; consumed
    /// before any forward pass runs.
    skip: u64,
    stopped: bool,
    log: TrainLog,
    val_losses: Vec<f64>,
}

impl LoopCtl {
    fn fresh() -> Self {
        LoopCtl {
            step: 0,
            completed_epochs: 0,
            skip: 0,
            stopped: false,
            log: TrainLog::default(),
            val_losses: Vec::new(),
        }
    }

    fn hit_max(&self, config: &TrainConfig) -> bool {
        config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Records a finished epoch from the steps logged since `first_step`.
    fn close_epoch(&mut self, first_step: usize, started: Instant) {
        let steps = &self.log.steps[first_step..];
        if steps.is_empty() {
            return;
        }
        let mean = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64;
        self.log.epochs.push(EpochStats {
            epoch: self.completed_epochs as u32,
            mean_loss: mean,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
}

/// Stage salts for the shuffle stream, distinct per stage so a pretrain epoch
/// and a fine-tune epoch with the same index draw different orders.
const STAGE_PRETRAIN: u64 = 0;
const STAGE_MAIN: u64 = 1;

fn run_ae_stage(
    model: &mut Autoencoder,
    train: &[Tensor],
    val: &[Tensor],
    start_epoch: u32,
    epochs: u32,
    stage_salt: u64,
    ctl: &mut LoopCtl,
    config: &TrainConfig,
    hp: AdamParams,
    ckpt_path: &Path,
) -> Result<()> {
    let r = model.config.r;
    for epoch in start_epoch..epochs {
        let started = Instant::now();
        let first_step = ctl.log.steps.len();
        let order = epoch_order(config, stage_salt, epoch, train.len());
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                // Batch statistics at the 1x1 bottleneck need two samples;
                // the shuffle rotates which slice sits the epoch out.
                continue;
            }
            if ctl.skip > 0 {
                ctl.skip -= 1;
                continue;
            }
            if ctl.hit_max(config) {
                ctl.stopped = true;
                break;
            }
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(to_model_units(&stack_images(&batch, r)?));
            let (_, recon) = model.autoencode(&mut tape, x, Mode::Train)?;
            let loss = tape.mse(recon, x)?;
            let loss_val = tape.value(loss).data()[0] as f64;
            ensure_finite(loss_val, ctl.step + 1)?;
            tape.backward(loss, &mut model.params)?;
            adam_step(&mut model.params, hp);
            model.params.zero_grads();
            ctl.step += 1;
            ctl.log.steps.push(StepLoss { step: ctl.step, loss: loss_val });
            if config.checkpoint_every > 0 && ctl.step % config.checkpoint_every == 0 {
                model.save(ckpt_path, config.seed, ctl.step, ctl.completed_epochs)?;
            }
        }
        if ctl.stopped {
            // A partial epoch keeps its steps in the step log but earns no
            // epoch row.
            return Ok(());
        }
        ctl.close_epoch(first_step, started);
        ctl.completed_epochs += 1;
        if !val.is_empty() {
            ctl.val_losses.push(ae_eval_loss(model, val, config.batch_size)?);
        }
    }
    Ok(())
}

fn ae_eval_loss(model: &mut Autoencoder, images: &[Tensor], batch_size: usize) -> Result<f64> {
    let r = model.config.r;
    let mut total = 0.0;
    for chunk in images.chunks(batch_size) {
        let batch: Vec<&Tensor> = chunk.iter().collect();
        let mut tape = Tape::new();
        let x = tape.leaf(to_model_units(&stack_images(&batch, r)?));
        let (_, recon) = model.autoencode(&mut tape, x, Mode::Eval)?;
        let loss = tape.mse(recon, x)?;
        total += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Every distinct slice file in the training split, inputs and outputs alike,
/// in path order.
fn load_ae_images(config: &TrainConfig, r: usize) -> Result<Vec<Tensor>> {
    let manifest = load_manifest(&config.dataset_dir)?;
    if manifest.r as usize != r {
        return Err(Error::InvalidConfig(format!(
            "dataset resolution {} does not match the model's {}",
            manifest.r, r
        )));
    }
    let mut paths = BTreeSet::new();
    for row in manifest.train_rows() {
        paths.insert(row.file_in.as_str());
        paths.insert(row.file_out.as_str());
    }
    paths
        .into_iter()
        .map(|rel| {
            let (image, _, _) = read_slice(&config.dataset_dir.join(rel))?;
            Ok(image)
        })
        .collect()
}

/// Reads a folder of ordinary images as grayscale training material.
fn load_image_folder(dir: &Path, r: usize) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| {
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or_default();
            matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "pgm" | "pnm" | "bmp")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "pretrain folder {} holds no readable images",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|path| {
            let gray = image::open(path)
                .map_err(|e| Error::Format { path: path.clone(), detail: e.to_string() })?
                .to_luma8();
            let resized =
                image::imageops::resize(&gray, r as u32, r as u32, image::imageops::FilterType::Triangle);
            let data: Vec<f32> = resized.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Tensor::from_vec(&[r, r], data)
        })
        .collect()
}

/// How a resumed run rejoins the trajectory: the stored step count is mapped
/// back onto (epoch, offset) under this run's batch layout, and that many
/// batches of the deterministic shuffle are skipped without a forward pass.
fn resume_position(step: u64, epoch_in_meta: u64, steps_per_epoch: u64) -> Result<(u32, u64)> {
    let start_epoch = step / steps_per_epoch;
    let skip = step % steps_per_epoch;
    if epoch_in_meta != start_epoch && epoch_in_meta + 1 != start_epoch {
        return Err(Error::InvalidConfig(format!(
            "checkpoint at step {step} (epoch {epoch_in_meta}) does not line up with {steps_per_epoch} steps per epoch; was it written under a different dataset or batch size?"
        )));
    }
    Ok((start_epoch as u32, skip))
}

/// Phase 1: reconstruction training. With a pretrain folder the run warms up
/// on those images first, then fine-tunes on the dataset's slices; the step
/// counter and log run through both stages.
pub fn train_autoencoder(ae_config: AutoencoderConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if config.phase != Phase::Ae {
        return Err(Error::InvalidConfig(
            "train_autoencoder wants a config with phase \"ae\"".into(),
        ));
    }
    if config.batch_size < 2 {
        return Err(Error::InvalidConfig(
            "autoencoder training needs batch_size of at least 2 for bottleneck batch statistics"
                .into(),
        ));
    }
    ae_config.validate()?;

    let images = load_ae_images(config, ae_config.r)?;
    let (train, val) = split_holdout(images);
    if train.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "training split yields {} usable slices; need at least 2",
            train.len()
        )));
    }
    let pretrain = match &config.pretrain_dir {
        Some(dir) => load_image_folder(dir, ae_config.r)?,
        None => Vec::new(),
    };

    std::fs::create_dir_all(&config.out_dir)?;
    let ckpt_path = config.out_dir.join(AE_CHECKPOINT);
    let log_path = config.out_dir.join(AE_LOG);
    let hp = AdamParams { lr: config.lr, ..AdamParams::default() };

    let full = train.len() / config.batch_size;
    let steps_per_epoch = (full + usize::from(train.len() % config.batch_size >= 2)) as u64;

    let mut ctl = LoopCtl::fresh();
    let mut start_epoch = 0;
    let mut model = if config.resume {
        let (model, meta) = Autoencoder::load(&ckpt_path, true)?;
        if model.config != ae_config {
            return Err(Error::InvalidConfig(format!(
                "checkpoint was built for {:?}, this run wants {:?}",
                model.config, ae_config
            )));
        }
        ctl.step = meta.step;
        ctl.completed_epochs = meta.epoch;
        let (epoch, skip) = resume_position(meta.step, meta.epoch, steps_per_epoch)?;
        start_epoch = epoch;
        ctl.skip = skip;
        model
    } else {
        Autoencoder::build(ae_config, config.seed)?
    };

    if !pretrain.is_empty() {
        run_ae_stage(
            &mut model,
            &pretrain,
            &[],
            0,
            config.pretrain_epochs,
            STAGE_PRETRAIN,
            &mut ctl,
            config,
            hp,
            &ckpt_path,
        )?;
    }
    if !ctl.stopped {
        run_ae_stage(
            &mut model,
            &train,
            &val,
            start_epoch,
            config.epochs,
            STAGE_MAIN,
            &mut ctl,
            config,
            hp,
            &ckpt_path,
        )?;
    }

    model.save(&ckpt_path, config.seed, ctl.step, ctl.completed_epochs)?;
    ctl.log.save(&log_path)?;
    Ok(TrainOutcome {
        log: ctl.log,
        val_losses: ctl.val_losses,
        checkpoint: ckpt_path,
        log_path,
    })
}

pub(crate) struct PnetBatch {
    pub(crate) x_in: Tensor,
    pub(crate) target: Tensor,
    pub(crate) cond: Vec<Vec<f64>>,
}

pub(crate) fn pnet_batch(samples: &[&SliceSample], mode: DatasetMode, r: usize) -> Result<PnetBatch> {
    let ins: Vec<&Tensor> = samples.iter().map(|s| &s.image_in).collect();
    let outs: Vec<&Tensor> = samples.iter().map(|s| &s.image_out).collect();
    let cond = samples
        .iter()
        .map(|s| conditioning_vector(mode, s.params_in, s.params_out, RangePolicy::Strict))
        .collect::<Result<Vec<_>>>()?;
    Ok(PnetBatch {
        x_in: to_model_units(&stack_images(&ins, r)?),
        target: to_model_units(&stack_images(&outs, r)?),
        cond,
    })
}

fn pnet_loss(
    ae: &mut Autoencoder,
    pnet: &ParamNet,
    batch: &PnetBatch,
    tape: &mut Tape,
) -> Result<(crate::tensor::NodeId, f64)> {
    let x = tape.leaf(batch.x_in.clone());
    let pyramid = ae.encode(tape, x, Mode::Eval)?;
    let pred = pnet.forward(tape, &pyramid, &batch.cond)?;
    let target = tape.leaf(batch.target.clone());
    let loss = tape.mse(pred, target)?;
    let loss_val = tape.value(loss).data()[0] as f64;
    Ok((loss, loss_val))
}

/// Phase 2: trains a Param-Net against simulated targets through the frozen
/// autoencoder. Fails fast when the phase 1 checkpoint is missing, the
/// dataset's mode disagrees with the config, or a claimed default-input
/// dataset varies its input parameters.
pub fn train_paramnet(config: &TrainConfig, ae_ckpt: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    if config.phase != Phase::Pnet {
        return Err(Error::InvalidConfig(
            "train_paramnet wants a config with phase \"pnet\"".into(),
        ));
    }
    let mode = config.mode.expect("validate checked the mode");

    let (mut ae, _) = Autoencoder::load(ae_ckpt, true)?;
    // Frozen before the first tape touches it: gradient never crosses into
    // the encoder, and phase 2 cannot move its weights.
    ae.params.set_trainable(false);

    let manifest = load_manifest(&config.dataset_dir)?;
    let dataset_mode: DatasetMode = manifest.mode.parse()?;
    if dataset_mode != mode {
        return Err(Error::ModeMismatch(format!(
            "{} training on a dataset built as {}",
            mode.as_str(),
            manifest.mode
        )));
    }
    if manifest.r as usize != ae.config.r {
        return Err(Error::InvalidConfig(format!(
            "dataset resolution {} does not match the autoencoder's {}",
            manifest.r, ae.config.r
        )));
    }
    let rows: Vec<_> = manifest.train_rows().collect();
    if mode == DatasetMode::D2p {
        for row in &rows {
            if (row.te_in, row.tr_in) != (DEFAULT_PARAMS.te_s, DEFAULT_PARAMS.tr_s) {
                return Err(Error::ModeMismatch(format!(
                    "default-to-param dataset varies its input parameters: sample {} has te {} tr {}",
                    row.id, row.te_in, row.tr_in
                )));
            }
        }
    }
    let samples = load_samples(&config.dataset_dir, &rows)?;
    let (train, val) = split_holdout(samples);
    if train.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }

    std::fs::create_dir_all(&config.out_dir)?;
    let ckpt_path = config.out_dir.join(PN_CHECKPOINT);
    let log_path = config.out_dir.join(PN_LOG);
    let hp = AdamParams { lr: config.lr, ..AdamParams::default() };
    let pn_config = ParamNetConfig { mode, ae: ae.config };
    let steps_per_epoch = train.len().div_ceil(config.batch_size) as u64;

    let mut ctl = LoopCtl::fresh();
    let mut start_epoch = 0;
    let mut pnet = if config.resume {
        let (pnet, meta) = ParamNet::load(&ckpt_path, true)?;
        if pnet.config != pn_config {
            return Err(Error::InvalidConfig(format!(
                "checkpoint was built for {:?}, this run wants {:?}",
                pnet.config, pn_config
            )));
        }
        ctl.step = meta.step;
        ctl.completed_epochs = meta.epoch;
        let (epoch, skip) = resume_position(meta.step, meta.epoch, steps_per_epoch)?;
        start_epoch = epoch;
        ctl.skip = skip;
        pnet
    } else {
        ParamNet::build(pn_config, config.seed)?
    };

    for epoch in start_epoch..config.epochs {
        let started = Instant::now();
        let first_step = ctl.log.steps.len();
        let order = epoch_order(config, STAGE_MAIN, epoch, train.len());
        for chunk in order.chunks(config.batch_size) {
            if ctl.skip > 0 {
                ctl.skip -= 1;
                continue;
            }
            if ctl.hit_max(config) {
                ctl.stopped = true;
                break;
            }
            let picked: Vec<&SliceSample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = pnet_batch(&picked, mode, ae.config.r)?;
            let mut tape = Tape::new();
            let (loss, loss_val) = pnet_loss(&mut ae, &pnet, &batch, &mut tape)?;
            ensure_finite(loss_val, ctl.step + 1)?;
            tape.backward(loss, &mut pnet.params)?;
            adam_step(&mut pnet.params, hp);
            pnet.params.zero_grads();
            ctl.step += 1;
            ctl.log.steps.push(StepLoss { step: ctl.step, loss: loss_val });
            if config.checkpoint_every > 0 && ctl.step % config.checkpoint_every == 0 {
                pnet.save(&ckpt_path, config.seed, ctl.step, ctl.completed_epochs)?;
            }
        }
        if ctl.stopped {
            break;
        }
        ctl.close_epoch(first_step, started);
        ctl.completed_epochs += 1;
        if !val.is_empty() {
            let mut total = 0.0;
            for chunk in val.chunks(config.batch_size) {
                let picked: Vec<&SliceSample> = chunk.iter().collect();
                let batch = pnet_batch(&picked, mode, ae.config.r)?;
                let mut tape = Tape::new();
                let (_, loss_val) = pnet_loss(&mut ae, &pnet, &batch, &mut tape)?;
                total += loss_val * chunk.len() as f64;
            }
            ctl.val_losses.push(total / val.len() as f64);
        }
    }

    pnet.save(&ckpt_path, config.seed, ctl.step, ctl.completed_epochs)?;
    ctl.log.save(&log_path)?;
    Ok(TrainOutcome {
        log: ctl.log,
        val_losses: ctl.val_losses,
        checkpoint: ckpt_path,
        log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PaletteFamily};
    use crate::sim::{build_dataset, DatasetConfig};
    use tempfile::TempDir;

    fn micro_dataset(dir: &Path, mode: DatasetMode, pairs: usize, slices: usize, r: usize) {
        let vol = generate_phantom(7, [16, 16, 16], PaletteFamily::Default).unwrap();
        let config = DatasetConfig {
            mode,
            n_pairs: pairs,
            slices_per_pair: slices,
            r,
            seed: 11,
            workers: 1,
            noise_sigma: 0.0,
        };
        build_dataset(&[vol], &config, dir).unwrap();
    }

    fn micro_config(dataset: &Path, out: &Path) -> TrainConfig {
        let mut config = TrainConfig::new(Phase::Ae, dataset, out);
        config.epochs = 4;
        config.batch_size = 2;
        config.lr = 2e-3;
        config.seed = 3;
        config.deterministic = true;
        config
    }

    #[test]
    fn model_unit_maps_are_exact_inverses() {
        let x = Tensor::from_vec(&[5], vec![0.0, 1.0, 0.5, -0.3, 1.7]).unwrap();
        let y = to_model_units(&x);
        assert_eq!(y.data(), &[-1.0, 1.0, 0.0, -1.0, 1.0]);
        let back = from_model_units(&y);
        assert_eq!(back.data(), &[0.0, 1.0, 0.5, 0.0, 1.0]);
        for v in [0.0f32, 0.125, 0.5, 0.875, 1.0] {
            let t = Tensor::from_vec(&[1], vec![v]).unwrap();
            let rt = from_model_units(&to_model_units(&t)).data()[0];
            assert!((rt - v).abs() < 1e-6);
        }
        let wild = Tensor::from_vec(&[2], vec![-9.0, 9.0]).unwrap();
        assert_eq!(from_model_units(&wild).data(), &[0.0, 1.0]);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let base = || TrainConfig::new(Phase::Ae, "d", "o");
        let cases: Vec<(&str, TrainConfig)> = vec![
            ("epochs", {
                let mut c = base();
                c.epochs = 0;
                c
            }),
            ("batch", {
                let mut c = base();
                c.batch_size = 0;
                c
            }),
            ("lr zero", {
                let mut c = base();
                c.lr = 0.0;
                c
            }),
            ("lr nan", {
                let mut c = base();
                c.lr = f64::NAN;
                c
            }),
            ("max_steps zero", {
                let mut c = base();
                c.max_steps = Some(0);
                c
            }),
            ("pnet without mode", {
                let mut c = base();
                c.phase = Phase::Pnet;
                c
            }),
            ("pnet with pretrain", {
                let mut c = base();
                c.phase = Phase::Pnet;
                c.mode = Some(DatasetMode::D2p);
                c.pretrain_dir = Some("p".into());
                c
            }),
            ("resume across pretrain", {
                let mut c = base();
                c.resume = true;
                c.pretrain_dir = Some("p".into());
                c
            }),
        ];
        for (what, config) in cases {
            assert!(
                matches!(config.validate(), Err(Error::InvalidConfig(_))),
                "{what} should be rejected"
            );
        }
        assert!(base().validate().is_ok());
    }

    #[test]
    fn autoencoder_overfits_a_few_slices() {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        micro_dataset(&data, DatasetMode::D2p, 4, 2, 8);
        let mut config = micro_config(&data, &dir.path().join("out"));
        config.epochs = 4000;
        config.batch_size = 4;
        config.lr = 3e-3;
        config.max_steps = Some(2000);
        let outcome = train_autoencoder(AutoencoderConfig::new(3, 8), &config).unwrap();
        let last = outcome.log.steps.last().unwrap();
        assert!(last.step <= 2000);
        assert!(
            last.loss < 1e-3,
            "memorization stalled at {} after {} steps",
            last.loss,
            last.step
        );
        assert!(outcome.checkpoint.is_file());
        assert_eq!(TrainLog::load(&outcome.log_path).unwrap(), outcome.log);
    }

    #[test]
    fn paramnet_overfits_and_leaves_the_autoencoder_alone() {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        micro_dataset(&data, DatasetMode::D2p, 4, 2, 8);

        let mut ae_config = micro_config(&data, &dir.path().join("ae"));
        ae_config.epochs = 2000;
        ae_config.batch_size = 4;
        ae_config.max_steps = Some(300);
        let ae_out = train_autoencoder(AutoencoderConfig::new(3, 4), &ae_config).unwrap();
        let frozen_bytes = std::fs::read(&ae_out.checkpoint).unwrap();

        let mut config = TrainConfig::new(Phase::Pnet, &data, dir.path().join("pn"));
        config.mode = Some(DatasetMode::D2p);
        config.epochs = 4000;
        config.batch_size = 4;
        config.lr = 2e-3;
        config.deterministic = true;
        config.max_steps = Some(2500);
        let outcome = train_paramnet(&config, &ae_out.checkpoint).unwrap();
        let last = outcome.log.steps.last().unwrap();
        assert!(
            last.loss < 1e-3,
            "memorization stalled at {} after {} steps",
            last.loss,
            last.step
        );
        assert_eq!(
            std::fs::read(&ae_out.checkpoint).unwrap(),
            frozen_bytes,
            "phase 2 must not rewrite the phase 1 checkpoint"
        );
    }

    #[test]
    fn phase_two_cannot_move_frozen_autoencoder_weights() {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        micro_dataset(&data, DatasetMode::P2p, 4, 2, 8);
        let manifest = load_manifest(&data).unwrap();
        let rows: Vec<_> = manifest.train_rows().collect();
        let samples = load_samples(&data, &rows).unwrap();
        let picked: Vec<&SliceSample> = samples.iter().collect();

        let mut ae = Autoencoder::build(AutoencoderConfig::new(3, 4), 9).unwrap();
        ae.params.set_trainable(false);
        let params_before: Vec<Vec<f32>> =
            ae.params.iter().map(|p| p.value.data().to_vec()).collect();
        let buffers_before: Vec<Vec<f32>> =
            ae.buffers.iter().map(|(_, t)| t.data().to_vec()).collect();

        let pn_config = ParamNetConfig { mode: DatasetMode::P2p, ae: ae.config };
        let mut pnet = ParamNet::build(pn_config, 5).unwrap();
        let init = pnet.params.iter().map(|p| p.value.data().to_vec()).collect::<Vec<_>>();
        let batch = pnet_batch(&picked, DatasetMode::P2p, 8).unwrap();
        for _ in 0..3 {
            let mut tape = Tape::new();
            let (loss, _) = pnet_loss(&mut ae, &pnet, &batch, &mut tape).unwrap();
            tape.backward(loss, &mut pnet.params).unwrap();
            adam_step(&mut pnet.params, AdamParams::default());
            pnet.params.zero_grads();
        }

        let params_after: Vec<Vec<f32>> =
            ae.params.iter().map(|p| p.value.data().to_vec()).collect();
        let buffers_after: Vec<Vec<f32>> =
            ae.buffers.iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(params_before, params_after);
        assert_eq!(buffers_before, buffers_after);
        let moved = pnet
            .params
            .iter()
            .zip(&init)
            .any(|(p, old)| p.value.data() != old.as_slice());
        assert!(moved, "the param-net itself was supposed to train");
    }

    #[test]
    fn deterministic_runs_match_and_entropy_runs_differ() {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        micro_dataset(&data, DatasetMode::D2p, 12, 2, 8);
        let run = |out: &str, deterministic: bool| {
            let mut config = micro_config(&data, &dir.path().join(out));
            config.epochs = 3;
            config.deterministic = deterministic;
            train_autoencoder(AutoencoderConfig::new(3, 2), &config).unwrap()
        };
        let a = run("a", true);
        let b = run("b", true);
        assert_eq!(
            std::fs::read(&a.checkpoint).unwrap(),
            std::fs::read(&b.checkpoint).unwrap(),
            "same seed and determinism flag must reproduce the checkpoint byte for byte"
        );
        let c = run("c", false);
        let d = run("d", false);
        assert_ne!(
            c.log.steps.last().unwrap().loss,
            d.log.steps.last().unwrap().loss,
            "entropy-shuffled runs landing on identical losses is vanishingly unlikely"
        );
    }

    #[test]
    fn resume_rejoins_the_uninterrupted_trajectory() {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        micro_dataset(&data, DatasetMode::D2p, 12, 2, 8);
        let ae_config = AutoencoderConfig::new(3, 2);

        let full = train_autoencoder(ae_config, &micro_config(&data, &dir.path().join("full")))
            .unwrap();

        let mut interrupted = micro_config(&data, &dir.path().join("resumed"));
        interrupted.max_steps = Some(6);
        interrupted.checkpoint_every = 2;
        let first_leg = train_autoencoder(ae_config, &interrupted).unwrap();
        assert_eq!(first_leg.log.steps.len(), 6);

        let mut rest = interrupted.clone();
        rest.max_steps = None;
        rest.resume = true;
        let second_leg = train_autoencoder(ae_config, &rest).unwrap();

        assert_eq!(
            std::fs::read(&full.checkpoint).unwrap(),
            std::fs::read(&second_leg.checkpoint).unwrap(),
            "resumed run must land on the uninterrupted run's exact weights"
        );
        assert_eq!(&full.log.steps[6..], &second_leg.log.steps[..]);
    }

    #[test]
    fn pretrain_stage_runs_before_fine_tuning() {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        micro_dataset(&data, DatasetMode::D2p, 4, 2, 8);
        let folder = dir.path().join("images");
        std::fs::create_dir_all(&folder).unwrap();
        for i in 0..3u32 {
            let img = image::ImageBuffer::from_fn(16, 16, |x, y| {
                image::Luma([((x * 13 + y * 7 + i * 40) % 256) as u8])
            });
            img.save(folder.join(format!("img{i}.png"))).unwrap();
        }

        let mut config = micro_config(&data, &dir.path().join("out"));
        config.epochs = 1;
        config.pretrain_dir = Some(folder);
        config.pretrain_epochs = 2;
        let outcome = train_autoencoder(AutoencoderConfig::new(3, 2), &config).unwrap();
        // Two warm-up epochs of 1 step (3 images, batch 2, singleton dropped)
        // precede the fine-tuning epoch; the log numbers them continuously.
        assert_eq!(outcome.log.epochs.len(), 3);
        let epochs: Vec<u32> = outcome.log.epochs.iter().map(|e| e.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2]);
        assert_eq!(outcome.log.steps.first().unwrap().step, 1);

        let empty = dir.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        config.pretrain_dir = Some(empty);
        assert!(matches!(
            train_autoencoder(AutoencoderConfig::new(3, 2), &config),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn nan_in_the_data_stops_training_with_a_numeric_error() {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        micro_dataset(&data, DatasetMode::D2p, 4, 2, 8);
        for entry in std::fs::read_dir(data.join("slices")).unwrap() {
            let path = entry.unwrap().path();
            let mut bytes = std::fs::read(&path).unwrap();
            for px in bytes[28..].chunks_exact_mut(4) {
                px.copy_from_slice(&f32::NAN.to_le_bytes());
            }
            std::fs::write(&path, bytes).unwrap();
        }
        let mut config = micro_config(&data, &dir.path().join("out"));
        config.batch_size = 4;
        let err = train_autoencoder(AutoencoderConfig::new(3, 4), &config).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "got {err:?}");
    }

    #[test]
    fn phase_and_mode_guards_fail_fast() {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        micro_dataset(&data, DatasetMode::P2p, 4, 2, 8);
        let ae_path = dir.path().join("ae.ckpt");
        Autoencoder::build(AutoencoderConfig::new(3, 2), 1)
            .unwrap()
            .save(&ae_path, 1, 0, 0)
            .unwrap();

        // Feeding a paramnet config to the autoencoder entry point and vice
        // versa is a config error.
        let mut swapped = micro_config(&data, &dir.path().join("out"));
        swapped.phase = Phase::Pnet;
        swapped.mode = Some(DatasetMode::P2p);
        assert!(matches!(
            train_autoencoder(AutoencoderConfig::new(3, 2), &swapped),
            Err(Error::InvalidConfig(_))
        ));

        let mut config = TrainConfig::new(Phase::Pnet, &data, dir.path().join("out"));
        config.mode = Some(DatasetMode::D2p);
        config.epochs = 1;
        assert!(matches!(
            train_paramnet(&config, &ae_path),
            Err(Error::ModeMismatch(_))
        ));

        config.mode = Some(DatasetMode::P2p);
        assert!(
            train_paramnet(&config, &dir.path().join("missing.ckpt")).is_err(),
            "phase 2 before phase 1 must fail fast"
        );

        let wrong_r = Autoencoder::build(AutoencoderConfig::new(4, 2), 1).unwrap();
        let wrong_path = dir.path().join("ae16.ckpt");
        wrong_r.save(&wrong_path, 1, 0, 0).unwrap();
        assert!(matches!(
            train_paramnet(&config, &wrong_path),
            Err(Error::InvalidConfig(_))
        ));
    }
}
