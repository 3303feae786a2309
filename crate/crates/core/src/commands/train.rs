use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{mix_seed, prepare_out_dir, write_text};
use crate::config::RunConfig;
use crate::data::{align_face, augment, load_manifest, plan_epoch, read_ppm, Image, SamplerConfig, TEMPLATE_112};
use crate::error::{Error, Result};
use crate::loss::MarginHead;
use crate::nn::{Backbone, Ctx};
use crate::optim::{lr_at, Ema, ScheduleConfig, Sgd};
use crate::tensor::{write_checkpoint, ParamStore, Tape};

pub const LOG_HEADER: &str = "epoch,step,lr,loss,epoch_masked_fraction";

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub epoch_masked_fraction: Vec<f64>,
    pub seconds: f64,
}

/// Splits an epoch plan of `len` records into consecutive batches of `batch`.
/// A short tail is folded into the last full batch so no step sees a batch
/// too small for batch statistics.
pub fn batch_ranges(len: usize, batch: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if batch < 2 || len < 2 {
        return Err(Error::Config(format!(
            "training needs batch_size >= 2 and at least 2 planned records (batch {batch}, plan {len})"
        )));
    }
    let n = (len / batch).max(1);
    Ok((0..n)
        .map(|i| i * batch..if i + 1 == n { len } else { (i + 1) * batch })
        .collect())
}

fn load_aligned(cfg: &RunConfig) -> Result<(Vec<crate::data::ManifestRecord>, Vec<Image>)> {
    let path = &cfg.data.train_manifest;
    let records = load_manifest(path)?;
    if records.is_empty() {
        return Err(Error::Validation(format!("{}: no training records", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let images = records
        .par_iter()
        .map(|r| align_face(&read_ppm(r.resolve(base))?, &r.landmarks))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, images))
}

/// Trains the backbone with the configured margin head. Writes the echoed
/// config, `train_log.csv`, `model.mfrw` and (with EMA on) `model_ema.mfrw`
/// into `run_dir`.
pub fn train(cfg: &RunConfig, run_dir: &Path, force: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let (records, images) = load_aligned(cfg)?;
    let class_count = records.iter().map(|r| r.identity).max().unwrap() + 1;
    prepare_out_dir(run_dir, force)?;
    write_text(&run_dir.join("config.txt"), &cfg.to_text())?;

    let sampler = |epoch: usize| SamplerConfig {
        seed: mix_seed(&[cfg.seed, 10, epoch as u64]),
        ..cfg.sampler
    };
    let plan_len = plan_epoch(&records, &sampler(0))?.len();
    let batch = cfg.train.batch_size;
    let steps_per_epoch = batch_ranges(plan_len, batch)?.len();
    let schedule = ScheduleConfig {
        steps_per_epoch,
        ..cfg.schedule
    };
    let epochs = cfg.schedule.total_epochs as usize;

    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 11]));
    let mut store = ParamStore::<f32>::new();
    let backbone = Backbone::new(&mut store, &cfg.backbone, &mut init_rng)?;
    let head = MarginHead::new(&mut store, cfg.margin(class_count), &mut init_rng)?;
    let mut sgd = Sgd::new(cfg.sgd, &store)?;
    let mut ema = if cfg.ema.enabled { Some(Ema::new(&store, cfg.ema.decay)?) } else { None };
    log::info!(
        "training {} records, {class_count} identities, {} parameters, {steps_per_epoch} steps/epoch",
        records.len(),
        store.num_scalars()
    );

    let mut log_text = format!("{LOG_HEADER}\n");
    let mut summary = TrainSummary {
        run_dir: run_dir.to_path_buf(),
        steps: 0,
        steps_per_epoch,
        losses: Vec::new(),
        lrs: Vec::new(),
        epoch_masked_fraction: Vec::new(),
        seconds: 0.0,
    };
    for epoch in 0..epochs {
        let plan = plan_epoch(&records, &sampler(epoch))?;
        let masked_frac = plan.iter().filter(|&&i| records[i].masked).count() as f64 / plan.len() as f64;
        summary.epoch_masked_fraction.push(masked_frac);
        for (bi, range) in batch_ranges(plan.len(), batch)?.into_iter().enumerate() {
            let chunk = &plan[range];
            let step = epoch * steps_per_epoch + bi;
            let lr = lr_at(step, &schedule)?;
            let augmented = chunk
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 12, step as u64, slot as u64]));
                    augment(&images[i], &TEMPLATE_112, &cfg.aug, &mut rng).map(|(img, _)| img)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Image> = augmented.iter().collect();
            let x = Image::batch_tensor(&refs)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| records[i].identity).collect();

            let mut step_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 13, step as u64]));
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let diagnose = |e: Error, losses: &[f64]| match e {
                Error::NonFinite(m) => Error::NonFinite(format!(
                    "{m} at epoch {epoch} step {step} (lr {lr:.6e}); recent losses {:?}",
                    &losses[losses.len().saturating_sub(5)..]
                )),
                other => other,
            };
            let loss = {
                let mut ctx = Ctx::train(&mut tape, &mut store, &mut step_rng);
                let emb = backbone.forward(&mut ctx, xv).map_err(|e| diagnose(e, &summary.losses))?;
                head.loss(&mut ctx, emb, &labels).map_err(|e| diagnose(e, &summary.losses))?
            };
            let loss_value = tape.value(loss)?.item()? as f64;
            if !loss_value.is_finite() {
                return Err(diagnose(Error::NonFinite(format!("loss {loss_value}")), &summary.losses));
            }
            store.zero_grad();
            tape.backward_into(loss, &mut store).map_err(|e| diagnose(e, &summary.losses))?;
            sgd.step(&mut store, lr)?;
            if let Some(ema) = ema.as_mut() {
                ema.update(&store)?;
            }
            let _ = writeln!(log_text, "{epoch},{step},{lr},{loss_value},{masked_frac}");
            log::debug!("epoch {epoch} step {step} lr {lr:.5} loss {loss_value:.4}");
            summary.losses.push(loss_value);
            summary.lrs.push(lr);
            summary.steps += 1;
        }
        log::info!(
            "epoch {epoch}: mean loss {:.4}",
            summary.losses[summary.losses.len() - steps_per_epoch..].iter().sum::<f64>() / steps_per_epoch as f64
        );
    }
    write_text(&run_dir.join("train_log.csv"), &log_text)?;
    write_checkpoint(&run_dir.join("model.mfrw"), &store.named_tensors())?;
    if let Some(ema) = &ema {
        let mut averaged = store.clone();
        ema.copy_to(&mut averaged)?;
        write_checkpoint(&run_dir.join("model_ema.mfrw"), &averaged.named_tensors())?;
    }
    summary.seconds = start.elapsed().as_secs_f64();
    Ok(summary)
}
