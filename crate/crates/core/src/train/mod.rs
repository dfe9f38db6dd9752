//! Adam/L1 training with warm-restart cosine schedule, and PSNR/SSIM
//! evaluation.
//!
//! The network sees HU slices rescaled to `[0, 1]` over the clipped window
//! `[−1000, 2800]`. A restored HU slice is `input + 3800·R`, so an untrained
//! model returns its input unchanged.

mod metrics;
mod optim;

pub use metrics::{psnr, ssim, ImageMetrics, MetricsReport, HU_DATA_RANGE, PSNR_CAP_DB};
pub use optim::{adam_step, cosine_lr, AdamHyper, AdamState};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model};
use crate::sim::{Pair, HU_MIN};
use crate::tensor::{DType, Tensor};

pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "model.mckp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs per cosine cycle; the rate jumps back to `lr_max` after each.
    pub restart_period: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-3,
            lr_min: 1e-7,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            restart_period: 30,
            batch_size: 2,
            epochs: 300,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0 < self.lr_min && self.lr_min < self.lr_max) {
            return bad(format!("need 0 < lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.restart_period == 0 || self.batch_size == 0 {
            return bad("restart_period and batch_size must be positive".into());
        }
        Ok(())
    }

    /// Learning rate for batch `batch` of `n_batches` in `epoch`.
    pub fn lr_at(&self, epoch: usize, batch: usize, n_batches: usize) -> f64 {
        let within = (epoch % self.restart_period) as f64 + batch as f64 / n_batches.max(1) as f64;
        cosine_lr(within / self.restart_period as f64, self.lr_max, self.lr_min)
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// HU to the network's `[0, 1]` input range.
pub fn normalize_hu(hu: &Tensor, dtype: DType) -> Tensor {
    hu.map(|v| (v - HU_MIN) / HU_DATA_RANGE).to_dtype(dtype)
}

/// Runs the model on an HU slice `[1, H, W]` and returns the restored slice in HU.
pub fn restore_hu(model: &Model, ma_hu: &Tensor) -> Result<Tensor> {
    let r = model.residual(&normalize_hu(ma_hu, model.dtype()))?;
    ma_hu.zip_map(&r, |x, r| x + HU_DATA_RANGE * r).map(|t| t.to_dtype(ma_hu.dtype()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.losses {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean L1 over a batch and the matching averaged gradients. Samples are
/// evaluated in parallel and reduced in batch order.
fn batch_grads(model: &Model, batch: &[(Tensor, Tensor)]) -> Result<(f64, Vec<Tensor>)> {
    let per_sample: Vec<(f64, Vec<Tensor>)> =
        batch.par_iter().map(|(x, y)| model.loss_and_grads(x, y)).collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut acc) = iter.next().expect("batch is non-empty");
    for (l, grads) in iter {
        loss += l;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                *av += gv;
            }
        }
    }
    for a in acc.iter_mut() {
        a.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, acc))
}

/// Trains `model` in place on `pairs`. With `out_dir`, the checkpoint is
/// rewritten after every epoch and the loss curve is written at the end.
pub fn train(model: &mut Model, pairs: &[Pair], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    if cfg.epochs == 0 || cfg.max_steps == Some(0) {
        if let Some(dir) = out_dir {
            save_checkpoint(model, dir.join(CHECKPOINT_FILE))?;
            report.write_csv(std::fs::File::create(dir.join(LOSS_FILE))?)?;
        }
        return Ok(report);
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let dtype = model.dtype();
    let samples: Vec<(Tensor, Tensor)> =
        pairs.iter().map(|p| (normalize_hu(&p.ma, dtype), normalize_hu(&p.clean, dtype))).collect();
    let mut state = AdamState::new(model.params().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let n_batches = samples.len().div_ceil(cfg.batch_size);

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cfg.lr_at(epoch, b, n_batches);
            let batch: Vec<(Tensor, Tensor)> = idx.iter().map(|&i| samples[i].clone()).collect();
            let (loss, grads) = batch_grads(model, &batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite loss {loss} at step {} (epoch {epoch}, lr {lr:.3e})",
                    report.steps()
                )));
            }
            adam_step(model.params_mut().map(|(_, t)| t), &grads, &mut state, cfg.hyper(lr))?;
            report.losses.push(LossRecord { step: report.steps(), epoch, lr, loss });
            if cfg.max_steps.is_some_and(|m| report.steps() >= m) {
                if let Some(dir) = out_dir {
                    save_checkpoint(model, dir.join(CHECKPOINT_FILE))?;
                }
                break 'epochs;
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(model, dir.join(CHECKPOINT_FILE))?;
        }
    }
    if let Some(dir) = out_dir {
        report.write_csv(std::fs::File::create(dir.join(LOSS_FILE))?)?;
    }
    Ok(report)
}

/// PSNR and SSIM of the model's restorations against the clean slices.
pub fn evaluate(model: &Model, pairs: &[Pair]) -> Result<MetricsReport> {
    score(pairs, |p| restore_hu(model, &p.ma))
}

/// PSNR and SSIM of the degraded slices themselves.
pub fn evaluate_degraded(pairs: &[Pair]) -> Result<MetricsReport> {
    score(pairs, |p| Ok(p.ma.clone()))
}

fn score(pairs: &[Pair], restore: impl Fn(&Pair) -> Result<Tensor> + Sync) -> Result<MetricsReport> {
    let per_image = pairs
        .par_iter()
        .map(|p| {
            let out = restore(p)?;
            Ok(ImageMetrics {
                image_id: p.id.clone(),
                psnr: psnr(&out, &p.clean, HU_DATA_RANGE)?,
                ssim: ssim(&out, &p.clean, HU_DATA_RANGE)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport { per_image, data_range: HU_DATA_RANGE })
}
