//! Optimization loop: Adam with bias correction, seeded mini-batch
//! shuffling, epoch-level validation, and best-validation checkpoint
//! retention.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::WindowBatch;
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::model::{self, HifiConfig, LatentSampling};
use crate::params::ParamStore;

/// Training protocol parameters. A seed is always required; there are no
/// unseeded runs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Optional global gradient max-norm clip. Off by default; the unsquared
    /// norm loss has nonsmooth points, and this is the escape hatch.
    pub grad_clip: Option<f64>,
    /// Print a progress line every this many steps.
    pub log_every: Option<usize>,
    /// Stride of the training windows (test scoring always uses stride 1).
    pub stride: usize,
    /// Clamp normalized values to [0, 1].
    pub clip_normalized: bool,
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            lr: 0.005,
            batch_size: 64,
            epochs: 100,
            val_fraction: 0.3,
            seed,
            grad_clip: None,
            log_every: None,
            stride: 1,
            clip_normalized: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.stride == 0 {
            return Err(Error::Config(
                "batch_size, epochs and stride must be positive".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("train.lr".into(), self.lr.to_string());
        m.insert("train.batch_size".into(), self.batch_size.to_string());
        m.insert("train.epochs".into(), self.epochs.to_string());
        m.insert("train.val_fraction".into(), self.val_fraction.to_string());
        m.insert("train.seed".into(), self.seed.to_string());
        if let Some(c) = self.grad_clip {
            m.insert("train.grad_clip".into(), c.to_string());
        }
        if let Some(n) = self.log_every {
            m.insert("train.log_every".into(), n.to_string());
        }
        m.insert("train.stride".into(), self.stride.to_string());
        m.insert(
            "train.clip_normalized".into(),
            self.clip_normalized.to_string(),
        );
        m
    }

    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let seed: u64 = kv::get_parsed(map, "train.seed")?;
        let d = Self::with_seed(seed);
        let cfg = TrainConfig {
            lr: kv::get_parsed_or(map, "train.lr", d.lr)?,
            batch_size: kv::get_parsed_or(map, "train.batch_size", d.batch_size)?,
            epochs: kv::get_parsed_or(map, "train.epochs", d.epochs)?,
            val_fraction: kv::get_parsed_or(map, "train.val_fraction", d.val_fraction)?,
            seed,
            grad_clip: match map.get("train.grad_clip") {
                None => None,
                Some(raw) => Some(raw.parse().map_err(|_| {
                    Error::Config(format!("invalid value for train.grad_clip: {raw}"))
                })?),
            },
            log_every: match map.get("train.log_every") {
                None => None,
                Some(raw) => Some(raw.parse().map_err(|_| {
                    Error::Config(format!("invalid value for train.log_every: {raw}"))
                })?),
            },
            stride: kv::get_parsed_or(map, "train.stride", d.stride)?,
            clip_normalized: kv::get_parsed_or(map, "train.clip_normalized", d.clip_normalized)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// First/second moment estimates plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

/// One Adam update with bias correction. Parameters are re-snapped to the
/// f32 grid afterwards so checkpoints stay exact.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, ArrayD<f64>>,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    grad_clip: Option<f64>,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Train(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
    }
    let scale = match grad_clip {
        Some(max_norm) => {
            let total: f64 = grads.values().map(|g| g.mapv(|v| v * v).sum()).sum();
            let norm = total.sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step;
    let (b1, b2) = betas;
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);
    for (name, g) in grads {
        let g = if scale != 1.0 {
            g.mapv(|v| v * scale)
        } else {
            g.clone()
        };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
        });
        ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| {
            *v = b2 * *v + (1.0 - b2) * g * g;
        });
        let p = params.get_mut(name)?;
        ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    params.quantize_f32();
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// argmin of val_loss, earliest epoch on ties.
    pub best_epoch: usize,
}

impl TrainLog {
    /// Tab-separated text, one epoch per row, with a trailing best-epoch
    /// marker line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\trecon\tkl\twall_time_s\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.epoch, e.train_loss, e.val_loss, e.recon, e.kl, e.wall_time_s
            ));
        }
        out.push_str(&format!("# best_epoch = {}\n", self.best_epoch));
        out
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with minimum validation loss.
    pub best_params: ParamStore,
    pub log: TrainLog,
}

/// Deterministic eps stream for validation passes; the same seed is reused
/// every epoch so validation losses are comparable across epochs.
fn val_eps_seed(seed: u64) -> u64 {
    seed ^ 0x9e3779b97f4a7c15
}

/// Forward + loss over a batch set without gradient updates, deterministic
/// under `eps_seed`.
pub fn evaluate_loss(
    params: &ParamStore,
    cfg: &HifiConfig,
    batches: &WindowBatch,
    eps_seed: u64,
    eval_batch: usize,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Validation("empty evaluation batch set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(eps_seed);
    let n = batches.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + eval_batch).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = batches.subset(&idx);
        let parts = model::batch_loss(params, cfg, &chunk, LatentSampling::Draw(&mut rng))?;
        total += parts.total * (end - start) as f64;
        start = end;
    }
    Ok(total / n as f64)
}

/// Run the full optimization protocol and return the best-validation
/// parameters plus the per-epoch log.
pub fn train(
    mut params: ParamStore,
    cfg: &HifiConfig,
    tcfg: &TrainConfig,
    train_set: &WindowBatch,
    val_set: &WindowBatch,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    if val_set.is_empty() {
        eprintln!("warning: empty validation set; the final epoch will be kept as best");
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut eps_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));
    let mut state = AdamState::default();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let n = train_set.len();
    let mut step = 0usize;

    for epoch in 0..tcfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut recon_sum = 0.0;
        let mut kl_sum = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch = train_set.subset(chunk);
            let (parts, grads) = model::loss_and_grads(
                &params,
                cfg,
                &batch.windows,
                LatentSampling::Draw(&mut eps_rng),
            )?;
            if !parts.total.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            adam_step(
                &mut params,
                &grads,
                &mut state,
                tcfg.lr,
                (0.9, 0.999),
                1e-8,
                tcfg.grad_clip,
            )?;
            loss_sum += parts.total * chunk.len() as f64;
            recon_sum += parts.recon * chunk.len() as f64;
            kl_sum += parts.kl * chunk.len() as f64;
            step += 1;
            if let Some(every) = tcfg.log_every {
                if step % every == 0 {
                    eprintln!("epoch {epoch} step {step}: loss {:.6}", parts.total);
                }
            }
        }

        let train_loss = loss_sum / n as f64;
        let val_loss = if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate_loss(&params, cfg, val_set, val_eps_seed(tcfg.seed), 256)?
        };
        log.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            recon: recon_sum / n as f64,
            kl: kl_sum / n as f64,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });

        let candidate = if val_set.is_empty() { train_loss } else { val_loss };
        let improved = match &best {
            None => true,
            Some((best_loss, _, _)) => candidate < *best_loss,
        };
        if improved {
            best = Some((candidate, epoch, params.clone()));
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    log.best_epoch = best_epoch;
    Ok(TrainOutcome { best_params, log })
}
